import dataclasses
from functools import lru_cache

import pytest

from mocl.config import BackboneConfig, DataConfig, ExperimentConfig
from mocl.experiment import build_backbone, build_suite, reference_accuracies, run_sequence
from mocl.fixtures import fixture_config
from mocl.learner import TrainConfig
from mocl.peft import PeftConfig


def tiny_config(method="mocl", **data) -> ExperimentConfig:
    """A few-second experiment: one-layer encoder, short prefixes, small splits."""
    return ExperimentConfig(
        method=method,
        backbone=BackboneConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32, max_len=16,
                                warm_epochs=1, warm_corpus=200),
        peft=PeftConfig(prefix_len=4),
        train=TrainConfig(epochs=8, patience=3),
        data=DataConfig(**{"n_tasks": 3, "n_train": 32, "n_val": 8, "n_test": 32, "vocab_size": 300,
                           "class_tokens": 6, "background_tokens": 12, "signal": 0.6, **data}),
    )


class Setup:
    def __init__(self, cfg, seed=1):
        self.cfg = cfg
        self.seed = seed
        self.tasks = build_suite(cfg, seed)
        self.backbone, self.vocab = build_backbone(cfg, self.tasks, seed)

    def with_train(self, **kw):
        return dataclasses.replace(self.cfg.train, **kw)


@pytest.fixture(scope="session")
def tiny():
    return Setup(tiny_config())


@pytest.fixture(scope="session")
def standard():
    """Default encoder and training settings on a 2-task suite."""
    return Setup(ExperimentConfig(data=DataConfig(n_tasks=2)))


@pytest.fixture(scope="session")
def disjoint():
    """Default settings on four tasks with disjoint vocabularies."""
    return fixture_setup("disjoint", 1)


# -- cached runs on the named fixtures, shared by the acceptance and metric checks

@lru_cache(maxsize=None)
def fixture_setup(name: str, seed: int) -> Setup:
    return Setup(fixture_config(name), seed)


@lru_cache(maxsize=None)
def fixture_run(name: str, method: str, seed: int, protocols=("TIL",)):
    s = fixture_setup(name, seed)
    cfg = dataclasses.replace(s.cfg, method=method)
    return run_sequence(cfg, s.backbone, s.vocab, s.tasks, seed, protocols)


@lru_cache(maxsize=None)
def fixture_reference(name: str, seed: int):
    s = fixture_setup(name, seed)
    return reference_accuracies(s.cfg, s.backbone, s.vocab, s.tasks, seed)


# -- acceptance report: one line per criterion, repeated in the terminal summary

ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[0][2:])):
            terminalreporter.write_line(line)


# -- tiny TOML experiment for CLI checks

TINY_TOML = """\
method = "{method}"
seeds = {seeds}
output_dir = "{out}"

[backbone]
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
max_len = 16
warm_epochs = 1
warm_corpus = 200

[peft]
prefix_len = 4

[train]
epochs = 4
patience = 2
lr = {lr}

[data]
n_tasks = 2
n_train = 16
n_val = 8
n_test = 16
vocab_size = 300
class_tokens = 6
background_tokens = 12
"""


def write_config(tmp_path, name="exp.toml", method="mocl", seeds=(1,), out="out", lr=2e-3):
    path = tmp_path / name
    path.write_text(TINY_TOML.format(method=method, seeds=list(seeds), out=tmp_path / out, lr=lr))
    return path
