"""Named task suites used by the acceptance checks and the scripts.

``interference`` is the adversarial pair: task 2 draws its background noise
from task 1's class vocabulary, so a single shared module that learns to ignore
that noise for task 2 also discards the evidence task 1 relied on.
"""
from __future__ import annotations

from mocl.config import DataConfig, ExperimentConfig

FIXTURES = {
    "freeze": dict(n_tasks=3),
    "interference": dict(n_tasks=2, rho=0.0, interference=True, n_train=128),
    "near": dict(n_tasks=4, rho=0.9),
    "disjoint": dict(n_tasks=4, rho=0.0),
}


def fixture_config(name: str, method: str = "mocl", **data) -> ExperimentConfig:
    """Default model and training settings on the named suite, with optional data overrides."""
    if name not in FIXTURES:
        raise KeyError(f"unknown fixture {name!r}; expected one of {sorted(FIXTURES)}")
    return ExperimentConfig(method=method, data=DataConfig(**{**FIXTURES[name], **data}))
