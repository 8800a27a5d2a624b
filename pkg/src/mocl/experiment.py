"""Experiment pipeline: suite -> backbone -> sequential training -> evaluation.

On disk every stage reads the previous stage's artifacts, so ``run`` is just
``gen_data``, ``train`` and ``evaluate`` in a row::

    <output_dir>/data/seed_<s>/suite.jsonl, suite.meta.json
    <output_dir>/<method>/<s>/checkpoints/stage_<i>/...
    <output_dir>/<method>/<s>/reference/task_<i>/...
    <output_dir>/<method>/<s>/acc_til.csv, acc_cil.csv, reference.csv, heatmap.csv, metrics.json
    <output_dir>/<method>/aggregate.json
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from mocl.baselines import supports_cil, train_next, train_per_task_step
from mocl.config import ExperimentConfig, __version__
from mocl.data import TaskSpec, all_texts, apply_order, gen_suite, load_jsonl, pretrain_corpus, save_jsonl
from mocl.errors import ArtifactMismatchError
from mocl.learner import LearnerState, load_state, new_state, save_state
from mocl.metrics import (AccuracyMatrix, accuracy, dump_json, heatmap, record_stage, summary,
                          write_heatmap_csv, write_matrix_csv, write_reference_csv)
from mocl.model import Backbone, Vocab, tokenize_batch, warm_train
from mocl.seeding import stream

log = logging.getLogger(__name__)


def data_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(dataclasses.asdict(cfg.data), sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_suite(cfg: ExperimentConfig, seed: int) -> list[TaskSpec]:
    if cfg.data.corpus:
        tasks = load_jsonl(cfg.data.corpus)
        return apply_order(tasks, cfg.data.order) if cfg.data.order is not None else tasks
    return gen_suite(cfg.data.suite_config(seed))


def build_backbone(cfg: ExperimentConfig, tasks: Sequence[TaskSpec], seed: int) -> tuple[Backbone, Vocab]:
    """Vocab over the suite, random init, then optional masked-token warm-training; frozen."""
    if cfg.data.corpus:
        corpus = all_texts(tasks, ["train"])
    else:
        corpus = pretrain_corpus(cfg.data.suite_config(seed), cfg.backbone.warm_corpus)
    vocab = Vocab.build(all_texts(tasks) + corpus, cfg.backbone.vocab_max)
    model = cfg.backbone.model_config(len(vocab))
    backbone = Backbone.init(model, stream(seed, "backbone"))
    if cfg.backbone.warm and cfg.backbone.warm_epochs > 0:
        ids, mask = tokenize_batch(corpus, vocab, model.max_len)
        warm_train(backbone, ids, mask, cfg.backbone.warm_epochs, stream(seed, "warm"),
                   lr=cfg.backbone.warm_lr)
    backbone.frozen = True
    return backbone, vocab


def as_first_task(task: TaskSpec) -> TaskSpec:
    return dataclasses.replace(task, id=1, label_offset=0)


def reference_state(cfg: ExperimentConfig, backbone: Backbone, vocab: Vocab, task: TaskSpec,
                    seed: int) -> LearnerState:
    """Per-task fine-tuning of ``task`` alone from the shared initialisation."""
    ref = new_state(backbone.copy(), vocab, cfg.peft, cfg.train, seed, "per_task")
    return train_per_task_step(ref, as_first_task(task))


def reference_accuracies(cfg: ExperimentConfig, backbone: Backbone, vocab: Vocab,
                         tasks: Sequence[TaskSpec], seed: int) -> np.ndarray:
    return np.array([accuracy(reference_state(cfg, backbone, vocab, t, seed), as_first_task(t), "TIL")
                     for t in tasks])


@dataclass
class SequenceResult:
    state: LearnerState
    matrices: dict[str, AccuracyMatrix] = field(default_factory=dict)


def run_sequence(cfg: ExperimentConfig, backbone: Backbone, vocab: Vocab, tasks: Sequence[TaskSpec],
                 seed: int, protocols: Sequence[str] = ("TIL",)) -> SequenceResult:
    """Train ``cfg.method`` through ``tasks`` in memory, evaluating after every task."""
    state = new_state(backbone.copy(), vocab, cfg.peft, cfg.train, seed, cfg.method)
    names = [t.name for t in tasks]
    protocols = [p for p in protocols if p == "TIL" or supports_cil(cfg.method)]
    res = SequenceResult(state, {p: AccuracyMatrix.empty(names) for p in protocols})
    for i, task in enumerate(tasks):
        train_next(state, task)
        for p in protocols:
            record_stage(res.matrices[p], state, tasks[: i + 1], p)
    return res


# -- on-disk stages ------------------------------------------------------------------

def data_dir(cfg: ExperimentConfig, seed: int) -> Path:
    return Path(cfg.output_dir) / "data" / f"seed_{seed}"


def seed_dir(cfg: ExperimentConfig, seed: int) -> Path:
    return Path(cfg.output_dir) / cfg.method / str(seed)


def _meta(cfg: ExperimentConfig, seed: int) -> dict:
    return {"seed": seed, "config_hash": cfg.config_hash(), "data_hash": data_hash(cfg),
            "code_version": __version__}


def gen_data(cfg: ExperimentConfig, seed: int) -> Path:
    d = data_dir(cfg, seed)
    d.mkdir(parents=True, exist_ok=True)
    tasks = build_suite(cfg, seed)
    save_jsonl(d / "suite.jsonl", tasks)
    meta = {"seed": seed, "data_hash": data_hash(cfg), "code_version": __version__,
            "task_order": [t.name for t in tasks]}
    dump_json(d / "suite.meta.json", meta)
    return d


def load_suite(cfg: ExperimentConfig, seed: int) -> list[TaskSpec]:
    d = data_dir(cfg, seed)
    meta = json.loads((d / "suite.meta.json").read_text())
    if meta["data_hash"] != data_hash(cfg) or meta["seed"] != seed:
        raise ArtifactMismatchError(
            f"{d}: suite was generated with data hash {meta['data_hash']} (seed {meta['seed']}), "
            f"current config has {data_hash(cfg)} (seed {seed}); rerun gen-data")
    tasks = load_jsonl(d / "suite.jsonl")
    order = {t.name: t for t in tasks}
    return apply_order(tasks, [list(order).index(n) for n in meta["task_order"]])


def train(cfg: ExperimentConfig, seed: int) -> Path:
    """Train the method, checkpointing after every task, plus the isolated reference runs."""
    tasks = load_suite(cfg, seed)
    out = seed_dir(cfg, seed)
    out.mkdir(parents=True, exist_ok=True)
    backbone, vocab = build_backbone(cfg, tasks, seed)
    meta = _meta(cfg, seed)
    state = new_state(backbone.copy(), vocab, cfg.peft, cfg.train, seed, cfg.method)
    for task in tasks:
        train_next(state, task)
        save_state(state, out / "checkpoints" / f"stage_{task.id}", meta)
        log.info("seed %d: trained %s (%d/%d)", seed, task.name, task.id, len(tasks))
    if cfg.compute_fwt:
        for task in tasks:
            ref = reference_state(cfg, backbone, vocab, task, seed)
            save_state(ref, out / "reference" / f"task_{task.id}", meta)
    return out


def _load_checked(path: Path, cfg: ExperimentConfig, seed: int) -> LearnerState:
    state, manifest = load_state(path)
    if manifest.get("config_hash") != cfg.config_hash() or manifest.get("seed") != seed:
        raise ArtifactMismatchError(
            f"{path}: checkpoint config hash {manifest.get('config_hash')} (seed {manifest.get('seed')}) "
            f"does not match current config {cfg.config_hash()} (seed {seed})")
    return state


def evaluate(cfg: ExperimentConfig, seed: int) -> dict:
    """Rebuild accuracy matrices, references, heatmap and metrics from checkpoints."""
    tasks = load_suite(cfg, seed)
    out = seed_dir(cfg, seed)
    names = [t.name for t in tasks]
    protocols = [p for p in cfg.protocols if p == "TIL" or supports_cil(cfg.method)]
    matrices = {p: AccuracyMatrix.empty(names) for p in protocols}
    state = None
    for i in range(1, len(tasks) + 1):
        state = _load_checked(out / "checkpoints" / f"stage_{i}", cfg, seed)
        for p in protocols:
            record_stage(matrices[p], state, tasks[:i], p)
    if cfg.compute_fwt and "TIL" in matrices:
        refs = np.array([accuracy(_load_checked(out / "reference" / f"task_{t.id}", cfg, seed),
                                  as_first_task(t), "TIL") for t in tasks])
        matrices["TIL"].reference = refs
        write_reference_csv(out / "reference.csv", names, refs)
    for p, m in matrices.items():
        write_matrix_csv(out / f"acc_{p.lower()}.csv", names, m.a)
    if cfg.method == "mocl":
        write_heatmap_csv(out / "heatmap.csv", heatmap(state, tasks))
    doc = {
        "method": cfg.method, "seed": seed, "config_hash": cfg.config_hash(),
        "code_version": __version__,
        "protocols": {p: summary(m, p, seed, cfg.config_hash()) for p, m in matrices.items()},
    }
    dump_json(out / "metrics.json", doc)
    return doc


def aggregate(cfg: ExperimentConfig, seeds: Sequence[int]) -> dict:
    """Mean and std of avg/fwt across seeds; written next to the per-seed folders."""
    docs = [json.loads((seed_dir(cfg, s) / "metrics.json").read_text()) for s in seeds]
    agg = {"method": cfg.method, "seeds": list(seeds), "config_hash": cfg.config_hash(),
           "code_version": __version__, "protocols": {}}
    for p in docs[0]["protocols"]:
        entry = {}
        for key in ("avg", "fwt"):
            vals = [d["protocols"][p][key] for d in docs]
            if any(v is None for v in vals):
                continue
            entry[key] = {"mean": round(float(np.mean(vals)), 6), "std": round(float(np.std(vals)), 6)}
        agg["protocols"][p] = entry
    dump_json(Path(cfg.output_dir) / cfg.method / "aggregate.json", agg)
    return agg


def run(cfg: ExperimentConfig, seeds: Sequence[int] | None = None, echo=print) -> dict:
    seeds = list(seeds or cfg.seeds)
    for seed in seeds:
        gen_data(cfg, seed)
        train(cfg, seed)
        doc = evaluate(cfg, seed)
        parts = [f"{p} avg={m['avg']:.4f}" + (f" fwt={m['fwt']:+.4f}" if m["fwt"] is not None else "")
                 for p, m in doc["protocols"].items()]
        echo(f"[{cfg.method} seed={seed}] " + "  ".join(parts))
    agg = aggregate(cfg, seeds)
    echo(format_aggregate(agg))
    return agg


def format_aggregate(agg: dict) -> str:
    lines = [f"{'method':<14}{'protocol':<10}{'avg':>20}{'fwt':>20}"]
    for p, e in agg["protocols"].items():
        cells = [f"{e[k]['mean']:.4f} ± {e[k]['std']:.4f}" if k in e else "-" for k in ("avg", "fwt")]
        lines.append(f"{agg['method']:<14}{p:<10}{cells[0]:>20}{cells[1]:>20}")
    return "\n".join(lines)
