"""Accuracy matrices, final average, forward transfer, and matching-weight heatmaps."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from mocl.data import TaskSpec
from mocl.errors import ConfigurationError, DataFormatError
from mocl.model import pooled_embeddings, tokenize_batch

PROTOCOLS = ("TIL", "CIL")


@dataclass
class AccuracyMatrix:
    """``a[i, j]``: accuracy on task ``j`` after training through task ``i`` (0-based, j <= i)."""

    names: list[str]
    a: np.ndarray
    reference: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.names)
        self.a = np.asarray(self.a, dtype=np.float64)
        if self.a.shape != (n, n):
            raise ConfigurationError(f"matrix shape {self.a.shape} does not match {n} tasks")
        if self.reference is None:
            self.reference = np.full(n, np.nan)
        self.reference = np.asarray(self.reference, dtype=np.float64)

    @classmethod
    def empty(cls, names: Sequence[str]) -> "AccuracyMatrix":
        n = len(names)
        return cls(list(names), np.full((n, n), np.nan))

    @property
    def n(self) -> int:
        return len(self.names)

    def diagonal(self) -> np.ndarray:
        return np.diag(self.a).copy()

    def final_row(self) -> np.ndarray:
        return self.a[-1].copy()


def accuracy(state, task: TaskSpec, protocol: str = "TIL") -> float:
    """Fraction of ``task``'s test examples predicted correctly.

    Under CIL a prediction counts only if both the chosen task and the label
    within it are right.
    """
    from mocl.baselines import infer_cil_any
    from mocl.learner import infer_til

    if not task.test:
        raise ConfigurationError(f"task {task.name!r} has an empty test set")
    ids, mask = tokenize_batch([e.text for e in task.test], state.vocab, state.model.max_len)
    gold = np.array([e.label for e in task.test])
    if protocol == "TIL":
        pred = infer_til(state, ids, task.id, mask)
        return float(np.mean(pred == gold))
    if protocol == "CIL":
        tid, pred = infer_cil_any(state, ids, mask)
        return float(np.mean((tid == task.id) & (pred == gold)))
    raise ConfigurationError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")


def record_stage(matrix: AccuracyMatrix, state, tasks: Sequence[TaskSpec], protocol: str) -> None:
    """Fill row ``i`` (stage ``i = len(tasks)``) of ``matrix``."""
    i = len(tasks) - 1
    for j, task in enumerate(tasks):
        matrix.a[i, j] = accuracy(state, task, protocol)


def fwt(matrix: AccuracyMatrix) -> float:
    """Mean over ``i = 2..N`` of ``a_{i,i} - reference_i``."""
    if matrix.n < 2:
        raise ConfigurationError("forward transfer needs at least two tasks")
    diag, ref = matrix.diagonal()[1:], matrix.reference[1:]
    if np.isnan(ref).any():
        raise ConfigurationError("forward transfer needs reference accuracies for tasks 2..N")
    if np.isnan(diag).any():
        raise ConfigurationError("accuracy matrix is missing diagonal entries")
    return float(np.sum(diag - ref) / (matrix.n - 1))


def avg_final(matrix: AccuracyMatrix) -> float:
    """Mean accuracy over all tasks after the last one was learned."""
    row = matrix.final_row()
    if np.isnan(row).any():
        raise ConfigurationError("final row of the accuracy matrix is incomplete")
    return float(np.mean(row))


@dataclass
class HeatmapMatrix:
    """``w[n, k]``: mean matching weight of module ``k`` over task ``n``'s examples (k <= n)."""

    names: list[str]
    w: np.ndarray


def heatmap(state, tasks: Sequence[TaskSpec], split: str = "train") -> HeatmapMatrix:
    """Average per-example matching scores of each task's examples against ``V[:n]``."""
    from mocl.learner import matching_scores

    if state.method != "mocl":
        raise ConfigurationError("matching-weight heatmaps exist only for the mocl method")
    n = min(len(tasks), state.n)
    w = np.full((n, n), np.nan)
    for i, task in enumerate(tasks[:n]):
        exs = task.split(split)
        ids, mask = tokenize_batch([e.text for e in exs], state.vocab, state.model.max_len)
        x = pooled_embeddings(state.backbone, ids, mask)
        w[i, : i + 1] = matching_scores(x, state.feature_matrix(i + 1)).mean(axis=0)
    return HeatmapMatrix(list(state.task_names[:n]), w)


# -- CSV / JSON ------------------------------------------------------------------

def _fmt(v: float) -> str:
    return "" if math.isnan(v) else f"{v:.6f}"


def write_matrix_csv(path: str | Path, names: Sequence[str], m: np.ndarray, corner: str = "task") -> None:
    """Row/column headers are task names; absent (upper) entries are blank."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([corner, *names])
        for name, row in zip(names, m):
            w.writerow([name, *(_fmt(v) for v in row)])


def read_matrix_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(f"{path}: empty matrix file")
    names = rows[0][1:]
    if len(rows) - 1 != len(names):
        raise DataFormatError(f"{path}: expected {len(names)} rows, got {len(rows) - 1}")
    m = np.full((len(names), len(names)), np.nan)
    for i, row in enumerate(rows[1:]):
        if row[0] != names[i] or len(row) != len(names) + 1:
            raise DataFormatError(f"{path}: malformed row {i + 2}", i + 2)
        for j, cell in enumerate(row[1:]):
            if cell:
                m[i, j] = float(cell)
    return names, m


def write_heatmap_csv(path, hm: HeatmapMatrix) -> None:
    write_matrix_csv(path, hm.names, hm.w, corner="task\\module")


def read_heatmap_csv(path) -> HeatmapMatrix:
    names, w = read_matrix_csv(path)
    return HeatmapMatrix(names, w)


def write_reference_csv(path, names: Sequence[str], reference: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "reference"])
        for name, v in zip(names, reference):
            w.writerow([name, _fmt(v)])


def read_reference_csv(path) -> dict[str, float]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["task", "reference"]:
        raise DataFormatError(f"{path}: expected header 'task,reference'")
    return {r[0]: (float(r[1]) if r[1] else float("nan")) for r in rows[1:]}


def summary(matrix: AccuracyMatrix, protocol: str, seed: int, config_hash: str,
            extra: dict | None = None) -> dict:
    """Metrics document ``{avg, fwt, per_task, protocol, seed, config_hash}``."""
    has_ref = matrix.n >= 2 and not np.isnan(matrix.reference[1:]).any()
    doc = {
        "avg": round(avg_final(matrix), 6),
        "fwt": round(fwt(matrix), 6) if has_ref else None,
        "per_task": {name: round(float(v), 6) for name, v in zip(matrix.names, matrix.final_row())},
        "protocol": protocol,
        "seed": seed,
        "config_hash": config_hash,
    }
    doc.update(extra or {})
    return doc


def dump_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
