"""Synthetic bag-of-words task suites and JSON-lines corpora."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from mocl.errors import ConfigurationError, DataFormatError
from mocl.seeding import stream

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Example:
    text: str
    label: int  # index into the owning task's label list


@dataclass
class TaskSpec:
    id: int
    name: str
    labels: list[str]
    train: list[Example]
    val: list[Example]
    test: list[Example]
    label_offset: int = 0

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    def split(self, name: str) -> list[Example]:
        return getattr(self, name)

    def global_label(self, local: int) -> int:
        return self.label_offset + local


def _reindex(tasks: Sequence[TaskSpec]) -> list[TaskSpec]:
    out, offset = [], 0
    for i, t in enumerate(tasks):
        out.append(dataclasses.replace(t, id=i + 1, label_offset=offset))
        offset += t.n_classes
    return out


@dataclass(frozen=True)
class SuiteConfig:
    """Generator settings.

    ``rho`` is the fraction of each class (and background) token set that task
    ``t+1`` inherits from task ``t``; fresh tokens are never reused, so
    ``rho=0`` gives pairwise-disjoint vocabularies. With ``interference`` the
    inherited class tokens come from the mirrored class (``C-1-c``), i.e. the
    shared evidence has its labels flipped, and the background of task ``t+1``
    is drawn from the remaining class tokens of task ``t`` (all classes
    interleaved), so what was evidence before becomes label-independent noise.
    """

    n_tasks: int = 4
    classes_per_task: int = 2
    n_train: int = 32
    n_val: int = 16
    n_test: int = 64
    vocab_size: int = 1000
    class_tokens: int = 12
    background_tokens: int = 24
    rho: float = 0.0
    signal: float = 0.35
    min_len: int = 8
    max_len: int = 16
    interference: bool = False
    seed: int = 1
    order: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.n_tasks < 1 or self.classes_per_task < 2:
            raise ConfigurationError("need n_tasks >= 1 and classes_per_task >= 2")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigurationError(f"rho must lie in [0, 1], got {self.rho}")
        if not 0.0 < self.signal <= 1.0:
            raise ConfigurationError("signal must lie in (0, 1]")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigurationError("need 1 <= min_len <= max_len")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigurationError("every split needs at least one example")
        if self.class_tokens < 1 or self.background_tokens < 0:
            raise ConfigurationError("class_tokens must be >= 1 and background_tokens >= 0")

    def tokens_needed(self) -> int:
        shared_c = round(self.rho * self.class_tokens)
        shared_b = round(self.rho * self.background_tokens)
        C = self.classes_per_task
        pool = C * self.class_tokens + self.background_tokens
        if self.interference:
            shared_b = min(self.background_tokens, C * (self.class_tokens - shared_c))
        fresh = C * (self.class_tokens - shared_c) + self.background_tokens - shared_b
        return pool + (self.n_tasks - 1) * fresh


@dataclass
class _Pools:
    classes: list[list[str]]
    background: list[str]

    def all(self) -> set[str]:
        return set(self.background).union(*self.classes)


def _take(it, n) -> list[str]:
    return [next(it) for _ in range(n)]


def _inherit(rng, src: list[str], n_shared: int, fresh, size: int) -> list[str]:
    shared = [src[i] for i in sorted(rng.choice(len(src), n_shared, replace=False))] if n_shared else []
    return shared + _take(fresh, size - n_shared)


def token_pools(cfg: SuiteConfig) -> list[_Pools]:
    """Class and background token sets for every task, in generation order."""
    need = cfg.tokens_needed()
    if need > cfg.vocab_size:
        raise ConfigurationError(
            f"infeasible suite: {cfg.n_tasks} tasks x {cfg.classes_per_task} classes at rho={cfg.rho} "
            f"need {need} distinct tokens but vocab_size is {cfg.vocab_size}")
    rng = stream(cfg.seed, "suite", "pools")
    width = len(str(cfg.vocab_size - 1))
    inventory = [f"w{i:0{width}d}" for i in rng.permutation(cfg.vocab_size)]
    fresh = iter(inventory)
    C = cfg.classes_per_task
    pools: list[_Pools] = []
    for t in range(cfg.n_tasks):
        if t == 0:
            pools.append(_Pools([_take(fresh, cfg.class_tokens) for _ in range(C)],
                                _take(fresh, cfg.background_tokens)))
            continue
        prev = pools[-1]
        n_c = round(cfg.rho * cfg.class_tokens)
        n_b = round(cfg.rho * cfg.background_tokens)
        if cfg.interference:
            picks = [sorted(rng.choice(cfg.class_tokens, n_c, replace=False)) for _ in range(C)]
            classes = [[prev.classes[C - 1 - c][i] for i in picks[C - 1 - c]]
                       + _take(fresh, cfg.class_tokens - n_c) for c in range(C)]
            left = [[w for i, w in enumerate(prev.classes[c]) if i not in set(picks[c])] for c in range(C)]
            noise = [w for group in zip(*left) for w in group][: cfg.background_tokens]
            background = noise + _take(fresh, cfg.background_tokens - len(noise))
        else:
            classes = [_inherit(rng, prev.classes[c], n_c, fresh, cfg.class_tokens) for c in range(C)]
            background = _inherit(rng, prev.background, n_b, fresh, cfg.background_tokens)
        pools.append(_Pools(classes, background))
    return pools


def _sample_text(rng, pools: _Pools, c: int, cfg: SuiteConfig) -> str:
    n = int(rng.integers(cfg.min_len, cfg.max_len + 1))
    toks = []
    cls_set = pools.classes[c]
    for _ in range(n):
        if not pools.background or rng.random() < cfg.signal:
            toks.append(cls_set[int(rng.integers(len(cls_set)))])
        else:
            toks.append(pools.background[int(rng.integers(len(pools.background)))])
    return " ".join(toks)


def _balanced_labels(n: int, C: int) -> list[int]:
    return [i % C for i in range(n)]


def gen_suite(cfg: SuiteConfig) -> list[TaskSpec]:
    """Generate ``cfg.n_tasks`` tasks; deterministic in ``cfg``."""
    pools = token_pools(cfg)
    C = cfg.classes_per_task
    tasks = []
    for t, pool in enumerate(pools):
        rng = stream(cfg.seed, "suite", "examples", t)
        seen: set[str] = set()
        splits = {}
        for split, n in zip(SPLITS, (cfg.n_train, cfg.n_val, cfg.n_test)):
            exs = []
            for c in _balanced_labels(n, C):
                for _ in range(1000):
                    text = _sample_text(rng, pool, c, cfg)
                    if text not in seen:
                        break
                else:
                    raise ConfigurationError("could not draw distinct examples; increase lengths or pools")
                seen.add(text)
                exs.append(Example(text, c))
            splits[split] = exs
        tasks.append(TaskSpec(t + 1, f"task{t + 1}", [f"t{t + 1}_c{c}" for c in range(C)], **splits))
    tasks = _reindex(tasks)
    if cfg.order is not None:
        tasks = apply_order(tasks, cfg.order)
    return tasks


def pretrain_corpus(cfg: SuiteConfig, n: int) -> list[str]:
    """Unlabeled texts drawn uniformly over every task and class of the suite.

    Stands in for the generic text a pretrained encoder has seen. Drawn from
    its own random stream, so it does not perturb the task splits.
    """
    pools = token_pools(cfg)
    rng = stream(cfg.seed, "suite", "pretrain")
    out = []
    for _ in range(n):
        pool = pools[int(rng.integers(len(pools)))]
        out.append(_sample_text(rng, pool, int(rng.integers(cfg.classes_per_task)), cfg))
    return out


def apply_order(tasks: Sequence[TaskSpec], permutation: Sequence[int]) -> list[TaskSpec]:
    """Reorder so that position ``i`` holds ``tasks[permutation[i]]`` (0-based); ids become 1..N."""
    perm = [int(p) for p in permutation]
    if len(perm) != len(tasks):
        raise ConfigurationError(f"order has {len(perm)} entries for {len(tasks)} tasks")
    if sorted(perm) != list(range(len(tasks))):
        raise ConfigurationError(f"order {perm} is not a permutation of 0..{len(tasks) - 1}")
    return _reindex([tasks[p] for p in perm])


def inverse_permutation(permutation: Sequence[int]) -> list[int]:
    inv = [0] * len(permutation)
    for i, p in enumerate(permutation):
        inv[p] = i
    return inv


def token_overlap(a: TaskSpec, b: TaskSpec) -> float:
    """Jaccard overlap of the token sets used by two tasks' training texts."""
    ta = {w for ex in a.train for w in ex.text.split()}
    tb = {w for ex in b.train for w in ex.text.split()}
    return len(ta & tb) / len(ta | tb)


def all_texts(tasks: Iterable[TaskSpec], splits: Sequence[str] = SPLITS) -> list[str]:
    return [ex.text for t in tasks for s in splits for ex in t.split(s)]


# -- JSON lines ------------------------------------------------------------------

def _hash_split(text: str) -> str:
    bucket = int(hashlib.sha256(text.encode("utf-8")).hexdigest(), 16) % 10
    return "train" if bucket < 8 else ("val" if bucket == 8 else "test")


def load_jsonl(path: str | Path) -> list[TaskSpec]:
    """Read ``{"text", "label", "task"[, "split"]}`` records into tasks.

    Tasks and labels keep first-appearance order. Records without a split go
    to train/val/test 80/10/10 by a hash of the text.
    """
    groups: dict[str, dict] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"invalid JSON: {exc.msg}", lineno) from exc
            if not isinstance(rec, dict):
                raise DataFormatError("expected a JSON object", lineno)
            for key in ("text", "label", "task"):
                if key not in rec:
                    raise DataFormatError(f"missing key {key!r}", lineno)
                if not isinstance(rec[key], str):
                    raise DataFormatError(f"key {key!r} must be a string", lineno)
            if not rec["task"].strip():
                raise DataFormatError("empty task name", lineno)
            split = rec.get("split") or _hash_split(rec["text"])
            if split not in SPLITS:
                raise DataFormatError(f"unknown split {split!r}", lineno)
            g = groups.setdefault(rec["task"], {"labels": {}, **{s: [] for s in SPLITS}})
            label = g["labels"].setdefault(rec["label"], len(g["labels"]))
            g[split].append(Example(rec["text"], label))
    if not groups:
        raise DataFormatError(f"{path}: no tasks found")
    tasks = []
    for i, (name, g) in enumerate(groups.items()):
        if len(g["labels"]) < 2:
            raise DataFormatError(f"task {name!r} has fewer than two labels")
        tasks.append(TaskSpec(i + 1, name, list(g["labels"]), g["train"], g["val"], g["test"]))
    return _reindex(tasks)


def save_jsonl(path: str | Path, tasks: Sequence[TaskSpec]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in tasks:
            for split in SPLITS:
                for ex in t.split(split):
                    fh.write(json.dumps({"text": ex.text, "label": t.labels[ex.label],
                                         "task": t.name, "split": split}) + "\n")
