"""Comparison learners sharing the MoCL state layout and training loop.

* ``seq_ft_full``  -- one backbone fine-tuned across the whole sequence.
* ``seq_ft_peft``  -- one PEFT module fine-tuned across the whole sequence.
* ``per_task``     -- an independent module per task, no composition.
* ``progressive``  -- prefix modules concatenated, earlier ones frozen.
* ``prototype_cil`` -- per-task modules plus nearest-prototype task identification.

Every method keeps one head per task because label spaces are disjoint.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from mocl import tensor as T
from mocl.data import TaskSpec
from mocl.errors import ProtocolError, UnsupportedKindError
from mocl.learner import (Batchable, LearnerState, LossFn, TrainConfig, _as_batch, _check_next,
                          _commit, _namespaced, _split_params, fit, init_task_params, til_logits,
                          train_task)
from mocl.model import Head, classify, encode, trim
from mocl.peft import PeftModule, compose, concat_prefixes
from mocl.seeding import stream
from mocl.tensor import Tensor


def _module_loss(head: Head, backbone, make_composed) -> LossFn:
    def loss_fn(t: dict[str, Tensor], batch: Batchable) -> Tensor:
        composed = make_composed(t, len(batch))
        _, pooled = encode(backbone, batch.ids, batch.mask, composed)
        return T.cross_entropy(classify(pooled, head, _split_params("head.", t)), batch.labels)
    return loss_fn


def _head_arrays(head: Head) -> dict[str, np.ndarray]:
    return {"weight": head.weight, "bias": head.bias}


def _fit_module(state: LearnerState, task: TaskSpec, module: PeftModule, head: Head, make_composed,
                cfg: TrainConfig):
    train, val = state.prepare(task.train), state.prepare(task.val)
    params = _namespaced(module=module.arrays(), head=_head_arrays(head))
    best, log = fit(params, _module_loss(head, state.backbone, make_composed), train, val, cfg,
                    stream(state.seed, "shuffle", task.name))
    module.set_arrays({k[7:]: a for k, a in best.items() if k.startswith("module.")})
    head.weight, head.bias = best["head.weight"], best["head.bias"]
    return train, log


def train_per_task_step(state: LearnerState, task: TaskSpec, cfg: TrainConfig | None = None) -> LearnerState:
    cfg = cfg or state.train
    _check_next(state, task)
    module, head, _ = init_task_params(state, task)

    def make(t, B):
        return compose([module], Tensor(np.ones((B, 1))), [_split_params("module.", t)])

    train, log = _fit_module(state, task, module, head, make, cfg)
    _commit(state, task, module, head, None, log)
    if state.method == "prototype_cil":
        state.prototypes.append(train.x.mean(axis=0))
    return state


def train_per_task(state: LearnerState, tasks: Sequence[TaskSpec]) -> LearnerState:
    """Separate module and head per task; inference needs the task identity."""
    for task in tasks:
        train_per_task_step(state, task)
    return state


def train_progressive_step(state: LearnerState, task: TaskSpec, cfg: TrainConfig | None = None) -> LearnerState:
    cfg = cfg or state.train
    if state.peft.kind != "prefix":
        raise UnsupportedKindError("progressive concatenation is only defined for prefix modules")
    _check_next(state, task)
    module, head, _ = init_task_params(state, task)
    bank = list(state.modules)

    def make(t, B):
        return concat_prefixes(bank + [module], [None] * len(bank) + [_split_params("module.", t)])

    _, log = _fit_module(state, task, module, head, make, cfg)
    _commit(state, task, module, head, None, log)
    return state


def train_progressive(state: LearnerState, tasks: Sequence[TaskSpec]) -> LearnerState:
    """Task ``n`` trains ``P_n`` behind the frozen prefixes ``P_1..P_{n-1}``."""
    for task in tasks:
        train_progressive_step(state, task)
    return state


def train_sequential_step(state: LearnerState, task: TaskSpec, mode: str,
                          cfg: TrainConfig | None = None) -> LearnerState:
    cfg = cfg or state.train
    if task.id != state.n + 1:
        raise ProtocolError(f"expected task id {state.n + 1}, got {task.id} ({task.name})")
    module, head, _ = init_task_params(state, task)
    if mode == "peft":
        if state.shared is None:
            state.shared = module
        shared = state.shared

        def make(t, B):
            return compose([shared], Tensor(np.ones((B, 1))), [_split_params("module.", t)])

        _, log = _fit_module(state, task, shared, head, make, cfg)
    elif mode == "full":
        backbone = state.backbone
        backbone.frozen = False
        train, val = state.prepare(task.train), state.prepare(task.val)

        def loss_fn(t, batch):
            _, pooled = encode(backbone, batch.ids, batch.mask, params=_split_params("backbone.", t))
            return T.cross_entropy(classify(pooled, head, _split_params("head.", t)), batch.labels)

        params = _namespaced(backbone=backbone.params, head=_head_arrays(head))
        best, log = fit(params, loss_fn, train, val, cfg, stream(state.seed, "shuffle", task.name))
        backbone.update({k[9:]: a for k, a in best.items() if k.startswith("backbone.")})
        head.weight, head.bias = best["head.weight"], best["head.bias"]
    else:
        raise ValueError(f"mode must be 'full' or 'peft', got {mode!r}")
    _commit(state, task, None, head, None, log)
    return state


def train_sequential(state: LearnerState, tasks: Sequence[TaskSpec], mode: str) -> LearnerState:
    """Fine-tune one shared parameter set (whole backbone or one PEFT module) on every task."""
    for task in tasks:
        train_sequential_step(state, task, mode)
    return state


def train_next(state: LearnerState, task: TaskSpec) -> LearnerState:
    """Train the next task with whatever method ``state.method`` names."""
    m = state.method
    if m == "mocl":
        return train_task(state, task)
    if m in ("per_task", "prototype_cil"):
        return train_per_task_step(state, task)
    if m == "progressive":
        return train_progressive_step(state, task)
    if m == "seq_ft_peft":
        return train_sequential_step(state, task, "peft")
    if m == "seq_ft_full":
        return train_sequential_step(state, task, "full")
    raise ValueError(f"unknown method {m!r}")


def identify_task(prototypes: np.ndarray, x: np.ndarray) -> np.ndarray:
    """0-based index of the nearest prototype by cosine; ties go to the lowest index."""
    return T.cosine_matrix(np.atleast_2d(x), prototypes).data.argmax(-1)


def infer_prototype_cil(state: LearnerState, tokens, mask=None):
    """Identify the task by nearest training-set prototype, then run that task's module and head."""
    if state.method != "prototype_cil" or len(state.prototypes) != state.n:
        raise ProtocolError("state carries no per-task prototypes")
    ids, mask, single = _as_batch(tokens, mask)
    protos = np.stack(state.prototypes)
    tasks = np.empty(len(ids), dtype=np.int64)
    labels = np.empty(len(ids), dtype=np.int64)
    for s in range(0, len(ids), 64):
        bi, bm = trim(ids[s:s + 64], mask[s:s + 64])
        x = encode(state.backbone, bi, bm)[1].data
        tasks[s:s + len(bi)] = identify_task(protos, x) + 1
    for k in np.unique(tasks):
        sel = np.nonzero(tasks == k)[0]
        labels[sel] = til_logits(state, ids[sel], mask[sel], int(k)).argmax(-1)
    return (int(tasks[0]), int(labels[0])) if single else (tasks, labels)


def infer_cil_any(state: LearnerState, tokens, mask=None):
    """CIL prediction for the methods that support it."""
    from mocl.learner import infer_cil
    if state.method == "prototype_cil":
        return infer_prototype_cil(state, tokens, mask)
    return infer_cil(state, tokens, mask)


def supports_cil(method: str) -> bool:
    return method in ("mocl", "prototype_cil")
