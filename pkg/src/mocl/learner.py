"""The modular, compositional continual learner.

Each task gets a fresh PEFT module ``P_n``, a feature vector ``v_n`` and a head.
While task ``n`` trains, every example is routed through the weighted sum of
modules ``1..n`` with weights ``cos(x, v_k)``, where ``x`` is the bare-backbone
pooled embedding. Once the task finishes its module, vector and head freeze.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from mocl import tensor as T
from mocl.data import Example, TaskSpec
from mocl.errors import (ConfigurationError, NonFiniteError, ProtocolError,
                         TrainingDivergenceError, UnknownTaskError)
from mocl.model import (Backbone, Head, ModelConfig, Vocab, classify, encode, pooled_embeddings,
                        tokenize_batch, trim)
from mocl.optim import AdamW
from mocl.peft import (PeftConfig, PeftModule, compose, concat_prefixes, init_module, load_bank,
                       module_from_dict, module_to_dict, save_bank)
from mocl.seeding import stream
from mocl.tensor import Tensor

METHODS = ("mocl", "seq_ft_full", "seq_ft_peft", "per_task", "progressive", "prototype_cil")
ALPHA_MODES = ("cosine", "softmax", "ones")
TIL_MODES = ("module", "composed")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-3
    batch_size: int = 8
    epochs: int = 40
    patience: int = 5
    weight_decay: float = 0.01
    cos_weight: float = 1.0
    alpha_mode: str = "cosine"
    alpha_temperature: float = 1.0
    stop_alpha_grad: bool = False
    til_mode: str = "module"
    feature_std: float = 0.02
    head_std: float = 0.02

    def __post_init__(self):
        if self.alpha_mode not in ALPHA_MODES:
            raise ConfigurationError(f"alpha_mode must be one of {ALPHA_MODES}")
        if self.til_mode not in TIL_MODES:
            raise ConfigurationError(f"til_mode must be one of {TIL_MODES}")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ConfigurationError("batch_size >= 1, epochs >= 0 and patience >= 1 required")
        if self.lr < 0:
            raise ConfigurationError("lr must be non-negative")


@dataclass
class Batchable:
    """Tokenized split plus cached bare-backbone pooled embeddings."""

    ids: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    x: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, sel) -> "Batchable":
        ids, mask = trim(self.ids[sel], self.mask[sel])
        return Batchable(ids, mask, self.labels[sel], self.x[sel])


@dataclass
class LearnerState:
    backbone: Backbone
    vocab: Vocab
    peft: PeftConfig
    train: TrainConfig
    seed: int
    method: str = "mocl"
    modules: list[PeftModule] = field(default_factory=list)
    features: list[np.ndarray] = field(default_factory=list)
    heads: list[Head] = field(default_factory=list)
    task_names: list[str] = field(default_factory=list)
    prototypes: list[np.ndarray] = field(default_factory=list)
    shared: PeftModule | None = None
    logs: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; expected one of {METHODS}")

    @property
    def n(self) -> int:
        return len(self.heads)

    @property
    def model(self) -> ModelConfig:
        return self.backbone.config

    def feature_matrix(self, n: int | None = None) -> np.ndarray:
        feats = self.features[: len(self.features) if n is None else n]
        return np.stack(feats) if feats else np.zeros((0, self.model.d_model))

    def check_task(self, k: int) -> None:
        if not 1 <= k <= self.n:
            raise UnknownTaskError(f"task id {k} not in 1..{self.n}")

    def prepare(self, examples: Sequence[Example]) -> Batchable:
        ids, mask = tokenize_batch([e.text for e in examples], self.vocab, self.model.max_len)
        labels = np.array([e.label for e in examples], dtype=np.int64)
        return Batchable(ids, mask, labels, pooled_embeddings(self.backbone, ids, mask))


# -- matching -----------------------------------------------------------------

def matching_scores(x, V) -> np.ndarray:
    """Cosine scores of pooled embedding(s) ``x`` against feature rows ``V[:n]``.

    ``x`` of shape (D,) gives (n,); a batch (B, D) gives (B, n).
    """
    V = np.asarray(getattr(V, "data", V), dtype=np.float64)
    if V.ndim != 2 or V.shape[0] < 1:
        raise ConfigurationError("need at least one feature vector")
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    single = x.ndim == 1
    out = T.cosine_matrix(x[None] if single else x, V).data
    return out[0] if single else out


def _alpha(cfg: TrainConfig, scores: Tensor) -> Tensor:
    if cfg.alpha_mode == "ones":
        return Tensor(np.ones(scores.shape))
    if cfg.stop_alpha_grad:
        scores = scores.detach()
    if cfg.alpha_mode == "softmax":
        return T.softmax(scores / cfg.alpha_temperature, -1)
    return scores


def _alpha_eval(cfg: TrainConfig, x: np.ndarray, V: np.ndarray) -> np.ndarray:
    return _alpha(cfg, Tensor(matching_scores(x, V))).data


# -- generic training loop ----------------------------------------------------------

LossFn = Callable[[dict[str, Tensor], Batchable], Tensor]


def fit(params: dict[str, np.ndarray], loss_fn: LossFn, train: Batchable, val: Batchable,
        cfg: TrainConfig, rng: np.random.Generator) -> tuple[dict[str, np.ndarray], dict]:
    """Minimise ``loss_fn`` with AdamW and validation early stopping.

    Returns the parameters of the best validation epoch (or the last epoch if
    there is no validation data) and a log dict.
    """
    opt = AdamW(cfg.lr, weight_decay=cfg.weight_decay)
    names = list(params)
    current = {k: np.array(v) for k, v in params.items()}
    best, best_val, bad = dict(current), np.inf, 0
    log = {"train_loss": [], "val_loss": [], "best_epoch": 0, "steps": 0}
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        losses = []
        for s in range(0, len(train), cfg.batch_size):
            batch = train.batch(order[s:s + cfg.batch_size])
            tensors = {k: Tensor(current[k], requires_grad=True) for k in names}
            try:
                with T.GradTape() as tape, np.errstate(over="ignore", invalid="ignore"):
                    loss = loss_fn(tensors, batch)
                with np.errstate(over="ignore", invalid="ignore"):
                    grads = tape.gradient(loss, [tensors[k] for k in names])
                    if not all(np.isfinite(g).all() for g in grads):
                        raise NonFiniteError("non-finite gradient")
                    current = opt.step(current, dict(zip(names, grads)))
                for k, v in current.items():
                    if not np.isfinite(v).all():
                        raise NonFiniteError(f"parameter {k} became non-finite")
            except NonFiniteError as exc:
                raise TrainingDivergenceError(str(exc), step) from exc
            losses.append(loss.item())
            step += 1
        log["train_loss"].append(float(np.mean(losses)))
        if len(val):
            vl = evaluate_loss(loss_fn, current, val, cfg.batch_size)
            log["val_loss"].append(vl)
            if vl < best_val:
                best, best_val, bad = dict(current), vl, 0
                log["best_epoch"] = epoch + 1
            else:
                bad += 1
                if bad >= cfg.patience:
                    break
        else:
            best = dict(current)
            log["best_epoch"] = epoch + 1
    log["steps"] = step
    return best, log


def evaluate_loss(loss_fn: LossFn, params: dict[str, np.ndarray], data: Batchable,
                  batch_size: int) -> float:
    tensors = {k: Tensor(v) for k, v in params.items()}
    total = 0.0
    for s in range(0, len(data), batch_size):
        batch = data.batch(np.arange(s, min(s + batch_size, len(data))))
        total += loss_fn(tensors, batch).item() * len(batch)
    return total / len(data)


# -- MoCL training -------------------------------------------------------------------

def new_state(backbone: Backbone, vocab: Vocab, peft: PeftConfig, train: TrainConfig, seed: int,
              method: str = "mocl") -> LearnerState:
    return LearnerState(backbone, vocab, peft, train, seed, method)


def _check_next(state: LearnerState, task: TaskSpec) -> None:
    if task.id != state.n + 1:
        raise ProtocolError(f"expected task id {state.n + 1}, got {task.id} ({task.name})")
    for m in state.modules:
        if not m.frozen:
            raise ProtocolError(f"module of task {m.task_id} is not frozen")


def _split_params(prefix: str, tensors: dict[str, Tensor]) -> dict[str, Tensor]:
    n = len(prefix)
    return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix)}


def mocl_loss(state: LearnerState, module: PeftModule, head: Head, cfg: TrainConfig) -> LossFn:
    """Cross-entropy through the composed module minus ``cos_weight`` x mean cos(x, v_n)."""
    bank = state.modules
    V_prev = state.feature_matrix()

    def loss_fn(t: dict[str, Tensor], batch: Batchable) -> Tensor:
        x = Tensor(batch.x)
        v = t["feature"]
        own = T.cosine_similarity(x, v)
        scores = own.reshape(len(batch), 1)
        if len(V_prev):
            scores = T.concat([T.cosine_matrix(x, V_prev), scores], axis=1)
        alpha = _alpha(cfg, scores)
        composed = compose(bank + [module], alpha,
                           [None] * len(bank) + [_split_params("module.", t)])
        _, pooled = encode(state.backbone, batch.ids, batch.mask, composed)
        logits = classify(pooled, head, _split_params("head.", t))
        loss = T.cross_entropy(logits, batch.labels)
        if cfg.cos_weight:
            loss = loss - cfg.cos_weight * T.mean(own)
        return loss

    return loss_fn


def _namespaced(**groups: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{g}.{k}" if g != "feature" else "feature": v
            for g, arrs in groups.items() for k, v in arrs.items()}


def init_task_params(state: LearnerState, task: TaskSpec) -> tuple[PeftModule, Head, np.ndarray]:
    """Module, head, and feature vector for ``task``, seeded by the task name."""
    seed, D = state.seed, state.model.d_model
    module = init_module(state.peft.kind, task.id, state.model, state.peft,
                         stream(seed, "module", task.name))
    head = Head.init(task.id, D, task.n_classes, stream(seed, "head", task.name), state.train.head_std)
    v = stream(seed, "feature", task.name).normal(0.0, state.train.feature_std, D)
    return module, head, v


def train_task(state: LearnerState, task: TaskSpec, cfg: TrainConfig | None = None) -> LearnerState:
    """Learn task ``n = state.n + 1`` and freeze its module, feature vector and head."""
    cfg = cfg or state.train
    _check_next(state, task)
    module, head, v = init_task_params(state, task)
    train, val = state.prepare(task.train), state.prepare(task.val)
    loss_fn = mocl_loss(state, module, head, cfg)
    params = _namespaced(module=module.arrays(), head={"weight": head.weight, "bias": head.bias},
                         feature={"v": v})
    best, log = fit(params, loss_fn, train, val, cfg, stream(state.seed, "shuffle", task.name))
    module.set_arrays({k[7:]: a for k, a in best.items() if k.startswith("module.")})
    head.weight, head.bias = best["head.weight"], best["head.bias"]
    v = np.array(best["feature"])
    _commit(state, task, module, head, v, log)
    return state


def _commit(state, task, module, head, v, log) -> None:
    if module is not None:
        module.freeze()
        state.modules.append(module)
    head.frozen = True
    head.weight.flags.writeable = False
    head.bias.flags.writeable = False
    state.heads.append(head)
    if v is not None:
        v.flags.writeable = False
        state.features.append(v)
    state.task_names.append(task.name)
    log = dict(log, task=task.name)
    state.logs.append(log)


# -- inference -----------------------------------------------------------------------

def _as_batch(tokens, mask=None):
    ids = np.asarray(tokens, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None]
        mask = None if mask is None else np.asarray(mask)[None]
    if mask is None:
        from mocl.model import PAD
        mask = ids != PAD
    return ids, np.asarray(mask, dtype=bool), single


def til_module(state: LearnerState, k: int, x: np.ndarray | None = None):
    """Composed module used for task ``k`` when its identity is known."""
    m = state.method
    if m == "seq_ft_full":
        return None
    if m == "seq_ft_peft":
        return compose([state.shared], np.ones(1))
    if m == "progressive":
        return concat_prefixes(state.modules[:k])
    if m == "mocl" and state.train.til_mode == "composed":
        return compose(state.modules[:k], _alpha_eval(state.train, x, state.feature_matrix(k)))
    return compose([state.modules[k - 1]], np.ones(1))


def til_logits(state: LearnerState, ids: np.ndarray, mask: np.ndarray, k: int) -> np.ndarray:
    state.check_task(k)
    out = []
    for s in range(0, len(ids), 64):
        bi, bm = trim(ids[s:s + 64], mask[s:s + 64])
        x = None
        if state.method == "mocl" and state.train.til_mode == "composed":
            x = encode(state.backbone, bi, bm)[1].data
        _, pooled = encode(state.backbone, bi, bm, til_module(state, k, x))
        out.append(classify(pooled, state.heads[k - 1]).data)
    return np.concatenate(out)


def infer_til(state: LearnerState, tokens, k: int, mask=None):
    """Predicted label(s) in task ``k``'s label set, given the task identity."""
    ids, mask, single = _as_batch(tokens, mask)
    pred = til_logits(state, ids, mask, k).argmax(-1)
    return int(pred[0]) if single else pred


def infer_cil(state: LearnerState, tokens, mask=None):
    """``(task ids, labels)`` without task identity: weights from matching scores.

    The composed module mixes every learned module; the head belongs to the
    best-matching task. Task ids are 1-based.
    """
    if state.method != "mocl":
        raise ProtocolError(f"method {state.method!r} has no matching-based CIL inference")
    if state.n < 1:
        raise ProtocolError("no trained tasks")
    ids, mask, single = _as_batch(tokens, mask)
    V = state.feature_matrix()
    tasks, labels = [], []
    for s in range(0, len(ids), 64):
        bi, bm = trim(ids[s:s + 64], mask[s:s + 64])
        x = encode(state.backbone, bi, bm)[1].data
        scores = matching_scores(x, V)
        alpha = _alpha_eval(state.train, x, V)
        _, pooled = encode(state.backbone, bi, bm, compose(state.modules, alpha))
        tid = scores.argmax(-1)
        for b in range(len(bi)):
            tasks.append(int(tid[b]) + 1)
            labels.append(int(classify(pooled.data[b], state.heads[tid[b]]).data.argmax()))
    tasks, labels = np.array(tasks), np.array(labels)
    return (int(tasks[0]), int(labels[0])) if single else (tasks, labels)


# -- checkpoints ---------------------------------------------------------------------

def save_state(state: LearnerState, directory: str | Path, meta: dict | None = None) -> None:
    """Module bank, feature matrix, heads, backbone, vocab and a manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_bank(d / "bank", state.modules)
    if state.shared is not None:
        (d / "shared_module.json").write_text(json.dumps(module_to_dict(state.shared)))
    np.savez(d / "features.npz", V=state.feature_matrix())
    np.savez(d / "heads.npz", **{f"w{i}": h.weight for i, h in enumerate(state.heads)},
             **{f"b{i}": h.bias for i, h in enumerate(state.heads)})
    np.savez(d / "prototypes.npz", P=np.stack(state.prototypes) if state.prototypes
             else np.zeros((0, state.model.d_model)))
    state.backbone.save(d / "backbone.npz")
    state.vocab.save(d / "vocab.txt")
    manifest = {
        "method": state.method, "seed": state.seed, "task_order": state.task_names,
        "n_tasks": state.n, "model": asdict(state.model), "peft": asdict(state.peft),
        "train": asdict(state.train), "backbone_frozen": state.backbone.frozen,
        "logs": state.logs, **(meta or {}),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_state(directory: str | Path) -> tuple[LearnerState, dict]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    model = ModelConfig(**manifest["model"])
    backbone = Backbone.load(d / "backbone.npz", model)
    backbone.frozen = manifest["backbone_frozen"]
    state = LearnerState(backbone, Vocab.load(d / "vocab.txt"), PeftConfig(**manifest["peft"]),
                         TrainConfig(**manifest["train"]), manifest["seed"], manifest["method"])
    state.modules = load_bank(d / "bank")
    if (d / "shared_module.json").exists():
        state.shared = module_from_dict(json.loads((d / "shared_module.json").read_text()))
    with np.load(d / "features.npz") as z:
        state.features = [row.copy() for row in z["V"]]
    with np.load(d / "heads.npz") as z:
        state.heads = [Head(i + 1, z[f"w{i}"], z[f"b{i}"], frozen=True) for i in range(manifest["n_tasks"])]
    with np.load(d / "prototypes.npz") as z:
        state.prototypes = [row.copy() for row in z["P"]]
    state.task_names = list(manifest["task_order"])
    state.logs = manifest.get("logs", [])
    return state, manifest
