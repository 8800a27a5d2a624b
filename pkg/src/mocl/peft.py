"""Task-specific PEFT modules (prefix and low-rank), composition, and injection."""
from __future__ import annotations

import functools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from mocl import tensor as T
from mocl.errors import CompositionError, ConfigurationError, UnsupportedKindError
from mocl.model import ModelConfig, _hash_arrays
from mocl.tensor import Tensor

KINDS = ("prefix", "lora")


@dataclass(frozen=True)
class PeftConfig:
    kind: str = "prefix"
    prefix_len: int = 16
    lora_rank: int = 4
    lora_scale: float = 1.0
    init_std: float = 0.02

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UnsupportedKindError(f"unsupported PEFT kind {self.kind!r}; expected one of {KINDS}")
        if self.prefix_len < 0:
            raise ConfigurationError("prefix_len must be >= 0")
        if self.lora_rank < 1:
            raise ConfigurationError("lora_rank must be >= 1")


class PeftModule:
    """Common behaviour: named arrays, freezing, hashing, effective parameters."""

    kind: str
    task_id: int
    frozen: bool

    def arrays(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def _set(self, name: str, value: np.ndarray) -> None:
        raise NotImplementedError

    def set_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if self.frozen:
            raise ConfigurationError(f"module for task {self.task_id} is frozen")
        for name, value in arrays.items():
            self._set(name, np.asarray(value, dtype=np.float64))

    def freeze(self) -> None:
        self.frozen = True
        for a in self.arrays().values():
            a.flags.writeable = False

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad) for k, v in self.arrays().items()}

    def param_hash(self) -> str:
        return _hash_arrays(self.arrays())

    def effective(self, tensors: dict[str, Tensor] | None = None) -> Tensor:
        raise NotImplementedError


class PrefixModule(PeftModule):
    kind = "prefix"

    def __init__(self, task_id: int, prefix: np.ndarray, frozen: bool = False):
        prefix = np.asarray(prefix, dtype=np.float64)
        if prefix.ndim != 5 or prefix.shape[1] != 2:
            raise ConfigurationError(f"prefix must have shape (L, 2, H, p, hd), got {prefix.shape}")
        self.task_id = task_id
        self.prefix = prefix
        self.frozen = False
        if frozen:
            self.freeze()

    n_layers = property(lambda self: self.prefix.shape[0])
    n_heads = property(lambda self: self.prefix.shape[2])
    prefix_len = property(lambda self: self.prefix.shape[3])
    d_model = property(lambda self: self.prefix.shape[2] * self.prefix.shape[4])

    def arrays(self):
        return {"prefix": self.prefix}

    def _set(self, name, value):
        if name != "prefix" or value.shape != self.prefix.shape:
            raise ConfigurationError(f"bad prefix update {name} {value.shape}")
        self.prefix = value

    def effective(self, tensors=None):
        return tensors["prefix"] if tensors else Tensor(self.prefix)

    @property
    def dims(self) -> tuple:
        return self.prefix.shape


class LoraModule(PeftModule):
    """Low-rank updates for the query and value projections of every layer.

    ``A`` has shape (L, 2, r, D) and ``B`` (L, 2, D, r); index 0 of the second
    axis is the query projection, 1 the value projection.
    """

    kind = "lora"

    def __init__(self, task_id: int, A: np.ndarray, B: np.ndarray, scale: float = 1.0,
                 frozen: bool = False):
        A = np.asarray(A, dtype=np.float64)
        B = np.asarray(B, dtype=np.float64)
        if A.ndim != 4 or B.ndim != 4 or A.shape[2] != B.shape[3] or A.shape[3] != B.shape[2]:
            raise ConfigurationError(f"incompatible LoRA factors {A.shape} / {B.shape}")
        if A.shape[2] < 1:
            raise ConfigurationError("LoRA rank must be >= 1")
        self.task_id = task_id
        self.A, self.B = A, B
        self.scale = float(scale)
        self.frozen = False
        if frozen:
            self.freeze()

    n_layers = property(lambda self: self.A.shape[0])
    rank = property(lambda self: self.A.shape[2])
    d_model = property(lambda self: self.A.shape[3])
    n_heads = None

    def arrays(self):
        return {"A": self.A, "B": self.B}

    def _set(self, name, value):
        cur = getattr(self, name)
        if value.shape != cur.shape:
            raise ConfigurationError(f"bad LoRA update {name} {value.shape}")
        setattr(self, name, value)

    def effective(self, tensors=None):
        """``scale * B @ A`` per layer and target, shape (L, 2, D, D)."""
        t = tensors or self.tensors()
        return (t["B"] @ t["A"]) * self.scale

    @property
    def dims(self) -> tuple:
        return (self.n_layers, 2, self.d_model, self.d_model)


def init_module(kind: str, task_id: int, model_cfg: ModelConfig, peft_cfg: PeftConfig,
                rng: np.random.Generator) -> PeftModule:
    """Fresh unfrozen module: gaussian prefixes, or gaussian ``A`` with zero ``B``."""
    L, H, hd, D = model_cfg.n_layers, model_cfg.n_heads, model_cfg.head_dim, model_cfg.d_model
    if kind == "prefix":
        return PrefixModule(task_id, rng.normal(0.0, peft_cfg.init_std, (L, 2, H, peft_cfg.prefix_len, hd)))
    if kind == "lora":
        r = peft_cfg.lora_rank
        return LoraModule(task_id, rng.normal(0.0, peft_cfg.init_std, (L, 2, r, D)),
                          np.zeros((L, 2, D, r)), peft_cfg.lora_scale)
    raise UnsupportedKindError(f"unsupported PEFT kind {kind!r}")


class ComposedModule:
    """Effective parameters ready for injection.

    ``effective`` has the contributors' effective shape, optionally with a
    leading batch axis when every example carries its own weights.
    """

    def __init__(self, kind: str, effective: Tensor, alpha, batched: bool, n_layers: int,
                 d_model: int, n_heads: int | None, prefix_len: int = 0):
        self.kind = kind
        self.effective = effective
        self.alpha = None if alpha is None else np.asarray(getattr(alpha, "data", alpha))
        self.batched = batched
        self.n_layers = n_layers
        self.d_model = d_model
        self.n_heads = n_heads
        self.prefix_len = prefix_len

    def _lead(self):
        return (slice(None),) if self.batched else ()

    def prefix_kv(self, layer: int) -> tuple[Tensor, Tensor]:
        lead = self._lead()
        return self.effective[lead + (layer, 0)], self.effective[lead + (layer, 1)]

    def delta(self, layer: int, target: int) -> Tensor:
        return self.effective[self._lead() + (layer, target)]


def _check_homogeneous(modules: Sequence[PeftModule]) -> None:
    if not modules:
        raise CompositionError("cannot compose an empty module list")
    kinds = {m.kind for m in modules}
    if len(kinds) != 1:
        raise CompositionError(f"cannot compose mixed kinds {sorted(kinds)}")


def compose(modules: Sequence[PeftModule], alpha,
            tensors: Sequence[dict[str, Tensor] | None] | None = None) -> ComposedModule:
    """Weighted sum of the contributors' effective parameters.

    ``alpha`` is ``(n,)`` for one weighting or ``(B, n)`` for per-example
    weights. ``tensors[k]``, when given, supplies differentiable parameters for
    contributor ``k`` in place of its stored arrays. LoRA contributors combine
    through their updates ``s_k B_k A_k``, never through the factors.
    """
    _check_homogeneous(modules)
    first = modules[0]
    for m in modules[1:]:
        if m.dims != first.dims:
            raise CompositionError(f"dimension mismatch: {m.dims} vs {first.dims}")
    alpha = T.as_tensor(alpha)
    if alpha.ndim not in (1, 2) or alpha.shape[-1] != len(modules):
        raise CompositionError(f"need {len(modules)} weights, got shape {alpha.shape}")
    tensors = tensors or [None] * len(modules)
    effs = [m.effective(t) for m, t in zip(modules, tensors)]
    shape = effs[0].shape
    flat = T.stack([e.reshape(-1) for e in effs])
    mixed = alpha @ flat
    batched = alpha.ndim == 2
    eff = mixed.reshape(((alpha.shape[0],) if batched else ()) + shape)
    return ComposedModule(first.kind, eff, alpha, batched, first.n_layers, first.d_model,
                          first.n_heads, first.prefix_len if first.kind == "prefix" else 0)


def concat_prefixes(modules: Sequence[PeftModule],
                    tensors: Sequence[dict[str, Tensor] | None] | None = None) -> ComposedModule:
    """Concatenate prefix modules along the prefix-length axis."""
    _check_homogeneous(modules)
    if modules[0].kind != "prefix":
        raise UnsupportedKindError("prefix concatenation requires prefix modules")
    tensors = tensors or [None] * len(modules)
    eff = T.concat([m.effective(t) for m, t in zip(modules, tensors)], axis=3)
    first = modules[0]
    return ComposedModule("prefix", eff, None, False, first.n_layers, first.d_model,
                          first.n_heads, eff.shape[3])


def inject(forward: Callable, module: ComposedModule) -> Callable:
    """Bind ``module`` into an encoder forward such as :func:`mocl.model.encode`."""
    return functools.partial(forward, module=module)


# -- serialization -------------------------------------------------------------

def module_to_dict(m: PeftModule) -> dict:
    d = {"kind": m.kind, "task_id": m.task_id, "frozen": m.frozen, "dims": list(m.dims),
         "arrays": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                    for k, v in m.arrays().items()}}
    if m.kind == "lora":
        d["scale"] = m.scale
    return d


def module_from_dict(d: dict) -> PeftModule:
    arrs = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d["arrays"].items()}
    if d["kind"] == "prefix":
        return PrefixModule(d["task_id"], arrs["prefix"], frozen=d["frozen"])
    if d["kind"] == "lora":
        return LoraModule(d["task_id"], arrs["A"], arrs["B"], d["scale"], frozen=d["frozen"])
    raise UnsupportedKindError(f"unsupported PEFT kind {d['kind']!r}")


def save_bank(directory: str | Path, modules: Sequence[PeftModule]) -> None:
    """One JSON file per module plus ``bank.json`` listing them in task order."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for pos, m in enumerate(modules):
        name = f"module_{pos + 1:03d}.json"
        (directory / name).write_text(json.dumps(module_to_dict(m)))
        files.append(name)
    (directory / "bank.json").write_text(json.dumps({"modules": files}, indent=1))


def load_bank(directory: str | Path) -> list[PeftModule]:
    directory = Path(directory)
    files = json.loads((directory / "bank.json").read_text())["modules"]
    return [module_from_dict(json.loads((directory / f).read_text())) for f in files]
