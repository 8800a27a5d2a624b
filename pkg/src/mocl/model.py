"""Tokenizer, tiny pre-LN transformer encoder backbone, and classification heads."""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from mocl import tensor as T
from mocl.errors import ConfigurationError
from mocl.tensor import Tensor

CLS, PAD, UNK = 0, 1, 2
SPECIALS = ("[CLS]", "[PAD]", "[UNK]")


class Vocab:
    """Dense token-to-id map with fixed ids CLS=0, PAD=1, UNK=2."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.tokens: list[str] = list(SPECIALS)
        self.index: dict[str, int] = {t: i for i, t in enumerate(SPECIALS)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.index:
            self.index[token] = len(self.tokens)
            self.tokens.append(token)
        return self.index[token]

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self.index.get(token, UNK)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    @classmethod
    def from_mapping(cls, mapping: dict[str, int]) -> "Vocab":
        """Build from an explicit ``{token: id}`` map whose ids start at 3."""
        ordered = sorted(mapping.items(), key=lambda kv: kv[1])
        if [i for _, i in ordered] != list(range(len(SPECIALS), len(SPECIALS) + len(ordered))):
            raise ConfigurationError("vocab ids must be dense and start after the special tokens")
        return cls(t for t, _ in ordered)

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int = 2048) -> "Vocab":
        """Most frequent lowercase whitespace tokens, ties broken by first appearance."""
        counts: dict[str, int] = {}
        for text in texts:
            for tok in text.lower().split():
                counts[tok] = counts.get(tok, 0) + 1
        order = {t: i for i, t in enumerate(counts)}
        ranked = sorted(counts, key=lambda t: (-counts[t], order[t]))
        return cls(ranked[: max_size - len(SPECIALS)])

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[: len(SPECIALS)]) != SPECIALS:
            raise ConfigurationError(f"{path}: vocab file must start with {SPECIALS}")
        return cls(lines[len(SPECIALS):])


def tokenize(text: str, vocab: Vocab, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(ids, mask)``: CLS + lowercased whitespace tokens, truncated/padded to ``max_len``."""
    if max_len < 2:
        raise ConfigurationError("max_len must be at least 2")
    ids = [CLS] + [vocab[t] for t in text.lower().split()]
    ids = ids[:max_len]
    mask = np.zeros(max_len, dtype=bool)
    mask[: len(ids)] = True
    out = np.full(max_len, PAD, dtype=np.int64)
    out[: len(ids)] = ids
    return out, mask


def tokenize_batch(texts: Sequence[str], vocab: Vocab, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    pairs = [tokenize(t, vocab, max_len) for t in texts]
    if not pairs:
        return np.zeros((0, max_len), dtype=np.int64), np.zeros((0, max_len), dtype=bool)
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 2048
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 32
    emb_std: float = 0.1
    pos_std: float = 0.02
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigurationError("d_model must be divisible by n_heads")
        if self.max_len < 2:
            raise ConfigurationError("max_len must be at least 2")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def _hash_arrays(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype=np.float64)
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


class Backbone:
    """Parameters of the encoder; the forward pass lives in :func:`encode`."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray], frozen: bool = True):
        self.config = config
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.frozen = frozen

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "Backbone":
        D, F = config.d_model, config.d_ff
        s = config.init_std
        p = {
            "tok_emb": rng.normal(0.0, config.emb_std, (config.vocab_size, D)),
            "pos_emb": rng.normal(0.0, config.pos_std, (config.max_len, D)),
        }
        for i in range(config.n_layers):
            pre = f"l{i}."
            for ln in ("ln1", "ln2"):
                p[pre + ln + ".g"] = np.ones(D)
                p[pre + ln + ".b"] = np.zeros(D)
            for w in ("wq", "wk", "wv", "wo"):
                p[pre + w] = rng.normal(0.0, s, (D, D))
                p[pre + "b" + w[1]] = np.zeros(D)
            p[pre + "w1"] = rng.normal(0.0, s, (D, F))
            p[pre + "b1"] = np.zeros(F)
            p[pre + "w2"] = rng.normal(0.0, s, (F, D))
            p[pre + "b2"] = np.zeros(D)
        p["lnf.g"] = np.ones(D)
        p["lnf.b"] = np.zeros(D)
        return cls(config, p)

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def param_hash(self) -> str:
        return _hash_arrays(self.params)

    def copy(self) -> "Backbone":
        return Backbone(self.config, {k: v.copy() for k, v in self.params.items()}, self.frozen)

    def update(self, new_params: dict[str, np.ndarray]) -> None:
        if self.frozen:
            raise ConfigurationError("cannot update a frozen backbone")
        self.params.update(new_params)

    def save(self, path: str | Path) -> None:
        np.savez(path, __config__=np.array(str(asdict(self.config))), **self.params)

    @classmethod
    def load(cls, path: str | Path, config: ModelConfig) -> "Backbone":
        with np.load(path) as z:
            params = {k: z[k] for k in z.files if k != "__config__"}
        return cls(config, params)


@dataclass
class Head:
    """Affine classifier for one task's label space."""

    task_id: int
    weight: np.ndarray  # (D, C)
    bias: np.ndarray  # (C,)
    frozen: bool = False

    @classmethod
    def init(cls, task_id: int, d_model: int, n_classes: int, rng: np.random.Generator,
             std: float = 0.02) -> "Head":
        return cls(task_id, rng.normal(0.0, std, (d_model, n_classes)), np.zeros(n_classes))

    @property
    def n_classes(self) -> int:
        return self.bias.shape[0]

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {"weight": Tensor(self.weight, requires_grad), "bias": Tensor(self.bias, requires_grad)}

    def param_hash(self) -> str:
        return _hash_arrays({"weight": self.weight, "bias": self.bias})


def classify(pooled, head: Head, params: dict[str, Tensor] | None = None) -> Tensor:
    """Logits ``pooled @ W + b`` for one vector (D,) or a batch (B, D)."""
    params = params or head.tensors()
    pooled = T.as_tensor(pooled)
    if pooled.shape[-1] != head.weight.shape[0]:
        raise ConfigurationError(
            f"pooled dim {pooled.shape[-1]} does not match head dim {head.weight.shape[0]}")
    return pooled @ params["weight"] + params["bias"]


def _check_module(module, cfg: ModelConfig) -> None:
    if module.n_layers != cfg.n_layers or module.d_model != cfg.d_model:
        raise ConfigurationError(
            f"module dims (layers={module.n_layers}, d={module.d_model}) do not match backbone "
            f"(layers={cfg.n_layers}, d={cfg.d_model})")
    if module.kind == "prefix" and module.n_heads != cfg.n_heads:
        raise ConfigurationError(f"prefix heads {module.n_heads} != backbone heads {cfg.n_heads}")


def encode(backbone: Backbone, ids, mask=None, module=None,
           params: dict[str, Tensor] | None = None) -> tuple[Tensor, Tensor]:
    """Run the encoder, optionally with a composed PEFT module injected.

    ``ids`` is ``(T,)`` or ``(B, T)``. Returns final-layer states and the masked
    mean over non-PAD positions. Prefix modules prepend per-layer keys/values
    (attended to, never queried, position-free); LoRA modules replace the query
    and value projections ``W`` with ``W + dW`` for this call only.
    """
    cfg = backbone.config
    ids = np.asarray(ids, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None]
    mask = (ids != PAD) if mask is None else np.asarray(mask, dtype=bool).reshape(ids.shape)
    B, L = ids.shape
    if L > cfg.max_len:
        raise ConfigurationError(f"sequence length {L} exceeds max_len {cfg.max_len}")
    if module is not None:
        _check_module(module, cfg)
    p = params if params is not None else backbone.tensors()
    H, hd, D = cfg.n_heads, cfg.head_dim, cfg.d_model

    h = T.take_rows(p["tok_emb"], ids) + p["pos_emb"][:L]
    key_bias = np.where(mask, 0.0, T.MASK_VALUE)[:, None, None, :]  # (B,1,1,L)
    scale = 1.0 / math.sqrt(hd)

    for i in range(cfg.n_layers):
        pre = f"l{i}."
        a = T.layer_norm(h, p[pre + "ln1.g"], p[pre + "ln1.b"])
        wq, wv = p[pre + "wq"], p[pre + "wv"]
        if module is not None and module.kind == "lora":
            wq = wq + module.delta(i, 0)
            wv = wv + module.delta(i, 1)
        q = a @ wq + p[pre + "bq"]
        k = a @ p[pre + "wk"] + p[pre + "bk"]
        v = a @ wv + p[pre + "bv"]
        q = q.reshape(B, L, H, hd).transpose(0, 2, 1, 3)
        k = k.reshape(B, L, H, hd).transpose(0, 2, 1, 3)
        v = v.reshape(B, L, H, hd).transpose(0, 2, 1, 3)
        bias = key_bias
        if module is not None and module.kind == "prefix" and module.prefix_len > 0:
            pk, pv = module.prefix_kv(i)
            pk = T.broadcast_to(pk, (B, H) + pk.shape[-2:])
            pv = T.broadcast_to(pv, (B, H) + pv.shape[-2:])
            k = T.concat([pk, k], axis=2)
            v = T.concat([pv, v], axis=2)
            bias = np.concatenate([np.zeros((B, 1, 1, module.prefix_len)), key_bias], axis=-1)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale + bias
        att = T.softmax(scores, -1)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, D)
        h = h + (o @ p[pre + "wo"] + p[pre + "bo"])
        a2 = T.layer_norm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
        f = T.gelu(a2 @ p[pre + "w1"] + p[pre + "b1"]) @ p[pre + "w2"] + p[pre + "b2"]
        h = h + f

    h = T.layer_norm(h, p["lnf.g"], p["lnf.b"])
    m = mask.astype(np.float64)
    pooled = (h * m[:, :, None]).sum(axis=1) / m.sum(axis=1, keepdims=True)
    if single:
        return h.reshape(L, D), pooled.reshape(D)
    return h, pooled


def pooled_embeddings(backbone: Backbone, ids: np.ndarray, mask: np.ndarray,
                      batch_size: int = 64) -> np.ndarray:
    """Bare-backbone pooled vectors for many sequences, as a plain array."""
    out = []
    for s in range(0, len(ids), batch_size):
        bi, bm = trim(ids[s:s + batch_size], mask[s:s + batch_size])
        out.append(encode(backbone, bi, bm)[1].data)
    return np.concatenate(out) if out else np.zeros((0, backbone.config.d_model))


def trim(ids: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Drop trailing all-PAD columns of a batch; pooled outputs are unaffected."""
    n = int(mask.sum(axis=1).max()) if len(mask) else 1
    return ids[:, :n], mask[:, :n]


def warm_train(backbone: Backbone, ids: np.ndarray, mask: np.ndarray, epochs: int,
               rng: np.random.Generator, lr: float = 1e-3, batch_size: int = 16,
               mask_prob: float = 0.15) -> list[float]:
    """Masked-token pretraining with tied output embeddings; returns per-epoch mean loss.

    Masked positions are replaced by UNK. The backbone is unfrozen for the
    duration and frozen again afterwards.
    """
    from mocl.optim import AdamW

    backbone.frozen = False
    opt = AdamW(lr=lr, weight_decay=0.0)
    history = []
    n = len(ids)
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, batch_size):
            sel = order[s:s + batch_size]
            bi, bm = trim(ids[sel], mask[sel])
            maskable = bm.copy()
            maskable[:, 0] = False
            pick = maskable & (rng.random(bi.shape) < mask_prob)
            if not pick.any():
                continue
            inp = np.where(pick, UNK, bi)
            params = backbone.tensors(requires_grad=True)
            with T.GradTape() as tape:
                states, _ = encode(backbone, inp, bm, params=params)
                rows, cols = np.nonzero(pick)
                hs = states[rows, cols]
                logits = hs @ params["tok_emb"].transpose()
                loss = T.cross_entropy(logits, bi[rows, cols])
            names = list(params)
            grads = tape.gradient(loss, [params[k] for k in names])
            backbone.update(opt.step(dict(zip(names, (backbone.params[k] for k in names))),
                                     dict(zip(names, grads))))
            losses.append(loss.item())
        history.append(float(np.mean(losses)) if losses else float("nan"))
    backbone.frozen = True
    return history
