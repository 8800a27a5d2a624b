import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mocl.errors import CompositionError, ConfigurationError, UnsupportedKindError
from mocl.model import Backbone, ModelConfig, encode
from mocl.peft import (PeftConfig, compose, concat_prefixes, init_module, inject,
                       load_bank, module_from_dict, module_to_dict, save_bank)
from mocl.seeding import stream
from mocl.tensor import GradTape, Tensor

CFG = ModelConfig(vocab_size=10, d_model=8, n_layers=2, n_heads=2, d_ff=16, max_len=6)
PREFIX = PeftConfig(kind="prefix", prefix_len=3)
LORA = PeftConfig(kind="lora", lora_rank=2)


def bank(kind, n, seed=0):
    cfg = PREFIX if kind == "prefix" else LORA
    mods = [init_module(kind, k + 1, CFG, cfg, stream(seed, "m", k)) for k in range(n)]
    if kind == "lora":  # nonzero B so effective updates differ
        for k, m in enumerate(mods):
            m.set_arrays({"B": stream(seed, "B", k).normal(0, 0.1, m.B.shape)})
    return mods


@pytest.mark.parametrize("kind", ["prefix", "lora"])
def test_one_hot_and_zero_weights(kind):
    mods = bank(kind, 3)
    for k in range(3):
        e = np.eye(3)[k]
        got = compose(mods, e).effective.data
        assert np.max(np.abs(got - mods[k].effective().data)) <= 1e-12
    assert np.all(compose(mods, np.zeros(3)).effective.data == 0.0)


def test_two_prefix_mean_is_elementwise():
    a, b = bank("prefix", 2)
    got = compose([a, b], [0.5, 0.5]).effective.data
    assert np.max(np.abs(got - (a.prefix + b.prefix) / 2)) <= 1e-12


def test_lora_composes_updates_not_factors():
    a, b = bank("lora", 2)
    got = compose([a, b], [0.3, 0.7]).effective.data
    expect = 0.3 * a.scale * a.B @ a.A + 0.7 * b.scale * b.B @ b.A
    assert np.max(np.abs(got - expect)) <= 1e-12
    factors = (0.3 * a.B + 0.7 * b.B) @ (0.3 * a.A + 0.7 * b.A)
    assert np.max(np.abs(got - factors)) > 1e-6


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 3, elements=st.floats(-2, 2)), arrays(np.float64, 3, elements=st.floats(-2, 2)),
       st.sampled_from(["prefix", "lora"]))
def test_composition_is_linear_in_alpha(alpha, beta, kind):
    mods = bank(kind, 3)
    lhs = compose(mods, alpha).effective.data + compose(mods, beta).effective.data
    assert np.max(np.abs(lhs - compose(mods, alpha + beta).effective.data)) <= 1e-12


def test_per_example_weights_match_single_weights():
    mods = bank("prefix", 2)
    alpha = np.array([[0.2, 0.9], [-0.4, 0.1]])
    batched = compose(mods, alpha).effective.data
    for b in range(2):
        assert np.max(np.abs(batched[b] - compose(mods, alpha[b]).effective.data)) <= 1e-12


def test_compose_does_not_mutate_contributors():
    mods = bank("lora", 2)
    hashes = [m.param_hash() for m in mods]
    compose(mods, [2.0, -1.0])
    assert [m.param_hash() for m in mods] == hashes


def test_compose_errors():
    with pytest.raises(CompositionError):
        compose([], [])
    with pytest.raises(CompositionError):
        compose([bank("prefix", 1)[0], bank("lora", 1)[0]], [1.0, 1.0])
    with pytest.raises(CompositionError):
        compose(bank("prefix", 2), [1.0])
    other = init_module("prefix", 2, CFG, PeftConfig(prefix_len=5), stream(0, "x"))
    with pytest.raises(CompositionError):
        compose([bank("prefix", 1)[0], other], [1.0, 1.0])


def test_init_contracts():
    m = init_module("lora", 1, CFG, LORA, stream(3, "m"))
    assert np.all(m.effective().data == 0.0)
    a = init_module("prefix", 1, CFG, PREFIX, stream(3, "m"))
    b = init_module("prefix", 1, CFG, PREFIX, stream(3, "m"))
    c = init_module("prefix", 1, CFG, PREFIX, stream(4, "m"))
    assert a.param_hash() == b.param_hash() != c.param_hash()
    assert a.prefix.shape == (2, 2, 2, 3, 4)
    assert not a.frozen
    with pytest.raises(UnsupportedKindError):
        init_module("adapter", 1, CFG, PREFIX, stream(0))
    with pytest.raises(ConfigurationError):
        PeftConfig(kind="adapter")


def test_frozen_module_is_immutable():
    m = bank("prefix", 1)[0]
    m.freeze()
    h = m.param_hash()
    with pytest.raises(ConfigurationError):
        m.set_arrays({"prefix": np.zeros_like(m.prefix)})
    with pytest.raises(ValueError):
        m.prefix[0, 0, 0, 0, 0] = 1.0
    assert m.param_hash() == h


def test_concat_prefix_length_grows():
    mods = bank("prefix", 3)
    for n in (1, 2, 3):
        cm = concat_prefixes(mods[:n])
        assert cm.prefix_len == 3 * n
        assert cm.prefix_kv(0)[0].shape == (2, 3 * n, 4)
    with pytest.raises(UnsupportedKindError):
        concat_prefixes(bank("lora", 2))


def test_inject_binds_module():
    bb = Backbone.init(CFG, stream(0, "bb"))
    cm = compose(bank("prefix", 2), [0.4, 0.6])
    ids = np.array([0, 4, 5])
    assert np.array_equal(inject(encode, cm)(bb, ids)[1].data, encode(bb, ids, module=cm)[1].data)


@pytest.mark.parametrize("kind", ["prefix", "lora"])
def test_contributor_gradient_is_alpha_times_composed_gradient(kind):
    bb = Backbone.init(CFG, stream(1, "bb"))
    mods = bank(kind, 2, seed=1)
    alpha = np.array([0.7, -0.35])
    ids = np.array([[0, 3, 4, 5], [0, 6, 7, 1]])
    target = stream(1, "target").normal(size=CFG.d_model)

    def loss_of(composed):
        return (encode(bb, ids, module=composed)[1] * target).sum()

    # gradient with respect to the composed effective parameters
    eff = Tensor(compose(mods, alpha).effective.data, requires_grad=True)
    holder = compose(mods, alpha)
    holder.effective = eff
    with GradTape() as tape:
        y = loss_of(holder)
    (g_eff,) = tape.gradient(y, [eff])

    # gradient with respect to each contributor's raw parameters, through compose
    for k in range(2):
        m = mods[k]
        names = ["prefix"] if kind == "prefix" else ["A", "B"]
        leaves = {n: Tensor(getattr(m, n), requires_grad=True) for n in names}
        with GradTape() as tape:
            y = loss_of(compose(mods, alpha, [leaves if j == k else None for j in range(2)]))
        grads = dict(zip(names, tape.gradient(y, list(leaves.values()))))
        if kind == "prefix":
            assert np.max(np.abs(grads["prefix"] - alpha[k] * g_eff)) <= 1e-12
        else:
            # d/dB of s B A against upstream G is s G A^T, and s B^T G for A
            gB = alpha[k] * m.scale * g_eff @ np.swapaxes(m.A, -1, -2)
            gA = alpha[k] * m.scale * np.swapaxes(m.B, -1, -2) @ g_eff
            assert np.max(np.abs(grads["B"] - gB)) <= 1e-12
            assert np.max(np.abs(grads["A"] - gA)) <= 1e-12

    # and the composed gradient itself agrees with central differences
    flat0 = compose(mods, alpha).effective.data
    idx = [tuple(stream(2, "idx", i).integers(0, s) for s in flat0.shape) for i in range(5)]
    for ix in idx:
        def f(val):
            e = flat0.copy()
            e[ix] = val
            h = compose(mods, alpha)
            h.effective = Tensor(e)
            return loss_of(h).item()
        fd = (f(flat0[ix] + 1e-6) - f(flat0[ix] - 1e-6)) / 2e-6
        assert abs(fd - g_eff[ix]) <= 1e-6 * max(1.0, abs(fd))


@pytest.mark.parametrize("kind", ["prefix", "lora"])
def test_bank_roundtrip(kind, tmp_path):
    mods = bank(kind, 2)
    mods[0].freeze()
    save_bank(tmp_path / "bank", mods)
    back = load_bank(tmp_path / "bank")
    assert [m.param_hash() for m in back] == [m.param_hash() for m in mods]
    assert [m.frozen for m in back] == [True, False]
    assert [m.task_id for m in back] == [1, 2]
    assert module_to_dict(module_from_dict(module_to_dict(mods[1]))) == module_to_dict(mods[1])
    assert sorted(p.name for p in (tmp_path / "bank").iterdir()) == ["bank.json", "module_001.json",
                                                                      "module_002.json"]
