import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mocl.data import (SuiteConfig, apply_order, gen_suite, inverse_permutation, load_jsonl, save_jsonl,
                       token_overlap, token_pools)
from mocl.errors import ConfigurationError, DataFormatError

SMALL = dict(n_train=24, n_val=8, n_test=16, vocab_size=400)


def suite(**kw):
    return SuiteConfig(**{**SMALL, "n_tasks": 3, **kw})


def test_same_config_gives_identical_suites(tmp_path):
    cfg = suite(rho=0.5, seed=7)
    save_jsonl(tmp_path / "a.jsonl", gen_suite(cfg))
    save_jsonl(tmp_path / "b.jsonl", gen_suite(cfg))
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    save_jsonl(tmp_path / "c.jsonl", gen_suite(suite(rho=0.5, seed=8)))
    assert (tmp_path / "a.jsonl").read_bytes() != (tmp_path / "c.jsonl").read_bytes()


def test_rho_zero_pools_are_disjoint():
    pools = token_pools(suite(n_tasks=4, rho=0.0))
    for i in range(4):
        for j in range(i + 1, 4):
            assert not pools[i].all() & pools[j].all()
    tasks = gen_suite(suite(n_tasks=4, rho=0.0))
    assert token_overlap(tasks[0], tasks[1]) == 0.0


def test_overlap_grows_with_rho():
    overlaps = [token_overlap(*gen_suite(suite(rho=r))[:2]) for r in (0.0, 0.5, 1.0)]
    assert overlaps[0] < overlaps[1] < overlaps[2]


def test_full_sharing_is_a_subset_and_transfers():
    cfg = suite(n_tasks=2, rho=1.0)
    p1, p2 = token_pools(cfg)
    assert set().union(*p2.classes) <= p1.all()
    t1, t2 = gen_suite(cfg)
    # majority-token classifier: each token votes for the task-1 class it co-occurs with most
    votes = {}
    for ex in t1.train:
        for w in ex.text.split():
            votes.setdefault(w, Counter())[ex.label] += 1

    def predict(text):
        tally = Counter()
        for w in text.split():
            if w in votes:
                tally[votes[w].most_common(1)[0][0]] += 1
        return tally.most_common(1)[0][0] if tally else 0

    acc = np.mean([predict(ex.text) == ex.label for ex in t2.test])
    assert acc > 1 / t2.n_classes


def test_interference_flips_and_demotes_tokens():
    cfg = suite(n_tasks=2, rho=0.5, interference=True)
    p1, p2 = token_pools(cfg)
    n_c = round(cfg.rho * cfg.class_tokens)
    for c in range(2):
        inherited = set(p2.classes[c]) & p1.all()
        assert len(inherited) == n_c
        assert inherited <= set(p1.classes[1 - c])
    # former evidence that was not flipped becomes background noise for task 2
    leftover = (set(p1.classes[0]) | set(p1.classes[1])) - set(p2.classes[0]) - set(p2.classes[1])
    assert leftover <= set(p2.background)
    assert len(p2.background) == cfg.background_tokens


def test_labels_balanced_and_texts_distinct():
    for t in gen_suite(suite(rho=0.5)):
        counts = Counter(ex.label for ex in t.train)
        assert max(counts.values()) - min(counts.values()) <= 1
        texts = [ex.text for s in ("train", "val", "test") for ex in t.split(s)]
        assert len(set(texts)) == len(texts)


def test_global_labels_are_offset():
    tasks = gen_suite(suite(classes_per_task=3))
    assert [t.label_offset for t in tasks] == [0, 3, 6]
    assert tasks[2].global_label(1) == 7


def test_infeasible_suite_is_rejected():
    with pytest.raises(ConfigurationError, match="infeasible"):
        gen_suite(SuiteConfig(n_tasks=20, vocab_size=100, rho=0.0))
    with pytest.raises(ConfigurationError):
        SuiteConfig(rho=1.5)


def test_identity_order_is_unchanged():
    tasks = gen_suite(suite())
    assert apply_order(tasks, [0, 1, 2]) == tasks


@settings(max_examples=20, deadline=None)
@given(st.permutations(range(3)))
def test_order_then_inverse_restores(perm):
    tasks = gen_suite(suite())
    moved = apply_order(tasks, perm)
    assert [t.name for t in moved] == [tasks[p].name for p in perm]
    assert [t.id for t in moved] == [1, 2, 3]
    assert apply_order(moved, inverse_permutation(perm)) == tasks


def test_bad_orders():
    tasks = gen_suite(suite())
    with pytest.raises(ConfigurationError):
        apply_order(tasks, [0, 1])
    with pytest.raises(ConfigurationError):
        apply_order(tasks, [0, 0, 1])


def _write(path, records):
    path.write_text("".join(json.dumps(r) + "\n" if isinstance(r, dict) else r + "\n" for r in records))
    return path


def test_jsonl_single_task(tmp_path):
    p = _write(tmp_path / "d.jsonl", [{"text": "good film", "label": "pos", "task": "sst"},
                                     {"text": "bad film", "label": "neg", "task": "sst"}])
    (task,) = load_jsonl(p)
    assert task.name == "sst" and task.n_classes == 2 and task.labels == ["pos", "neg"]
    assert load_jsonl(p) == load_jsonl(p)


def test_jsonl_errors_name_the_line(tmp_path):
    p = _write(tmp_path / "d.jsonl", [{"text": "a", "label": "x", "task": "t"}, {"text": "b", "task": "t"}])
    with pytest.raises(DataFormatError, match="line 2") as exc:
        load_jsonl(p)
    assert exc.value.line == 2
    with pytest.raises(DataFormatError, match="line 1"):
        load_jsonl(_write(tmp_path / "e.jsonl", ["{not json"]))
    with pytest.raises(DataFormatError, match="fewer than two labels"):
        load_jsonl(_write(tmp_path / "f.jsonl", [{"text": "a", "label": "x", "task": "t"}]))


def test_jsonl_roundtrip_keeps_splits(tmp_path):
    tasks = gen_suite(suite())
    save_jsonl(tmp_path / "s.jsonl", tasks)
    back = load_jsonl(tmp_path / "s.jsonl")
    assert [t.name for t in back] == [t.name for t in tasks]
    for a, b in zip(tasks, back):
        for split in ("train", "val", "test"):
            assert [ex.text for ex in a.split(split)] == [ex.text for ex in b.split(split)]
            assert [a.labels[ex.label] for ex in a.split(split)] == [b.labels[ex.label] for ex in b.split(split)]
