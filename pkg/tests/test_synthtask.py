import json
import math
from collections import Counter

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from dcmha.model import TokenDataset, TrainConfig, Transformer, preset, train
from dcmha.synthtask import (
    CONTROL,
    InfeasibleSpec,
    TaskSpec,
    as_dataset,
    evaluate,
    generate,
    make_example,
    write,
)
from dcmha.tensor import Rng

SMALL = dict(n_keys=16, n_values=12, n_classes=4)


def test_vocab_partitions_are_disjoint():
    s = TaskSpec()
    parts = [set(range(s.n_control)), set(s.key_ids), set(s.value_ids), set(s.class_ids)]
    assert sum(len(p) for p in parts) == len(set().union(*parts)) == s.vocab_size
    assert s.n_control >= len(CONTROL)


def test_copy_same_key_single_pair():
    s = TaskSpec(patterns=("same_key",), transforms=("copy",), n_pairs=1, **SMALL)
    toks, ans, src = make_example(s, "same_key", "copy", Rng(0))
    k, v = toks[0], toks[1]
    assert toks == [k, v, s.tok("Q_SAME"), s.tok("T_COPY"), s.tok("ARROW"), k, v]
    assert ans == v == src


def test_class_lookup_uses_table():
    s = TaskSpec(patterns=("same_key",), transforms=("class_lookup",), n_classes=8, n_values=32)
    assert len(s.class_table) == 32 and set(s.class_table) == set(range(8))
    rng = Rng(1)
    for _ in range(50):
        toks, ans, src = make_example(s, "same_key", "class_lookup", rng)
        assert ans == s.class_ids.start + s.class_table[src - s.value_ids.start]
        # the queried key's pair holds the source value
        q = toks[-2]
        assert toks[toks.index(q) + 1] == src


@pytest.mark.parametrize("pattern", ["same_key", "other_key", "different_in_set"])
@pytest.mark.parametrize("transform", ["copy", "successor", "class_lookup"])
def test_answer_is_determined_by_rule(pattern, transform):
    s = TaskSpec(**SMALL)
    rng = Rng(2)
    for _ in range(30):
        toks, ans, _ = make_example(s, pattern, transform, rng)
        keys, vals = toks[0 : 2 * s.n_pairs : 2], toks[1 : 2 * s.n_pairs : 2]
        q = toks[-2]
        if pattern == "same_key":
            src = vals[keys.index(q)]
        elif pattern == "other_key":
            src = vals[[k != q for k in keys].index(True)]
        else:
            c = Counter(vals)
            src = next(v for v in vals if c[v] == 1)
        assert ans == s.transform(transform, src)
        assert toks[-1] == ans and toks[-3] == s.tok("ARROW")


@given(st.integers(0, 2**31))
def test_no_answer_leak(seed):
    s = TaskSpec(transforms=("successor", "class_lookup"), **SMALL)
    tokens, info = generate(s, 5, k_shot=1, seed=seed)
    L = s.example_len
    for row in tokens:
        query = list(row[-L:-1])
        assert row[-1] not in query


def test_sequences_are_left_padded_to_fixed_length():
    s = TaskSpec(**SMALL)
    tokens, info = generate(s, 4, k_shot=(1, 2, 3), seed=0)
    assert tokens.shape[1] == s.seq_len(3) == info["seq_len"]
    for row, k in zip(tokens, info["k_shot"]):
        n_pad = s.seq_len(3) - s.seq_len(k)
        assert (row[:n_pad] == s.tok("PAD")).all() and row[n_pad] == s.tok("BOS")
        assert (row == s.tok("SEP")).sum() == k


def test_balance_over_many_examples():
    s = TaskSpec(patterns=("same_key",), transforms=("copy",), n_keys=16, n_values=16, n_classes=4)
    tokens, _ = generate(s, 10_000, k_shot=0, seed=0)
    for ids in (s.key_ids, s.value_ids):
        counts = np.array([(tokens == t).sum() for t in ids])
        mean = counts.mean()
        assert counts.min() > mean / 2 and counts.max() < mean * 2


def test_generation_is_byte_identical(tmp_path):
    s = TaskSpec(**SMALL)
    write(tmp_path / "a.bin", s, 10, seed=4)
    write(tmp_path / "b.bin", s, 10, seed=4)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    side = json.loads((tmp_path / "a.json").read_text())
    assert side["class_table"] == s.class_table and len(side["task_ids"]) == 90


@pytest.mark.parametrize(
    "kw",
    [
        dict(patterns=("different_in_set",), n_pairs=2),
        dict(patterns=("other_key",), n_pairs=1),
        dict(patterns=("same_key",), n_keys=2, n_pairs=3),
        dict(n_values=3),
        dict(patterns=("nearest",)),
        dict(transforms=("reverse",)),
        dict(n_control=4),
    ],
)
def test_infeasible_specs(kw):
    with pytest.raises(InfeasibleSpec):
        TaskSpec(**kw)


def test_negative_k_shot():
    with pytest.raises(InfeasibleSpec):
        generate(TaskSpec(**SMALL), 1, k_shot=-1)


def test_too_few_keys_for_k_shot():
    with pytest.raises(InfeasibleSpec):
        generate(TaskSpec(patterns=("same_key",), **SMALL), 1, k_shot=5)  # 6 examples x 3 keys > 16


@given(st.integers(0, 2**31))
def test_keys_never_repeat_across_examples(seed):
    s = TaskSpec(**SMALL)
    tokens, info = generate(s, 2, k_shot=3, seed=seed)
    sep, arrow = s.tok("SEP"), s.tok("ARROW")
    for row in tokens:
        seen = set()
        for ex in " ".join(map(str, row)).split(f" {sep} "):
            keys = {int(t) for t in ex.split() if int(t) in s.key_ids}
            assert not keys & seen
            seen |= keys
        assert (row == arrow).sum() == 4


def test_untrained_model_is_at_chance():
    V = 64
    cfg = preset("dcformer", n_layers=2, d_model=32, n_heads=4, d_head=8, vocab_size=V, max_seq_len=16)
    m = Transformer(cfg, seed=0)
    rng = Rng(0)
    n = 4000
    ds = TokenDataset(rng.integers(0, V, (n, 8)), V)
    r = evaluate(m, ds)
    sigma = math.sqrt((1 / V) * (1 - 1 / V) / n)
    assert abs(r["accuracy"] - 1 / V) < 3 * sigma
    assert abs(r["perplexity"] - V) < 0.05 * V


def test_memorised_example_is_answered():
    s = TaskSpec(patterns=("same_key",), transforms=("class_lookup",), **SMALL)
    tokens, info = generate(s, 1, k_shot=1, seed=0)
    ds = as_dataset(tokens, info)
    cfg = preset("dcformer", n_layers=2, d_model=32, n_heads=4, d_head=8, vocab_size=s.vocab_size, max_seq_len=32)
    m, _ = train(cfg, TrainConfig(steps=40, batch_size=1, lr=1e-2, loss_on="answers"), ds)
    r = evaluate(m, ds)
    assert r["accuracy"] == 1.0 and r["per_k"] == {1: 1.0}
    assert r["per_task"] == {"same_key/class_lookup": 1.0}


def test_evaluate_errors():
    m = Transformer(preset("tfm", n_layers=2, d_model=16, n_heads=2, d_head=8, vocab_size=10), seed=0)
    with pytest.raises(ValueError):
        evaluate(m, TokenDataset(np.zeros((2, 4), dtype=np.int64), 20))
    ds = TokenDataset(np.zeros((2, 4), dtype=np.int64), 10, meta={"k_shot": [1, 1]})
    with pytest.raises(ValueError):
        evaluate(m, ds, k_shot=2)


def test_answer_mask_selects_exactly_the_answers():
    from dcmha.model import loss_mask

    s = TaskSpec(patterns=("same_key", "other_key"), transforms=("class_lookup",), **SMALL)
    tokens, info = generate(s, 20, k_shot=(0, 2, 3), seed=5)
    ds = as_dataset(tokens, info)
    batch = torch.from_numpy(tokens)
    mask = loss_mask(batch, ds, "answers")
    assert mask.sum(1).tolist() == [k + 1 for k in info["k_shot"]]
    assert all(int(t) in s.class_ids for t in batch[:, 1:][mask])
