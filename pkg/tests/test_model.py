import json
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from dcmha import model as M
from dcmha.model import (
    ABLATIONS,
    ModelConfig,
    TokenDataset,
    TrainConfig,
    Transformer,
    TrainingDiverged,
    generate,
    load_checkpoint,
    loss_mask,
    lr_at,
    make_optimizer,
    n_params,
    param_matched,
    preset,
    read_dataset,
    repeating_dataset,
    save_checkpoint,
    train,
    write_dataset,
)
from dcmha.tensor import Rng

TINY = dict(n_layers=2, d_model=16, n_heads=4, d_head=4, vocab_size=24, max_seq_len=32, window=4)


def tiny(name="dcformer", **kw):
    return preset(name, **{**TINY, **kw})


def test_desk_defaults():
    cfg = preset("dcformer")
    assert (cfg.n_layers, cfg.d_model, cfg.n_heads, cfg.d_head, cfg.attn.rank) == (4, 128, 8, 16, 2)
    assert cfg.hidden == 344
    assert cfg.layer_attn(0).window == 64 and cfg.layer_attn(1).window is None
    assert all(cfg.layer_attn(i).causal for i in range(4))


@pytest.mark.parametrize(
    "kw",
    [dict(d_head=5), dict(local_global_pattern="LX"), dict(local_global_pattern="LGL"), dict(mlp="relu"), dict(positional="alibi")],
)
def test_model_config_validation(kw):
    with pytest.raises(ValueError):
        tiny(**kw)


def test_config_round_trip():
    cfg = tiny("all", groups=2, plus_plus=False)
    assert ModelConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_ablation_presets():
    assert tiny("tfm").attn.is_mha
    assert tiny("pre-comp").attn.compose_sites == ("pre",)
    assert tiny("query-wise").attn.branches == ("q_lowrank", "q_gate")
    assert tiny("static-proj").attn.base_mode == "static"
    assert len(ABLATIONS) == 10


def test_param_matched_baseline():
    d = preset("dcformer")
    t = param_matched(preset("tfm"), d)
    assert t.attn.is_mha and t.mlp_hidden % 8 == 0
    # one MLP unit (3 * d_model * n_layers params per 1 of width) of slack
    assert abs(n_params(t) - n_params(d)) <= 8 * 3 * 128 * 4


@pytest.mark.parametrize("name", ["tfm", "dcformer", "all"])
@pytest.mark.parametrize("plus_plus", [True, False])
def test_forward_shapes_and_causality(name, plus_plus):
    m = Transformer(tiny(name, plus_plus=plus_plus, dtype="float64"), seed=0)
    ids = torch.from_numpy(Rng(0).integers(0, 24, (2, 10)))
    logits = m(ids)
    assert logits.shape == (2, 10, 24) and logits.dtype == torch.float64
    ids2 = ids.clone()
    ids2[:, 6:] = (ids2[:, 6:] + 1) % 24
    assert (m(ids2)[:, :6] - logits[:, :6]).abs().max() <= 1e-12


def test_forward_rejects_bad_ids():
    m = Transformer(tiny(), seed=0)
    with pytest.raises(ValueError):
        m(torch.tensor([[0, 24]]))
    with pytest.raises(ValueError):
        m(torch.zeros(1, 33, dtype=torch.long))


def test_init_is_seeded():
    a = Transformer(tiny(), seed=3).named_tensors()
    b = Transformer(tiny(), seed=3).named_tensors()
    c = Transformer(tiny(), seed=4).named_tensors()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not torch.equal(a["embed"], c["embed"])


def test_variants_run():
    for kw in (dict(tie_embeddings=True), dict(parallel_block=True), dict(groups=2), dict(use_qknorm=True)):
        m = Transformer(tiny(**kw), seed=0)
        assert torch.isfinite(m(torch.zeros(1, 5, dtype=torch.long))).all()


# ---------------------------------------------------------------------------
# decoding


@pytest.mark.parametrize("name", ["dcformer", "all"])
def test_model_decode_matches_forward_float64(name):
    cfg = tiny(name, dtype="float64", max_seq_len=40)
    m = Transformer(cfg, seed=1)
    ids = torch.from_numpy(Rng(2).integers(0, 24, (1, 40)))
    full = m(ids)
    caches = m.new_cache()
    outs = []
    for t in range(40):
        o, caches = m.decode(ids[:, t : t + 1], caches)
        outs.append(o)
    assert (torch.cat(outs, 1) - full).abs().max() < 1e-10


def test_generate_cached_equals_uncached():
    m = Transformer(tiny(dtype="float64"), seed=0)
    a = generate(m, [1, 2, 3], 12, use_cache=True)
    b = generate(m, [1, 2, 3], 12, use_cache=False)
    assert a == b and len(a) == 15
    with pytest.raises(ValueError):
        generate(m, [1] * 30, 5)


# ---------------------------------------------------------------------------
# persistence


def test_checkpoint_round_trip_bitwise(tmp_path):
    cfg = tiny("all", groups=2)
    m = Transformer(cfg, seed=5)
    save_checkpoint(tmp_path, m, TrainConfig(steps=3), Rng(1), step=3)
    m2, meta = load_checkpoint(tmp_path)
    assert meta["step"] == 3 and meta["train"]["steps"] == 3
    assert m2.cfg == cfg
    for (k, a), (_, b) in zip(m.state_dict().items(), m2.state_dict().items()):
        assert torch.equal(a, b), k
    names = json.loads((tmp_path / "model.json").read_text())["tensors"]
    assert "layer0.attn.pre.W_q1.group1" in {e["name"] for e in names}


def test_dataset_round_trip(tmp_path):
    toks = Rng(0).integers(0, 300, (5, 7))
    write_dataset(tmp_path / "d.bin", toks, 300)
    ds = read_dataset(tmp_path / "d.bin")
    assert ds.vocab_size == 300 and np.array_equal(ds.tokens, toks)
    raw = (tmp_path / "d.bin").read_bytes()
    assert raw[:4] == b"DCMT" and len(raw) == 16 + 5 * 7 * 2


def test_dataset_errors(tmp_path):
    with pytest.raises(ValueError):
        write_dataset(tmp_path / "x.bin", np.array([[5]]), 5)
    (tmp_path / "y.bin").write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ValueError):
        read_dataset(tmp_path / "y.bin")


# ---------------------------------------------------------------------------
# training


def test_lr_schedule():
    cfg = TrainConfig(lr=1.0, steps=1000, warmup_frac=0.01)
    assert lr_at(0, cfg) == pytest.approx(0.1)
    assert lr_at(9, cfg) == pytest.approx(1.0)
    assert lr_at(999, cfg) == pytest.approx(0.1, abs=1e-4)
    vals = [lr_at(s, cfg) for s in range(10, 1000)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_loss_mask_answers_only():
    ds = TokenDataset(np.zeros((1, 6), dtype=np.int64), 10, answer_after=3, pad_id=0)
    batch = torch.tensor([[0, 5, 3, 7, 3, 8]])
    assert loss_mask(batch, ds, "answers").tolist() == [[False, False, True, False, True]]
    assert loss_mask(batch, ds, "all").tolist() == [[True, True, True, True, True]]
    with pytest.raises(ValueError):
        loss_mask(batch, TokenDataset(ds.tokens, 10), "answers")
    ds.answer_gap = 2
    assert loss_mask(batch, ds, "answers").tolist() == [[False, False, False, True, False]]


def test_no_weight_decay_on_vectors():
    m = Transformer(tiny(), seed=0)
    opt = make_optimizer(m, TrainConfig(weight_decay=0.1))
    dec, nodec = opt.param_groups
    assert dec["weight_decay"] == 0.1 and nodec["weight_decay"] == 0.0
    assert all(p.dim() == 1 for p in nodec["params"]) and all(p.dim() >= 2 for p in dec["params"])
    assert opt.defaults["betas"] == (0.9, 0.95)


def test_training_memorises_pattern_and_is_deterministic(tmp_path):
    ds = repeating_dataset([1, 2, 3, 4, 5], 12, 8, 24)
    tc = TrainConfig(steps=60, batch_size=4, lr=1e-2, seed=0)
    _, m1 = train(tiny(), tc, ds, out_dir=tmp_path / "a", metrics_path=tmp_path / "a.jsonl")
    _, m2 = train(tiny(), tc, ds)
    assert [r["loss"] for r in m1] == [r["loss"] for r in m2]
    assert m1[-1]["loss"] < 0.1 * m1[0]["loss"]
    rec = json.loads((tmp_path / "a.jsonl").read_text().splitlines()[0])
    assert set(rec) == {"step", "loss", "lr", "grad_norm", "tokens_seen", "wall_ms"}
    a = (tmp_path / "a" / "model.bin").read_bytes()
    train(tiny(), tc, ds, out_dir=tmp_path / "b")
    assert a == (tmp_path / "b" / "model.bin").read_bytes()


def test_divergence_is_reported_and_checkpointed(tmp_path, monkeypatch):
    monkeypatch.setattr(M, "lm_loss", lambda *a: torch.tensor(float("nan"), requires_grad=True))
    ds = repeating_dataset([1, 2], 6, 4, 24)
    with pytest.raises(TrainingDiverged):
        train(tiny(), TrainConfig(steps=3, batch_size=2), ds, out_dir=tmp_path)
    assert (tmp_path / "model.json").exists()


def test_train_rejects_vocab_mismatch():
    ds = repeating_dataset([1, 2], 6, 4, 100)
    with pytest.raises(ValueError):
        train(tiny(), TrainConfig(steps=1, batch_size=2), ds)
