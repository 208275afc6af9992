import pytest
import torch
from hypothesis import given, strategies as st

from dcmha.attention import AttentionConfig, ComposeParams, compose
from dcmha.equivalence import (
    check_theorem1,
    check_theorem2,
    compose_scores_static,
    dense_trials,
    dense_transform,
    expand_ov,
    fit_static_map,
    prototype_map,
    random_compose_params,
    static_fit_residuals,
    theorem_trials,
)
from dcmha.tensor import Rng

PROTOTYPES = ["mutual", "one_to_many", "many_to_one", "gating"]


@given(st.integers(0, 2**31))
def test_theorem1_random(seed):
    assert check_theorem1(rng=Rng(seed)) < 1e-10


@given(st.integers(0, 2**31))
def test_theorem2_random(seed):
    assert check_theorem2(rng=Rng(seed)) < 1e-10


@pytest.mark.parametrize("kind", PROTOTYPES)
def test_theorems_on_prototype_maps(kind):
    C = prototype_map(kind)
    assert check_theorem1(H=8, rng=Rng(0), C=C) < 1e-10
    assert check_theorem2(H=8, rng=Rng(0), C=C) < 1e-10


def test_theorem_trials_stream():
    recs = list(theorem_trials(1, 5, seed=3))
    assert [r["trial"] for r in recs] == list(range(5))
    assert all(r["theorem"] == 1 and r["deviation"] < 1e-10 for r in recs)
    assert recs == list(theorem_trials(1, 5, seed=3))


def test_identity_map_changes_nothing():
    a = Rng(0).normal((4, 3, 3))
    assert torch.equal(compose_scores_static(a, torch.eye(4, dtype=torch.float64)), a)


def test_prototypes_do_what_their_names_say():
    a = Rng(1).normal((8, 2, 2))
    out = compose_scores_static(a, prototype_map("many_to_one"))
    assert torch.allclose(out[0], a[2] + a[6])
    out = compose_scores_static(a, prototype_map("gating"))
    assert torch.equal(out[3], torch.zeros_like(out[3]))
    assert torch.allclose(out[2], 2 * a[2])
    with pytest.raises(ValueError):
        prototype_map("swap")


def test_expand_ov_shapes():
    WV, WO, C = torch.zeros(3, 5, 2), torch.zeros(6, 5), torch.eye(3)
    WV_t, WO_t = expand_ov(WV, WO, C)
    assert WV_t.shape == (3, 5, 6) and WO_t.shape == (18, 5)


def test_static_base_uses_row_vector_convention():
    # W_b acts on row vectors: W_b = C.T reproduces A'_h = sum_j C[h, j] A_j
    cfg = AttentionConfig(8, 8, base_mode="static", branches=())
    C = prototype_map("one_to_many")
    theta = ComposeParams(W_b=C.T[None].contiguous())
    a = Rng(2).normal((1, 8, 3, 3))
    X = torch.zeros(1, 3, 8, dtype=torch.float64)
    assert torch.allclose(compose(a, X, X, theta, cfg)[0], compose_scores_static(a[0], C), atol=1e-14)


@pytest.mark.parametrize("base_mode", ["skip", "static"])
def test_dense_oracle_trials(base_mode):
    devs = [r["deviation"] for r in dense_trials(5, seed=1, base_mode=base_mode)]
    assert max(devs) < 1e-10


def test_dense_oracle_grouped():
    assert max(r["deviation"] for r in dense_trials(3, seed=2, groups=2)) < 1e-10


def test_dense_transform_is_row_plus_column():
    # W[i, j] - W[i, j'] must not depend on i: the query part cancels
    cfg = AttentionConfig(8, 4)
    rng = Rng(5)
    theta = random_compose_params(cfg, rng)
    W = dense_transform(rng.normal((1, 3, 8)), rng.normal((1, 4, 8)), theta, cfg)[0]
    d = W[:, 0] - W[:, 1]
    assert torch.allclose(d[0], d[1], atol=1e-14) and torch.allclose(d[0], d[2], atol=1e-14)


def test_dense_transform_refuses_huge():
    cfg = AttentionConfig(64, 64)
    theta = random_compose_params(AttentionConfig(64, 64, branches=()), Rng(0))
    with pytest.raises(ValueError):
        dense_transform(torch.zeros(1, 100, 64), torch.zeros(1, 100, 64), theta, cfg)


def test_fit_static_map_recovers_static_map():
    rng = Rng(0)
    W = rng.normal((4, 4))
    a = rng.normal((1, 4, 5, 5))
    assert torch.allclose(fit_static_map(a, torch.einsum("bhts,hk->bkts", a, W)), W, atol=1e-10)


def test_static_config_has_static_equivalent():
    # control for the witness: with no dynamic branches the fit transfers
    cfg = AttentionConfig(8, 4, base_mode="static", branches=())
    r1, r2 = static_fit_residuals(random_compose_params(cfg, Rng(0)), cfg, Rng(1))
    assert r1 < 1e-10 and r2 < 1e-10


@pytest.mark.parametrize("seed", range(3))
def test_dynamic_config_has_no_static_equivalent(seed):
    cfg = AttentionConfig(8, 4)
    rng = Rng(seed)
    _, r2 = static_fit_residuals(random_compose_params(cfg, rng), cfg, rng)
    assert r2 > 1e-3
