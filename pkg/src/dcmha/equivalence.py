"""Numerical oracles for attention-matrix composition.

* Static composition of score matrices equals attention with expanded,
  composed QK projections; static composition of weight matrices equals
  attention with expanded, composed OV projections.
* ``dense_compose_oracle`` materialises the full (T, S, H, H) transform
  for every query/key pair and applies it one attention vector at a time.
  It shares no code with ``attention.compose`` and is its reference.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import Tensor

from .attention import AttentionConfig, ComposeParams, compose
from .tensor import Rng

MAX_DENSE_ENTRIES = 10**7


def compose_scores_static(scores: Tensor, C: Tensor) -> Tensor:
    """``A'_h = sum_j C[h, j] A_j`` over the leading head axis of (H, T, S)."""
    H = scores.shape[0]
    return (C @ scores.reshape(H, -1)).reshape(scores.shape)


# ---------------------------------------------------------------------------
# static equivalences


def _draw(rng: Rng, H, D_h, D_m, T, S):
    s = 1.0 / math.sqrt(D_m)
    return {
        "Q": rng.normal((T, D_m)),
        "K": rng.normal((S, D_m)),
        "WQ": rng.normal((H, D_m, D_h), s),
        "WK": rng.normal((H, D_m, D_h), s),
        "C": rng.normal((H, H)),
    }


def expand_qk(WQ: Tensor, WK: Tensor, C: Tensor) -> tuple[Tensor, Tensor]:
    """Per head i: Q-side concat_j C[i,j] W_j^Q and K-side concat_j W_j^K,
    each (H, D_m, H*D_h)."""
    H = WQ.shape[0]
    WQ_t = torch.stack([torch.cat([C[i, j] * WQ[j] for j in range(H)], dim=1) for i in range(H)])
    WK_t = torch.stack([torch.cat([WK[j] for j in range(H)], dim=1) for _ in range(H)])
    return WQ_t, WK_t


def expand_ov(WV: Tensor, WO: Tensor, C: Tensor) -> tuple[Tensor, Tensor]:
    """Per head i: concat_j C[i,j] W_j^V, and W^O tiled H times along rows."""
    H = WV.shape[0]
    WV_t = torch.stack([torch.cat([C[i, j] * WV[j] for j in range(H)], dim=1) for i in range(H)])
    return WV_t, WO.repeat(H, 1)


def check_theorem1(H=4, D_h=8, D_m=16, T=8, S=8, rng: Rng | None = None, C: Tensor | None = None) -> float:
    """Max |composed scores - scores from expanded QK projections|."""
    rng = rng or Rng(0)
    d = _draw(rng, H, D_h, D_m, T, S)
    if C is not None:
        d["C"] = C.to(torch.float64)
    Q, K, C = d["Q"], d["K"], d["C"]
    A = torch.stack([(Q @ d["WQ"][h]) @ (K @ d["WK"][h]).T for h in range(H)])
    composed = compose_scores_static(A, C)
    WQ_t, WK_t = expand_qk(d["WQ"], d["WK"], C)
    expanded = torch.stack([(Q @ WQ_t[i]) @ (K @ WK_t[i]).T for i in range(H)])
    return float((composed - expanded).abs().max())


def check_theorem2(H=4, D_h=8, D_m=16, T=8, S=8, rng: Rng | None = None, C: Tensor | None = None) -> float:
    """Max |output from composed weights - output from expanded OV projections|.

    With ``W~_i^V = concat_j C[i,j] W_j^V`` the matching weight composition is
    ``A'_j = sum_i C[i,j] A_i``, i.e. ``compose_scores_static(A, C.T)``.
    """
    rng = rng or Rng(0)
    d = _draw(rng, H, D_h, D_m, T, S)
    if C is not None:
        d["C"] = C.to(torch.float64)
    C = d["C"]
    V = rng.normal((S, D_m))
    WV = rng.normal((H, D_m, D_h), 1.0 / math.sqrt(D_m))
    WO = rng.normal((H * D_h, D_m), 1.0 / math.sqrt(H * D_h))
    A = torch.softmax(rng.normal((H, T, S)), dim=-1)

    A_c = compose_scores_static(A, C.T)
    composed = sum(A_c[j] @ (V @ WV[j]) @ WO[j * D_h : (j + 1) * D_h] for j in range(H))

    WV_t, WO_t = expand_ov(WV, WO, C)
    heads = torch.cat([A[i] @ (V @ WV_t[i]) for i in range(H)], dim=1)  # (T, H*H*D_h)
    expanded = heads @ WO_t
    return float((composed - expanded).abs().max())


def theorem_trials(theorem: int, trials: int, seed: int = 0, **dims):
    check = {1: check_theorem1, 2: check_theorem2}[theorem]
    for t, rng in enumerate(Rng(seed).spawn(trials)):
        yield {"theorem": theorem, "trial": t, "deviation": check(rng=rng, **dims)}


# ---------------------------------------------------------------------------
# prototypical composition maps


def prototype_map(kind: str, H: int = 8) -> Tensor:
    """Hand-built maps for 8 heads (heads numbered from 1 in the names below).

    mutual: heads 3 and 8 excite each other, heads 2 and 5 inhibit each other
    one_to_many: head 6 shares its pattern with heads 4 and 7
    many_to_one: head 1 takes the patterns of heads 3 and 7 instead of its own
    gating: heads 3 and 6 amplified, head 4 switched off
    """
    C = torch.eye(H, dtype=torch.float64)
    if kind == "mutual":
        C[2, 7] = C[7, 2] = 1.0
        C[1, 4] = C[4, 1] = -1.0
    elif kind == "one_to_many":
        C[3, 5] = C[6, 5] = 1.0
    elif kind == "many_to_one":
        C[0] = 0.0
        C[0, 2] = C[0, 6] = 1.0
    elif kind == "gating":
        C[2, 2] = C[5, 5] = 2.0
        C[3, 3] = 0.0
    else:
        raise ValueError(f"unknown prototype {kind!r}")
    return C


# ---------------------------------------------------------------------------
# dense 4-D oracle


def _gelu_exact(x: Tensor) -> Tensor:
    return x * 0.5 * (1.0 + torch.special.erf(x / math.sqrt(2.0)))


def _block_diag(blocks) -> Tensor:
    return torch.block_diag(*blocks)


def _row_maps(X: Tensor, W1, W2, Wg, cfg: AttentionConfig) -> Tensor:
    """Per-position (H, H) maps from one side: low-rank product plus diagonal gate.

    X (N, D) -> (N, H, H)
    """
    N = X.shape[0]
    G, Hg, R = cfg.groups, cfg.heads_per_group, cfg.rank
    H = cfg.n_heads
    out = torch.zeros(N, H, H, dtype=X.dtype)
    for n in range(N):
        x = X[n]
        if W1 is not None:
            blocks = []
            for g in range(G):
                hidden = _gelu_exact(x @ W1[g])
                dw = hidden @ W2[g]
                m1 = dw[: R * Hg].reshape(R, Hg)
                m1 = m1 / torch.sqrt((m1**2).mean(dim=1, keepdim=True) + cfg.eps)
                m2 = dw[R * Hg :].reshape(R, Hg)
                blocks.append(m1.T @ m2)  # (Hg, R) @ (R, Hg)
            out[n] += _block_diag(blocks)
        if Wg is not None:
            out[n] += torch.diag(torch.tanh(x @ Wg))
    return out


def dense_transform(Q: Tensor, K: Tensor, theta: ComposeParams, cfg: AttentionConfig) -> Tensor:
    """W (B, T, S, H, H) = base + row-wise(query) + column-wise(key) maps."""
    B, T, S, H = Q.shape[0], Q.shape[1], K.shape[1], cfg.n_heads
    if T * S * H * H > MAX_DENSE_ENTRIES:
        raise ValueError(f"dense oracle refuses T*S*H^2 = {T * S * H * H} entries")
    q_on = "q_lowrank" in cfg.branches
    k_on = "k_lowrank" in cfg.branches
    qg_on = "q_gate" in cfg.branches
    kg_on = "k_gate" in cfg.branches
    if cfg.base_mode == "static":
        base = _block_diag(list(theta.W_b))
    else:
        base = torch.eye(H, dtype=Q.dtype)
    W = torch.empty(B, T, S, H, H, dtype=Q.dtype)
    for b in range(B):
        Wq = _row_maps(Q[b], theta.W_q1 if q_on else None, theta.W_q2, theta.W_qg if qg_on else None, cfg)
        Wk = _row_maps(K[b], theta.W_k1 if k_on else None, theta.W_k2, theta.W_kg if kg_on else None, cfg)
        W[b] = base + Wq[:, None] + Wk[None, :]
    return W


def dense_compose_oracle(a: Tensor, Q: Tensor, K: Tensor, theta: ComposeParams, cfg: AttentionConfig) -> Tensor:
    """Apply ``A'[:, i, j] = A[:, i, j] @ W[i, j]`` pair by pair."""
    W = dense_transform(Q, K, theta, cfg)
    B, H, T, S = a.shape
    out = torch.empty_like(a)
    for b in range(B):
        for i in range(T):
            for j in range(S):
                out[b, :, i, j] = a[b, :, i, j] @ W[b, i, j]
    return out


def random_compose_params(cfg: AttentionConfig, rng: Rng, scale: float = 1.0, dtype=torch.float64) -> ComposeParams:
    """Order-one random parameters (unlike the near-zero training init)."""
    G, Hg, D, I, H = cfg.groups, cfg.heads_per_group, cfg.d_model, cfg.hidden, cfg.n_heads
    p = ComposeParams()
    for side in ("q", "k"):
        if f"{side}_lowrank" in cfg.branches:
            setattr(p, f"W_{side}1", rng.normal((G, D, I), scale / math.sqrt(D), dtype))
            setattr(p, f"W_{side}2", rng.normal((G, I, I), scale / math.sqrt(I), dtype))
        if f"{side}_gate" in cfg.branches:
            setattr(p, f"W_{side}g", rng.normal((D, H), scale / math.sqrt(D), dtype))
    if cfg.base_mode == "static":
        p.W_b = rng.normal((G, Hg, Hg), scale / math.sqrt(Hg), dtype)
    return p


def dense_trials(trials: int, seed: int = 0, base_mode: str = "skip", H=4, T=4, S=4, R=2, D_m=8, groups=1):
    cfg = AttentionConfig(d_model=D_m, n_heads=H, rank=R, groups=groups, base_mode=base_mode)
    for t, rng in enumerate(Rng(seed).spawn(trials)):
        theta = random_compose_params(cfg, rng)
        Q, K = rng.normal((1, T, D_m)), rng.normal((1, S, D_m))
        a = rng.normal((1, H, T, S))
        dev = float((compose(a, Q, K, theta, cfg) - dense_compose_oracle(a, Q, K, theta, cfg)).abs().max())
        yield {"theorem": "dense", "trial": t, "base_mode": base_mode, "deviation": dev}


# ---------------------------------------------------------------------------
# dynamic composition has no single static equivalent


def fit_static_map(a: Tensor, a_out: Tensor) -> Tensor:
    """Least-squares W with ``a_out[:, i, j] ~ a[:, i, j] @ W`` over all pairs."""
    H = a.shape[1]
    X = a.permute(0, 2, 3, 1).reshape(-1, H).numpy()
    Y = a_out.permute(0, 2, 3, 1).reshape(-1, H).numpy()
    W, *_ = np.linalg.lstsq(X, Y, rcond=None)
    return torch.from_numpy(W)


def static_fit_residuals(
    theta: ComposeParams, cfg: AttentionConfig, rng: Rng, T: int = 6, S: int = 6
) -> tuple[float, float]:
    """Fit one static map to compose's action on pair 1; relative residual on pairs 1 and 2."""
    D, H = cfg.d_model, cfg.n_heads
    out = []
    pairs = [(rng.normal((1, T, D)), rng.normal((1, S, D)), rng.normal((1, H, T, S))) for _ in range(2)]
    W = None
    for Q, K, a in pairs:
        target = compose(a, Q, K, theta, cfg)
        if W is None:
            W = fit_static_map(a, target)
        pred = torch.einsum("bhts,hk->bkts", a, W)
        out.append(float((pred - target).norm() / target.norm()))
    return out[0], out[1]
