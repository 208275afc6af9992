"""Multi-head attention with dynamically composed attention matrices.

Shapes use B batch, T queries, S keys, D model dim, H heads, G head groups,
Hg = H // G heads per group, R dynamic rank per group, I = 2 * Hg * R.

The composition of an attention vector ``a = A[:, i, j]`` (length H, a row
vector) is::

    a' = a @ W_b            (or a, for the skip base)
       + a @ dw_q1[i] @ dw_q2[i] + a * g_q[i]
       + a @ dw_k1[j] @ dw_k2[j] + a * g_k[j]

where every dynamic weight depends on a single query row Q_i or key row K_j.
Because of this row plus column split, the key-side weights can be computed
once per key and cached for incremental decoding.

Note on convention: ``W_b`` acts on row vectors, so a static composition
map ``C`` with ``A'_h = sum_j C[h, j] A_j`` corresponds to ``W_b = C.T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import torch
from torch import Tensor, nn

from .tensor import MASK_VALUE, InitSpec, Rng, contract, gelu, init, rmsnorm_noscale, softmax

BRANCHES = ("q_lowrank", "q_gate", "k_lowrank", "k_gate")
SITES = ("pre", "post")


@dataclass
class AttentionConfig:
    d_model: int
    n_heads: int
    d_head: int = 0  # 0 -> d_model // n_heads
    rank: int = 2
    groups: int = 1
    base_mode: str = "skip"  # skip | static
    branches: tuple = BRANCHES
    compose_sites: tuple = SITES
    causal: bool = True
    window: Optional[int] = None
    use_rope: bool = False
    rope_fraction: float = 1.0
    rope_base: float = 10000.0
    use_qknorm: bool = False
    # Scores are divided by sqrt(d_head) before the pre-compose. Compose is
    # linear in the attention tensor, so False (scale afterwards) differs only
    # by rounding.
    scale_before_compose: bool = True
    eps: float = 1e-6

    def __post_init__(self):
        if not self.d_head:
            if self.d_model % self.n_heads:
                raise ValueError("d_model must be divisible by n_heads when d_head is not set")
            self.d_head = self.d_model // self.n_heads
        self.branches = tuple(b for b in BRANCHES if b in set(self.branches))
        self.compose_sites = tuple(s for s in SITES if s in set(self.compose_sites))
        if self.n_heads % self.groups:
            raise ValueError(f"groups={self.groups} does not divide n_heads={self.n_heads}")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.window is not None and self.window < 1:
            raise ValueError("window must be >= 1")
        if self.base_mode not in ("skip", "static"):
            raise ValueError(f"unknown base_mode {self.base_mode!r}")

    @property
    def heads_per_group(self) -> int:
        return self.n_heads // self.groups

    @property
    def hidden(self) -> int:
        """Width of the dynamic-weight FFN for one group."""
        return 2 * self.heads_per_group * self.rank

    @property
    def is_mha(self) -> bool:
        return not self.compose_sites

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["branches"] = list(self.branches)
        d["compose_sites"] = list(self.compose_sites)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionConfig":
        d = dict(d)
        d["branches"] = tuple(d.get("branches", BRANCHES))
        d["compose_sites"] = tuple(d.get("compose_sites", SITES))
        return cls(**d)


@dataclass
class ProjectionParams:
    W_Q: Tensor  # (D, H*Dh); head i owns columns [i*Dh, (i+1)*Dh)
    W_K: Tensor
    W_V: Tensor
    W_O: Tensor  # (H*Dh, D)


@dataclass
class ComposeParams:
    """Parameters of one Compose site. Per-group tensors carry a leading G axis."""

    W_q1: Optional[Tensor] = None  # (G, D, I)
    W_q2: Optional[Tensor] = None  # (G, I, I)
    W_qg: Optional[Tensor] = None  # (D, H)
    W_k1: Optional[Tensor] = None
    W_k2: Optional[Tensor] = None
    W_kg: Optional[Tensor] = None
    W_b: Optional[Tensor] = None  # (G, Hg, Hg), static base only

    def named(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}


@dataclass
class SideWeights:
    """Dynamic weights computed from one side (queries or keys)."""

    dw1: Optional[Tensor] = None  # (B, N, G, R, Hg), RMS-normalised over Hg
    dw2: Optional[Tensor] = None  # (B, N, G, R, Hg)
    gate: Optional[Tensor] = None  # (B, N, H)

    def cat(self, other: "SideWeights") -> "SideWeights":
        def join(a, b):
            return None if a is None else torch.cat([a, b], dim=1)

        return SideWeights(join(self.dw1, other.dw1), join(self.dw2, other.dw2), join(self.gate, other.gate))

    def __len__(self):
        for t in (self.dw1, self.gate):
            if t is not None:
                return t.shape[1]
        return 0


# ---------------------------------------------------------------------------
# initialisation


def dynamic_proj_std(heads: int, rank: int) -> float:
    """Std for W_q2 / W_k2 so the dynamic projections start near zero."""
    return 0.02 / (math.sqrt(2 * heads * rank) * (heads + rank))


def gate_std(d_model: int, heads: int) -> float:
    return 0.05 * math.sqrt(2.0 / (d_model + heads))


def init_compose_params(cfg: AttentionConfig, rng: Rng, dtype=torch.float64) -> ComposeParams:
    G, Hg, D, I, H = cfg.groups, cfg.heads_per_group, cfg.d_model, cfg.hidden, cfg.n_heads
    p = ComposeParams()
    xavier = InitSpec("xavier_normal")
    w2 = InitSpec("normal", dynamic_proj_std(Hg, cfg.rank))
    wg = InitSpec("normal", gate_std(D, H))
    for side in ("q", "k"):
        if f"{side}_lowrank" in cfg.branches:
            setattr(p, f"W_{side}1", init((G, D, I), xavier, rng, dtype))
            setattr(p, f"W_{side}2", init((G, I, I), w2, rng, dtype))
        if f"{side}_gate" in cfg.branches:
            setattr(p, f"W_{side}g", init((D, H), wg, rng, dtype))
    if cfg.base_mode == "static":
        p.W_b = init((G, Hg, Hg), InitSpec("identity"), rng, dtype)
    return p


def zero_compose_params(cfg: AttentionConfig, dtype=torch.float64) -> ComposeParams:
    p = init_compose_params(cfg, Rng(0), dtype)
    for name, t in p.named().items():
        setattr(p, name, torch.zeros_like(t))
    return p


def init_projection_params(cfg: AttentionConfig, rng: Rng, dtype=torch.float64, std=0.02, out_std=None):
    D, HD = cfg.d_model, cfg.n_heads * cfg.d_head
    spec = InitSpec("normal", std)
    return ProjectionParams(
        W_Q=init((D, HD), spec, rng, dtype),
        W_K=init((D, HD), spec, rng, dtype),
        W_V=init((D, HD), spec, rng, dtype),
        W_O=init((HD, D), InitSpec("normal", std if out_std is None else out_std), rng, dtype),
    )


# ---------------------------------------------------------------------------
# compose


def dw_proj(X: Tensor, W1: Tensor, W2: Tensor, rank: int, eps: float = 1e-6) -> tuple[Tensor, Tensor]:
    """Two-layer FFN producing the low-rank dynamic weights for every group.

    X (B, N, D), W1 (G, D, I), W2 (G, I, I) -> dw1, dw2 each (B, N, G, R, Hg).
    The hidden layout is (R, Hg) with heads fastest; dw1 is RMS-normalised
    over the head axis.
    """
    if W1.shape[-1] != W2.shape[-2] or W2.shape[-2] != W2.shape[-1]:
        raise ValueError(f"W1 {tuple(W1.shape)} and W2 {tuple(W2.shape)} disagree on I")
    I = W2.shape[-1]
    if I % (2 * rank):
        raise ValueError(f"I={I} is not a multiple of 2*rank={2 * rank}")
    hg = I // (2 * rank)
    hidden = gelu(contract(X, W1, "BNM,GMI->BNGI"))
    dw = contract(hidden, W2, "BNGI,GIJ->BNGJ")
    dw1, dw2 = dw.chunk(2, dim=-1)
    dw1 = rmsnorm_noscale(dw1.unflatten(-1, (rank, hg)), axis=-1, eps=eps)
    dw2 = dw2.unflatten(-1, (rank, hg))
    return dw1, dw2


def side_weights(X: Tensor, theta: ComposeParams, side: str, cfg: AttentionConfig) -> SideWeights:
    W1, W2, Wg = (getattr(theta, f"W_{side}{s}") for s in ("1", "2", "g"))
    out = SideWeights()
    if f"{side}_lowrank" in cfg.branches:
        out.dw1, out.dw2 = dw_proj(X, W1, W2, cfg.rank, cfg.eps)
    if f"{side}_gate" in cfg.branches:
        out.gate = torch.tanh(X @ Wg)
    return out


def branch_terms(a: Tensor, qw: SideWeights, kw: SideWeights, theta: ComposeParams, cfg: AttentionConfig) -> dict:
    """The five summands of Compose for attention tensor ``a`` (B, H, T, S).

    Returns a dict with keys ``base``, ``qp``, ``kp``, ``qg``, ``kg``; disabled
    branches map to None.
    """
    B, H, T, S = a.shape
    G, Hg = cfg.groups, cfg.heads_per_group
    ag = a.reshape(B, G, Hg, T, S)
    if cfg.base_mode == "static":
        base = contract(ag, theta.W_b, "BGHTS,GHK->BGKTS").reshape(B, H, T, S)
    else:
        base = a
    terms = {"base": base, "qp": None, "kp": None, "qg": None, "kg": None}
    if qw.dw1 is not None:
        h = contract(ag, qw.dw1, "BGHTS,BTGRH->BGRTS")
        terms["qp"] = contract(h, qw.dw2, "BGRTS,BTGRH->BGHTS").reshape(B, H, T, S)
    if kw.dw1 is not None:
        h = contract(ag, kw.dw1, "BGHTS,BSGRH->BGRTS")
        terms["kp"] = contract(h, kw.dw2, "BGRTS,BSGRH->BGHTS").reshape(B, H, T, S)
    if qw.gate is not None:
        terms["qg"] = a * qw.gate.transpose(1, 2).unsqueeze(-1)
    if kw.gate is not None:
        terms["kg"] = a * kw.gate.transpose(1, 2).unsqueeze(-2)
    return terms


def side_map(w: SideWeights, cfg: AttentionConfig, static: Optional[Tensor] = None) -> Optional[Tensor]:
    """Fold one side's dynamic branches (and optionally W_b) into per-position
    head maps (B, N, H, H) acting on row vectors. None if nothing is active."""
    G, Hg = cfg.groups, cfg.heads_per_group
    m = None
    if w.dw1 is not None:
        m = contract(w.dw1, w.dw2, "BNGRH,BNGRK->BNGHK")
    if static is not None:
        m = static if m is None else m + static
    if m is not None:
        if G == 1:
            m = m[:, :, 0]
        else:
            eye = torch.eye(G, dtype=m.dtype, device=m.device)
            m = contract(m, eye, "BNGHK,GF->BNGHFK").flatten(-2).flatten(2, 3)
        if w.gate is not None:
            m = m + torch.diag_embed(w.gate)
    elif w.gate is not None:
        m = torch.diag_embed(w.gate)
    return m


def apply_compose(a: Tensor, qw: SideWeights, kw: SideWeights, theta: ComposeParams, cfg: AttentionConfig) -> Tensor:
    """Compose with each side folded into one head map per position.

    Numerically this is the same sum as ``branch_terms`` but with two batched
    matmuls instead of up to five separate terms, which is what training uses.
    """
    static = theta.W_b[None, None] if cfg.base_mode == "static" else None
    mq = side_map(qw, cfg, static)
    mk = side_map(kw, cfg)
    out = a if static is None else None
    if mq is not None:
        # (B, T, S, H) @ (B, T, H, H)
        t = (a.permute(0, 2, 3, 1) @ mq).permute(0, 3, 1, 2)
        out = t if out is None else out + t
    if mk is not None:
        # (B, S, T, H) @ (B, S, H, H)
        t = (a.permute(0, 3, 2, 1) @ mk).permute(0, 3, 2, 1)
        out = out + t
    return out


def compose(a: Tensor, Q: Tensor, K: Tensor, theta: ComposeParams, cfg: AttentionConfig) -> Tensor:
    """Compose attention tensor ``a`` (B, H, T, S) given query/key inputs."""
    if a.shape[1] != cfg.n_heads or a.shape[2] != Q.shape[1] or a.shape[3] != K.shape[1]:
        raise ValueError(
            f"attention tensor {tuple(a.shape)} inconsistent with Q {tuple(Q.shape)}, "
            f"K {tuple(K.shape)}, H={cfg.n_heads}"
        )
    return apply_compose(a, side_weights(Q, theta, "q", cfg), side_weights(K, theta, "k", cfg), theta, cfg)


# ---------------------------------------------------------------------------
# positional encodings and normalisation


def apply_rope(x: Tensor, positions: Tensor, fraction: float = 1.0, base: float = 10000.0) -> Tensor:
    """Rotate the leading ``fraction * Dh`` dims of x (..., T, Dh) in 2-d planes.

    Plane k pairs dim k with dim k + rot/2 and turns by angle
    ``pos * base**(-2k/rot)``.
    """
    dh = x.shape[-1]
    rot = int(round(fraction * dh))
    if rot % 2:
        raise ValueError(f"rotated dim count {rot} is odd")
    if rot == 0:
        return x
    half = rot // 2
    inv_freq = base ** (-torch.arange(0, half, dtype=torch.float64) * 2.0 / rot)
    ang = positions.to(torch.float64)[:, None] * inv_freq[None, :]
    cos, sin = ang.cos().to(x.dtype), ang.sin().to(x.dtype)
    x1, x2, rest = x[..., :half], x[..., half:rot], x[..., rot:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos, rest], dim=-1)


def qknorm(x: Tensor, eps: float = 1e-6) -> Tensor:
    return rmsnorm_noscale(x, axis=-1, eps=eps)


def mask_bias(q_pos: Tensor, k_pos: Tensor, causal: bool, window: Optional[int], dtype) -> Tensor:
    """Additive mask (T, S): 0 where allowed, -1e9 elsewhere."""
    i = q_pos[:, None]
    j = k_pos[None, :]
    allowed = torch.ones(i.shape[0], j.shape[1], dtype=torch.bool)
    if causal or window is not None:
        allowed &= j <= i
    if window is not None:
        allowed &= j >= i - window + 1
    return torch.where(allowed, torch.zeros((), dtype=dtype), torch.full((), MASK_VALUE, dtype=dtype))


# ---------------------------------------------------------------------------
# forward passes


def _split_heads(x: Tensor, H: int) -> Tensor:
    return x.unflatten(-1, (H, -1)).transpose(1, 2)  # (B, N, H*Dh) -> (B, H, N, Dh)


def project_qk(Q: Tensor, K: Tensor, p: ProjectionParams, cfg: AttentionConfig, q_pos: Tensor, k_pos: Tensor):
    q = _split_heads(Q @ p.W_Q, cfg.n_heads)
    k = _split_heads(K @ p.W_K, cfg.n_heads)
    if cfg.use_qknorm:
        q, k = qknorm(q, cfg.eps), qknorm(k, cfg.eps)
    if cfg.use_rope:
        q = apply_rope(q, q_pos, cfg.rope_fraction, cfg.rope_base)
        k = apply_rope(k, k_pos, cfg.rope_fraction, cfg.rope_base)
    return q, k


def attend(
    Q: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    p: ProjectionParams,
    cfg: AttentionConfig,
    q_pos: Tensor,
    k_pos: Tensor,
    pre: Optional[tuple] = None,
    post: Optional[tuple] = None,
):
    """Core of both MHA and DCMHA on already projected heads.

    ``pre`` / ``post`` are ``(theta, q_side, k_side)`` triples or None.
    """
    scale = 1.0 / math.sqrt(cfg.d_head)
    scores = contract(q, k, "BHTD,BHSD->BHTS")
    diag = {}
    if pre is None or cfg.scale_before_compose:
        scores = scores * scale
    if pre is not None:
        diag["scores"] = scores
        scores = apply_compose(scores, pre[1], pre[2], pre[0], cfg)
        diag["scores_composed"] = scores
        if not cfg.scale_before_compose:
            scores = scores * scale
    scores = scores + mask_bias(q_pos, k_pos, cfg.causal, cfg.window, scores.dtype)
    probs = softmax(scores, axis=-1)
    diag["probs"] = probs
    if post is not None:
        probs = apply_compose(probs, post[1], post[2], post[0], cfg)
        diag["probs_composed"] = probs
    o = contract(probs, v, "BHTS,BHSD->BHTD")
    out = o.transpose(1, 2).flatten(-2) @ p.W_O
    return out, diag


def mha_forward(Q: Tensor, K: Tensor, V: Tensor, p: ProjectionParams, cfg: AttentionConfig, q_offset: int = 0):
    """Scaled dot-product multi-head attention. Returns (output, weights)."""
    T, S = Q.shape[1], K.shape[1]
    q_pos = torch.arange(T) + q_offset
    k_pos = torch.arange(S)
    q, k = project_qk(Q, K, p, cfg, q_pos, k_pos)
    v = _split_heads(V @ p.W_V, cfg.n_heads)
    out, diag = attend(Q, q, k, v, p, cfg, q_pos, k_pos)
    return out, diag["probs"]


def dcmha_forward(
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    p: ProjectionParams,
    theta_pre: Optional[ComposeParams],
    theta_post: Optional[ComposeParams],
    cfg: AttentionConfig,
    q_offset: int = 0,
):
    """DCMHA forward. Returns (output, diagnostics).

    diagnostics holds ``scores``/``scores_composed`` (pre site),
    ``probs``/``probs_composed`` (post site) and the dynamic weights under
    ``pre_q``, ``pre_k``, ``post_q``, ``post_k``.
    """
    T, S = Q.shape[1], K.shape[1]
    q_pos = torch.arange(T) + q_offset
    k_pos = torch.arange(S)
    q, k = project_qk(Q, K, p, cfg, q_pos, k_pos)
    v = _split_heads(V @ p.W_V, cfg.n_heads)
    sites = {}
    for site, theta in (("pre", theta_pre), ("post", theta_post)):
        if site in cfg.compose_sites:
            sites[site] = (theta, side_weights(Q, theta, "q", cfg), side_weights(K, theta, "k", cfg))
    out, diag = attend(Q, q, k, v, p, cfg, q_pos, k_pos, sites.get("pre"), sites.get("post"))
    for site, (_, qw, kw) in sites.items():
        diag[f"{site}_q"], diag[f"{site}_k"] = qw, kw
    return out, diag


# ---------------------------------------------------------------------------
# incremental decoding


@dataclass
class DecodeCache:
    """Per-layer state for incremental decoding of self-attention.

    Keys are stored after QKNorm/RoPE. Key-side dynamic weights are stored per
    compose site so old positions are never recomputed.
    """

    k: Optional[Tensor] = None  # (B, H, S, Dh)
    v: Optional[Tensor] = None
    k_side: dict = field(default_factory=dict)  # site -> SideWeights over S

    @property
    def length(self) -> int:
        return 0 if self.k is None else self.k.shape[2]


def dcmha_decode_step(
    x: Tensor,
    cache: DecodeCache,
    p: ProjectionParams,
    theta_pre: Optional[ComposeParams],
    theta_post: Optional[ComposeParams],
    cfg: AttentionConfig,
) -> tuple[Tensor, DecodeCache]:
    """Self-attention for new positions x (B, n, D) given the cache.

    Returns the output rows for the new positions and a new cache; the input
    cache is left untouched.
    """
    start = cache.length
    n = x.shape[1]
    if cache.k is not None and (cache.k.shape[0] != x.shape[0] or cache.k.shape[1] != cfg.n_heads):
        raise ValueError("decode cache does not match batch size or head count")
    new_pos = torch.arange(start, start + n)
    q, k_new = project_qk(x, x, p, cfg, new_pos, new_pos)
    v_new = _split_heads(x @ p.W_V, cfg.n_heads)
    k = k_new if cache.k is None else torch.cat([cache.k, k_new], dim=2)
    v = v_new if cache.v is None else torch.cat([cache.v, v_new], dim=2)
    k_pos = torch.arange(start + n)
    k_side = dict(cache.k_side)
    sites = {}
    for site, theta in (("pre", theta_pre), ("post", theta_post)):
        if site not in cfg.compose_sites:
            continue
        fresh = side_weights(x, theta, "k", cfg)
        k_side[site] = fresh if site not in cache.k_side else cache.k_side[site].cat(fresh)
        sites[site] = (theta, side_weights(x, theta, "q", cfg), k_side[site])
    out, _ = attend(x, q, k, v, p, cfg, new_pos, k_pos, sites.get("pre"), sites.get("post"))
    return out, DecodeCache(k=k, v=v, k_side=k_side)


# ---------------------------------------------------------------------------
# module wrapper


class Attention(nn.Module):
    """Self-attention layer holding MHA projections and Compose parameters.

    With ``cfg.compose_sites`` empty this is plain MHA.
    """

    def __init__(self, cfg: AttentionConfig, rng: Rng, dtype=torch.float32, std=0.02, out_std=None):
        super().__init__()
        self.cfg = cfg
        proj = init_projection_params(cfg, rng, torch.float64, std, out_std)
        for name in ("W_Q", "W_K", "W_V", "W_O"):
            self.register_parameter(name, nn.Parameter(getattr(proj, name).to(dtype)))
        self.compose = nn.ModuleDict()
        for site in cfg.compose_sites:
            theta = init_compose_params(cfg, rng.child(), torch.float64)
            holder = nn.Module()
            for name, t in theta.named().items():
                holder.register_parameter(name, nn.Parameter(t.to(dtype)))
            self.compose[site] = holder

    def projections(self) -> ProjectionParams:
        return ProjectionParams(self.W_Q, self.W_K, self.W_V, self.W_O)

    def theta(self, site: str) -> Optional[ComposeParams]:
        if site not in self.compose:
            return None
        return ComposeParams(**dict(self.compose[site].named_parameters()))

    def forward(self, x: Tensor, return_diag: bool = False):
        if self.cfg.is_mha:
            out, probs = mha_forward(x, x, x, self.projections(), self.cfg)
            diag = {"probs": probs}
        else:
            out, diag = dcmha_forward(x, x, x, self.projections(), self.theta("pre"), self.theta("post"), self.cfg)
        return (out, diag) if return_diag else out

    def decode(self, x: Tensor, cache: DecodeCache) -> tuple[Tensor, DecodeCache]:
        return dcmha_decode_step(x, cache, self.projections(), self.theta("pre"), self.theta("post"), self.cfg)


def with_window(cfg: AttentionConfig, window: Optional[int]) -> AttentionConfig:
    return replace(cfg, window=window)
