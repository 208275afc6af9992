"""Head diversity of trained attention layers and per-branch Compose breakdowns."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .attention import branch_terms
from .model import Transformer


def _curve(rows: torch.Tensor, center: bool) -> list[float]:
    """Cumulative captured variance of the principal components of ``rows``.

    A stack with zero variance (e.g. identical heads after centering) gets the
    curve 1, 1, ..., 1 by convention.
    """
    X = rows.double()
    if center:
        X = X - X.mean(dim=0, keepdim=True)
    s = torch.linalg.svdvals(X)
    var = s**2
    n = rows.shape[0]
    total = float(var.sum())
    if total <= 1e-300:
        return [1.0] * n
    cum = (torch.cumsum(var, 0) / total).tolist()
    cum += [1.0] * (n - len(cum))
    return [min(1.0, c) for c in cum]


def circuits(W_Q, W_K, W_V, W_O, n_heads: int):
    """Per-head QK circuits W_Q_i W_K_i^T and OV circuits W_V_i W_O_i, each (H, D, D)."""
    D = W_Q.shape[0]
    dh = W_Q.shape[1] // n_heads
    qk, ov = [], []
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        qk.append(W_Q[:, sl] @ W_K[:, sl].T)
        ov.append(W_V[:, sl] @ W_O[sl, :])
    return torch.stack(qk), torch.stack(ov)


def diversity_curves(W_Q, W_K, W_V, W_O, n_heads: int, center: bool = True) -> dict:
    qk, ov = circuits(W_Q, W_K, W_V, W_O, n_heads)
    return {
        "qk": _curve(qk.reshape(n_heads, -1), center),
        "ov": _curve(ov.reshape(n_heads, -1), center),
    }


@torch.no_grad()
def head_diversity(model: Transformer, center: bool = True) -> dict:
    """Per-layer QK/OV diversity curves (k = 1..H) and their layer means."""
    layers = []
    for layer in model.layers:
        a = layer.attn
        layers.append(diversity_curves(a.W_Q, a.W_K, a.W_V, a.W_O, a.cfg.n_heads, center))
    H = model.cfg.n_heads
    mean = {c: [sum(l[c][k] for l in layers) / len(layers) for k in range(H)] for c in ("qk", "ov")}
    return {"layers": layers, "mean": mean, "center": center}


@dataclass
class BranchBreakdown:
    layer: int
    site: str
    i: int
    j: int
    A: list  # attention vector entering Compose
    base: list  # A, or A @ W_b for the static base
    O_qp: list
    O_qg: list
    O_kp: list
    O_kg: list
    A_composed: list
    dynamic: dict  # dw_q1/dw_q2/dw_k1/dw_k2 (G, R, Hg) and gates (H,) as nested lists

    def max_sum_error(self) -> float:
        total = torch.tensor(self.base, dtype=torch.float64)
        for t in (self.O_qp, self.O_qg, self.O_kp, self.O_kg):
            total = total + torch.tensor(t, dtype=torch.float64)
        return float((total - torch.tensor(self.A_composed, dtype=torch.float64)).abs().max())

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@torch.no_grad()
def compose_breakdown(model: Transformer, ids: torch.Tensor, layer: int, site: str, i: int, j: int) -> BranchBreakdown:
    """The five Compose summands for attention vector (i -> j) at one site."""
    if ids.dim() == 1:
        ids = ids[None]
    T = ids.shape[1]
    if not 0 <= layer < len(model.layers):
        raise IndexError(f"layer {layer} out of range")
    if not (0 <= i < T and 0 <= j < T):
        raise IndexError(f"(i, j) = ({i}, {j}) out of range for length {T}")
    attn = model.layers[layer].attn
    if site not in attn.cfg.compose_sites:
        raise ValueError(f"layer {layer} has no {site}-compose")
    _, diags = model(ids, return_diag=True)
    d = diags[layer]
    a_in, a_out = (d["scores"], d["scores_composed"]) if site == "pre" else (d["probs"], d["probs_composed"])
    qw, kw = d[f"{site}_q"], d[f"{site}_k"]
    terms = branch_terms(a_in, qw, kw, attn.theta(site), attn.cfg)
    H = attn.cfg.n_heads

    def vec(t):
        return [0.0] * H if t is None else t[0, :, i, j].double().tolist()

    dyn = {}
    if qw.dw1 is not None:
        dyn["dw_q1"], dyn["dw_q2"] = qw.dw1[0, i].double().tolist(), qw.dw2[0, i].double().tolist()
    if kw.dw1 is not None:
        dyn["dw_k1"], dyn["dw_k2"] = kw.dw1[0, j].double().tolist(), kw.dw2[0, j].double().tolist()
    if qw.gate is not None:
        dyn["gate_q"] = qw.gate[0, i].double().tolist()
    if kw.gate is not None:
        dyn["gate_k"] = kw.gate[0, j].double().tolist()
    return BranchBreakdown(
        layer=layer,
        site=site,
        i=i,
        j=j,
        A=vec(a_in),
        base=vec(terms["base"]),
        O_qp=vec(terms["qp"]),
        O_qg=vec(terms["qg"]),
        O_kp=vec(terms["kp"]),
        O_kg=vec(terms["kg"]),
        A_composed=vec(a_out),
        dynamic=dyn,
    )
