"""Reverse-mode gradients and the central-difference check used to validate them.

Gradients come from torch's autograd tape. ``backward`` adds the contract
the rest of the package relies on (scalar losses, one pass per graph,
named leaves), and ``fd_report`` is an independent finite-difference oracle
that never touches autograd.
"""

from __future__ import annotations

import warnings
import weakref
from typing import Callable, Mapping

import torch


class DetachedGraphWarning(UserWarning):
    pass


_consumed: "weakref.WeakSet[torch.Tensor]" = weakref.WeakSet()


def backward(loss: torch.Tensor, leaves: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Return d(loss)/d(leaf) for every named leaf.

    A leaf that the loss does not depend on gets a zero gradient. If the loss
    is not attached to any graph all gradients are zero and a
    ``DetachedGraphWarning`` is issued.
    """
    if loss.dim() != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if loss in _consumed:
        raise RuntimeError("backward already ran on this loss; rebuild the graph first")
    names = list(leaves)
    tensors = [leaves[n] for n in names]
    if not loss.requires_grad:
        warnings.warn("loss is detached from every leaf; gradients are zero", DetachedGraphWarning)
        return {n: torch.zeros_like(t) for n, t in zip(names, tensors)}
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    _consumed.add(loss)
    return {
        n: (g if g is not None else torch.zeros_like(t)) for n, t, g in zip(names, tensors, grads)
    }


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-8) -> torch.Tensor:
    denom = torch.maximum(analytic.abs(), numeric.abs()).clamp_min(floor)
    return (analytic - numeric).abs() / denom


def numeric_grad(
    f: Callable[[dict[str, torch.Tensor]], torch.Tensor],
    point: Mapping[str, torch.Tensor],
    name: str,
    h: float = 1e-5,
) -> torch.Tensor:
    """Central difference ``(f(x+h) - f(x-h)) / 2h`` for every element of one leaf."""
    base = {k: v.detach().clone() for k, v in point.items()}
    x = base[name]
    flat = x.view(-1)
    out = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(f(base))
            flat[i] = orig - h
            fm = float(f(base))
            flat[i] = orig
            out[i] = (fp - fm) / (2 * h)
    return out.view_as(x)


def fd_report(
    f: Callable[[dict[str, torch.Tensor]], torch.Tensor],
    point: Mapping[str, torch.Tensor],
    h: float = 1e-5,
    names=None,
) -> dict[str, float]:
    """Max relative error between autograd and central differences, per leaf."""
    if h <= 0:
        raise ValueError("h must be positive")
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in point.items()}
    analytic = backward(f(leaves), leaves)
    report = {}
    for name in names or list(point):
        num = numeric_grad(f, point, name, h)
        report[name] = float(relative_error(analytic[name].detach(), num).max())
    return report


def fd_check(f, point, h: float = 1e-5) -> float:
    return max(fd_report(f, point, h).values())


# ---------------------------------------------------------------------------
# whole-model checks


def _order_one(model, rng) -> dict[str, torch.Tensor]:
    """Random order-one values for every parameter so each branch matters."""
    point = {}
    for name, p in model.named_parameters():
        if p.dim() == 1:
            point[name] = 1.0 + 0.1 * rng.normal(p.shape)
        elif name in ("embed", "pos_embed"):
            point[name] = rng.normal(p.shape)  # rows are activations, unit scale
        else:
            fan = p.shape[-2] if p.dim() >= 2 else p.shape[-1]
            point[name] = rng.normal(p.shape, 1.0 / fan**0.5)
    return point


def model_gradcheck(ablation: str = "dcformer", seed: int = 0, h: float = 1e-5, **dims) -> dict[str, float]:
    """Per-parameter max relative error for a tiny float64 model and CE loss."""
    from torch.func import functional_call

    from .model import Transformer, preset
    from .tensor import Rng

    # D_h = 3 is odd, so RoPE turns one plane and leaves the third dim alone
    kw = dict(n_layers=2, d_model=6, n_heads=2, d_head=3, vocab_size=11, max_seq_len=8, window=2, dtype="float64")
    kw["rope_fraction"] = 2 / 3
    kw.update(dims)
    cfg = preset(ablation, rank=2, **kw)
    model = Transformer(cfg, seed=seed)
    rng = Rng(seed + 1)
    point = _order_one(model, rng)
    ids = torch.from_numpy(rng.integers(0, cfg.vocab_size, size=(2, 5)))

    def f(params):
        logits = functional_call(model, params, (ids[:, :-1],))
        return torch.nn.functional.cross_entropy(logits.reshape(-1, cfg.vocab_size), ids[:, 1:].reshape(-1))

    return fd_report(f, point, h)


def attention_gradcheck(ablation: str = "dcformer", seed: int = 0, h: float = 1e-5) -> dict[str, float]:
    """Per-tensor max relative error for one DCMHA call (B=1, T=S=4, H=2,
    D_h=3, R=2) under a mean-square loss, including the input itself."""
    from .attention import AttentionConfig, ComposeParams, ProjectionParams, dcmha_forward
    from .equivalence import random_compose_params
    from .model import ABLATIONS
    from .tensor import Rng

    base_mode, branches, sites = ABLATIONS[ablation]
    cfg = AttentionConfig(6, 2, 3, rank=2, base_mode=base_mode, branches=branches, compose_sites=sites)
    rng = Rng(seed)
    point = {"X": rng.normal((1, 4, 6))}
    for n in ("W_Q", "W_K", "W_V", "W_O"):
        point[n] = rng.normal((6, 6), 6**-0.5)
    for site in sites:
        for n, t in random_compose_params(cfg, rng).named().items():
            point[f"{site}.{n}"] = t
    target = rng.normal((1, 4, 6))

    def f(p):
        proj = ProjectionParams(p["W_Q"], p["W_K"], p["W_V"], p["W_O"])
        thetas = {
            s: ComposeParams(**{k.split(".", 1)[1]: v for k, v in p.items() if k.startswith(s + ".")}) for s in sites
        }
        out, _ = dcmha_forward(p["X"], p["X"], p["X"], proj, thetas.get("pre"), thetas.get("post"), cfg)
        return ((out - target) ** 2).mean()

    return fd_report(f, point, h)


GRADCHECK_ABLATIONS = ("static-proj", "dyn-proj", "gate-only", "query-wise", "key-wise", "all")
