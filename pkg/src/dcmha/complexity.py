"""Parameter and FLOP overhead of dynamic composition.

Closed-form ratios are relative to one transformer layer (12 D_m^2 weights).
The shape-derived counters below tally tensors and multiply-adds from an
``AttentionConfig`` directly, at 2 FLOPs per multiply-add.

``delta_flops`` works from the fully expanded numerator rather than the
compact bracketed form, which is easy to misgroup.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .attention import SITES, AttentionConfig

# reference overhead rows: (label, R, D_h, rho, params %, flops %)
OVERHEAD_ROWS = [
    ("1.4B", 2, 64, 1.0, 2.6, 4.8),
    ("6.9B", 2, 128, 0.5, 1.3, 1.9),
    ("6.9B", 2, 128, 1.0, 1.3, 2.4),
    ("6.9B", 2, 128, 2.0, 1.3, 3.3),
]


@dataclass(frozen=True)
class ComplexityInputs:
    R: int
    D_h: int
    H: int = 32
    S: int = 2048
    L: int = 24
    D_m: int = 0  # 0 -> H * D_h

    @property
    def d_model(self) -> int:
        return self.D_m or self.H * self.D_h

    @property
    def rho(self) -> float:
        return self.S / self.d_model

    @classmethod
    def from_rho(cls, R: int, D_h: int, rho: float, H: int = 32, L: int = 24) -> "ComplexityInputs":
        return cls(R=R, D_h=D_h, H=H, S=int(round(rho * H * D_h)), L=L)


@dataclass(frozen=True)
class ComplexityReport:
    dparams_exact: float
    dparams_approx: float
    dflops_exact: float
    dflops_approx: float

    def to_dict(self) -> dict:
        return asdict(self)


def delta_params(x: ComplexityInputs) -> tuple[float, float]:
    R, H, D_m = x.R, x.H, x.d_model
    exact = (4 * D_m * 2 * R * H + 4 * (2 * R * H) ** 2 + 4 * D_m * H) / (12 * D_m**2)
    approx = (2 * R + 1) / (3 * x.D_h)
    return exact, approx


def delta_flops(x: ComplexityInputs) -> tuple[float, float]:
    R, H, D_h, D_m = x.R, x.H, x.D_h, x.d_model
    T = S = x.S
    num = 2 * (T + S) * (2 * D_h * R * H**2 + 4 * R**2 * H**2 + D_h * H**2) + 4 * T * S * H * (2 * R + 1)
    exact = num / (H * D_h * T * (12 * D_m + S))
    rho = x.rho
    approx = 4 * (2 * R + 1) * (1 + rho) / ((12 + rho) * D_h)
    return exact, approx


def report(x: ComplexityInputs) -> ComplexityReport:
    return ComplexityReport(*delta_params(x), *delta_flops(x))


# ---------------------------------------------------------------------------
# shape-derived counts


def compose_param_shapes(cfg: AttentionConfig, site: str) -> dict[str, tuple]:
    G, D, I, H, Hg = cfg.groups, cfg.d_model, cfg.hidden, cfg.n_heads, cfg.heads_per_group
    shapes = {}
    for side in ("q", "k"):
        if f"{side}_lowrank" in cfg.branches:
            shapes[f"{site}.W_{side}1"] = (G, D, I)
            shapes[f"{site}.W_{side}2"] = (G, I, I)
        if f"{side}_gate" in cfg.branches:
            shapes[f"{site}.W_{side}g"] = (D, H)
    if cfg.base_mode == "static":
        shapes[f"{site}.W_b"] = (G, Hg, Hg)
    return shapes


def attention_param_counts(cfg: AttentionConfig) -> dict[str, int]:
    """Parameter count per named tensor of one attention layer."""
    D, HD = cfg.d_model, cfg.n_heads * cfg.d_head
    counts = {"W_Q": D * HD, "W_K": D * HD, "W_V": D * HD, "W_O": HD * D}
    for site in cfg.compose_sites:
        for name, shape in compose_param_shapes(cfg, site).items():
            n = 1
            for s in shape:
                n *= s
            counts[name] = n
    return counts


def compose_extra_params(cfg: AttentionConfig) -> int:
    return sum(n for k, n in attention_param_counts(cfg).items() if "." in k)


def count_flops(cfg: AttentionConfig, T: int, S: int) -> dict:
    """FLOPs of one attention layer's forward pass, broken down by stage.

    Returns ``{"base": {...}, "<site>": {...}, "extra": int, "layer": int}``.
    ``layer`` covers the four projections, QK^T, AV and a 4x MLP; ``extra``
    sums the compose stages over sites.
    """
    D, H, Hd = cfg.d_model, cfg.n_heads, cfg.d_head
    G, I, R = cfg.groups, cfg.hidden, cfg.rank
    base = {
        "qkv_o_proj": 2 * (2 * T * D * H * Hd + 2 * S * D * H * Hd),
        "scores": 2 * T * S * H * Hd,
        "weighted_sum": 2 * T * S * H * Hd,
        "mlp": 2 * T * 8 * D * D,
    }
    out = {"base": base}
    extra = 0
    for site in cfg.compose_sites:
        st = {"gen_lowrank": 0, "apply_lowrank": 0, "gen_gate": 0, "apply_gate": 0, "apply_static": 0}
        for side, n in (("q", T), ("k", S)):
            if f"{side}_lowrank" in cfg.branches:
                st["gen_lowrank"] += 2 * n * G * (D * I + I * I)
                st["apply_lowrank"] += 4 * T * S * H * R
            if f"{side}_gate" in cfg.branches:
                st["gen_gate"] += 2 * n * D * H
                st["apply_gate"] += 2 * T * S * H  # multiply + accumulate
        if cfg.base_mode == "static":
            st["apply_static"] = 2 * T * S * H * cfg.heads_per_group
        st["total"] = sum(st.values())
        out[site] = st
        extra += st["total"]
    out["extra"] = extra
    out["layer"] = sum(base.values())
    return out


def flops_ratio(cfg: AttentionConfig, T: int, S: int) -> float:
    c = count_flops(cfg, T, S)
    return c["extra"] / c["layer"]


def format_table(rows=OVERHEAD_ROWS, H: int = 32, L: int = 24, exact: bool = False) -> str:
    head = f"{'size':>6} {'R':>2} {'L':>3} {'H':>3} {'D_h':>4} {'S':>5} {'rho':>5} {'dParams':>8} {'dFLOPs':>8}"
    if exact:
        head += f" {'dP exact':>9} {'dF exact':>9}"
    lines = [head]
    for label, R, D_h, rho, *_ in rows:
        x = ComplexityInputs.from_rho(R, D_h, rho, H=H, L=L)
        r = report(x)
        line = (
            f"{label:>6} {R:>2} {L:>3} {H:>3} {D_h:>4} {x.S:>5} {rho:>5g} "
            f"{100 * r.dparams_approx:>7.1f}% {100 * r.dflops_approx:>7.1f}%"
        )
        if exact:
            line += f" {100 * r.dparams_exact:>8.2f}% {100 * r.dflops_exact:>8.2f}%"
        lines.append(line)
    return "\n".join(lines)


__all__ = [
    "SITES",
    "OVERHEAD_ROWS",
    "ComplexityInputs",
    "ComplexityReport",
    "attention_param_counts",
    "compose_extra_params",
    "count_flops",
    "delta_flops",
    "delta_params",
    "flops_ratio",
    "format_table",
    "report",
]
