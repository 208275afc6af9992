import json
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from dcmha.attention import AttentionConfig
from dcmha.complexity import (
    OVERHEAD_ROWS,
    ComplexityInputs,
    attention_param_counts,
    compose_extra_params,
    count_flops,
    delta_flops,
    delta_params,
    flops_ratio,
    format_table,
    report,
)


@pytest.mark.parametrize("label,R,D_h,rho,p_pct,f_pct", OVERHEAD_ROWS)
def test_table_rows_to_printed_decimal(label, R, D_h, rho, p_pct, f_pct):
    r = report(ComplexityInputs.from_rho(R, D_h, rho))
    assert round(100 * r.dparams_approx, 1) == p_pct
    assert round(100 * r.dflops_approx, 1) == f_pct


def test_approx_closed_forms():
    # exact rationals for the 1.4B row
    _, p = delta_params(ComplexityInputs(R=2, D_h=64))
    assert Fraction(p).limit_denominator(1000) == Fraction(5, 192)
    _, f = delta_flops(ComplexityInputs.from_rho(2, 64, 1.0))
    assert Fraction(f).limit_denominator(1000) == Fraction(40, 832)


def test_rank_zero_leaves_gate_term():
    _, p = delta_params(ComplexityInputs(R=0, D_h=64))
    assert p == pytest.approx(1 / (3 * 64))


def test_rho_to_zero_limit_matches_params():
    _, f = delta_flops(ComplexityInputs(R=2, D_h=64, S=1))
    _, p = delta_params(ComplexityInputs(R=2, D_h=64))
    assert f == pytest.approx(p, rel=1e-3)


@given(st.sampled_from([1, 2, 4]), st.sampled_from([32, 64, 128, 256]), st.integers(64, 8192), st.integers(64, 8192))
def test_params_independent_of_sequence(R, D_h, S1, S2):
    assert delta_params(ComplexityInputs(R=R, D_h=D_h, S=S1)) == delta_params(ComplexityInputs(R=R, D_h=D_h, S=S2))


@given(st.sampled_from([1, 2, 4]), st.sampled_from([32, 64, 128]), st.floats(0.25, 4.0), st.floats(0.25, 4.0))
def test_flops_monotone_in_rho(R, D_h, r1, r2):
    lo, hi = sorted((r1, r2))
    a = delta_flops(ComplexityInputs.from_rho(R, D_h, lo))
    b = delta_flops(ComplexityInputs.from_rho(R, D_h, hi))
    assert b[0] >= a[0] - 1e-15 and b[1] >= a[1] - 1e-15


@pytest.mark.parametrize("D_h", [64, 128, 256])
@pytest.mark.parametrize("R", [1, 2])
def test_exact_close_to_approx_where_dh_dominates(R, D_h):
    for rho in (0.25, 0.5, 1.0, 2.0, 4.0):
        r = report(ComplexityInputs.from_rho(R, D_h, rho))
        assert abs(r.dparams_exact - r.dparams_approx) / r.dparams_exact < 0.1
        assert abs(r.dflops_exact - r.dflops_approx) / r.dflops_exact < 0.1


@pytest.mark.parametrize("R,D_h", [(1, 32), (2, 32), (4, 32), (4, 64), (4, 256)])
def test_params_gap_is_dropped_quadratic_term(R, D_h):
    # approx drops 4R^2/(3 D_h^2); relative gap 4R^2 / ((2R+1) D_h + 4R^2)
    r = report(ComplexityInputs(R=R, D_h=D_h))
    gap = (r.dparams_exact - r.dparams_approx) / r.dparams_exact
    assert gap == pytest.approx(4 * R**2 / ((2 * R + 1) * D_h + 4 * R**2), rel=1e-9)


def test_param_counts_by_hand():
    cfg = AttentionConfig(64, 8, 8, rank=2)
    assert compose_extra_params(cfg) == 2 * (2 * (64 * 32 + 32**2) + 2 * 64 * 8)
    assert compose_extra_params(AttentionConfig(64, 8, compose_sites=())) == 0
    c = attention_param_counts(AttentionConfig(64, 8, groups=2, base_mode="static"))
    assert c["pre.W_q1"] == 2 * 64 * 16 and c["post.W_b"] == 2 * 4 * 4


@pytest.mark.parametrize("D_h", [32, 64, 128])
def test_counted_params_match_exact_formula(D_h):
    H = 32
    cfg = AttentionConfig(H * D_h, H, D_h, rank=2)
    exact, _ = delta_params(ComplexityInputs(R=2, D_h=D_h, H=H))
    assert compose_extra_params(cfg) / (12 * (H * D_h) ** 2) == pytest.approx(exact, rel=0.02)


def test_gate_only_flops_exact():
    T, S, D, H = 7, 9, 16, 4
    c = count_flops(AttentionConfig(D, H, branches=("q_gate", "k_gate")), T, S)
    for site in ("pre", "post"):
        assert c[site]["total"] == 2 * (T + S) * D * H + 4 * T * S * H


def test_no_branches_no_extra_flops():
    assert count_flops(AttentionConfig(16, 4, branches=()), 5, 5)["extra"] == 0


def test_full_config_flop_ratio_near_table():
    cfg = AttentionConfig(2048, 32, 64, rank=2)
    assert flops_ratio(cfg, 2048, 2048) == pytest.approx(0.048, rel=0.1)


def test_counted_flops_match_exact_numerator():
    # the formula's numerator counts multiply-adds over both sites; the
    # counter uses 2 FLOPs per multiply-add
    H, D_h, R, T = 8, 16, 2, 64
    x = ComplexityInputs(R=R, D_h=D_h, H=H, S=T)
    num = 2 * (2 * T) * (2 * D_h * R * H**2 + 4 * R**2 * H**2 + D_h * H**2) + 4 * T * T * H * (2 * R + 1)
    assert count_flops(AttentionConfig(H * D_h, H, D_h, rank=R), T, T)["extra"] == 2 * num
    assert delta_flops(x)[0] == pytest.approx(num / (H * D_h * T * (12 * H * D_h + T)))


def test_format_table_has_rows():
    txt = format_table(exact=True)
    assert txt.count("\n") == len(OVERHEAD_ROWS)
    assert "2.6%" in txt and "3.3%" in txt


def test_report_json_round_trip():
    d = report(ComplexityInputs(R=2, D_h=64)).to_dict()
    assert set(d) == {"dparams_exact", "dparams_approx", "dflops_exact", "dflops_approx"}
    json.dumps(d)
