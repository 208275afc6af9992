"""Print the approximate and exact overhead rows, then the exact-vs-approx
gap over a grid of head sizes, ranks and sequence/model ratios."""

import argparse

from dcmha.complexity import OVERHEAD_ROWS, ComplexityInputs, format_table, report


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--heads", type=int, default=32)
    args = ap.parse_args()
    print(format_table(OVERHEAD_ROWS, H=args.heads, exact=True))
    print()
    print(f"{'D_h':>4} {'R':>2} {'rho':>5} {'params gap':>11} {'flops gap':>10}")
    for D_h in (32, 64, 128, 256):
        for R in (1, 2, 4):
            for rho in (0.25, 0.5, 1, 2, 4):
                r = report(ComplexityInputs.from_rho(R, D_h, rho, H=args.heads))
                gp = abs(r.dparams_exact - r.dparams_approx) / r.dparams_approx
                gf = abs(r.dflops_exact - r.dflops_approx) / r.dflops_approx
                mark = "  >10%" if max(gp, gf) > 0.1 else ""
                print(f"{D_h:>4} {R:>2} {rho:>5g} {gp:>10.3f} {gf:>10.3f}{mark}")


if __name__ == "__main__":
    main()
