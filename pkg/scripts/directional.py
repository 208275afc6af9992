"""Seeded DCFormer vs parameter-matched MHA runs on the class-lookup task.

Thin wrapper over ``dcmha compare`` that also saves the per-seed records.

    python scripts/directional.py --config configs/compare.json --out results/compare.jsonl
"""

import argparse
import contextlib
import io
import sys
from pathlib import Path

from dcmha.cli import main as cli


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(Path(__file__).resolve().parents[1] / "configs" / "compare.json"))
    ap.add_argument("--seeds")
    ap.add_argument("--steps", type=int)
    ap.add_argument("--out")
    args = ap.parse_args()
    argv = ["compare", "--config", args.config]
    if args.seeds:
        argv += ["--seeds", args.seeds]
    if args.steps:
        argv += ["--steps", str(args.steps)]

    class Tee(io.TextIOBase):
        def __init__(self):
            self.lines = []

        def write(self, s):
            sys.__stdout__.write(s)
            sys.__stdout__.flush()
            self.lines.append(s)
            return len(s)

    tee = Tee()
    with contextlib.redirect_stdout(tee):
        code = cli(argv)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text("".join(tee.lines))
    return code


if __name__ == "__main__":
    sys.exit(main())
