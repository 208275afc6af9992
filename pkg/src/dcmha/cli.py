"""Command line entry point: ``dcmha <command> ...``.

Every command prints JSON (or a plain table for ``gradcheck`` and
``complexity``) on stdout. Failures print one JSON line
``{"error": ..., "kind": ...}`` on stderr and exit nonzero; a check that
runs but misses its tolerance exits with status 1.

``DCMHA_DTYPE`` (``f32`` or ``f64``) overrides the dtype of trained and
loaded models.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import torch

from . import analysis, autodiff, complexity, equivalence, synthtask
from .model import ABLATIONS, ModelConfig, TrainConfig, load_checkpoint, preset, read_dataset, train

_ENV_DTYPES = {"f32": "float32", "f64": "float64"}


class CLIError(Exception):
    def __init__(self, kind: str, message: str, code: int = 2):
        super().__init__(message)
        self.kind = kind
        self.code = code


def env_dtype() -> str | None:
    v = os.environ.get("DCMHA_DTYPE")
    if v is None or v == "":
        return None
    if v not in _ENV_DTYPES:
        raise CLIError("config", f"DCMHA_DTYPE must be one of {sorted(_ENV_DTYPES)}, got {v!r}")
    return _ENV_DTYPES[v]


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CLIError("io", f"no such file: {path}")
    except json.JSONDecodeError as e:
        raise CLIError("config", f"{path}: invalid JSON ({e})")


# ---------------------------------------------------------------------------
# run configs


def model_config(d: dict) -> ModelConfig:
    """``{"preset": name, "plus_plus":, "rank":, "groups":, **overrides}`` or a full ModelConfig dict."""
    d = dict(d)
    if "preset" in d:
        name = d.pop("preset")
        if name not in ABLATIONS:
            raise CLIError("config", f"unknown preset {name!r}")
        return preset(name, **d)
    return ModelConfig.from_dict(d)


def load_run_config(path, extra=()) -> tuple[ModelConfig, TrainConfig, dict]:
    cfg = _read_json(path)
    unknown = set(cfg) - {"model", "train", "task", "data", *extra}
    if unknown:
        raise CLIError("config", f"unknown config keys {sorted(unknown)}")
    try:
        mcfg = model_config(cfg.get("model", {"preset": "dcformer"}))
        tcfg = TrainConfig(**cfg.get("train", {}))
    except (TypeError, ValueError) as e:
        raise CLIError("config", str(e))
    dt = env_dtype()
    if dt:
        tcfg = replace(tcfg, dtype=dt)
    return mcfg, tcfg, cfg


def build_dataset(cfg: dict, base: Path):
    if "data" in cfg:
        return read_dataset(base / cfg["data"])
    task = cfg.get("task")
    if task is None:
        raise CLIError("config", "config needs either 'data' or 'task'")
    spec = synthtask.TaskSpec(**task.get("spec", {}))
    tokens, info = synthtask.generate(spec, task.get("n_examples", 1000), task.get("k_shot", [1, 2, 3]), task.get("seed", 1))
    return synthtask.as_dataset(tokens, info)


def _load_model(ckpt):
    if not (Path(ckpt) / "model.json").exists():
        raise CLIError("io", f"no checkpoint in {ckpt}")
    model, meta = load_checkpoint(ckpt)
    dt = env_dtype()
    if dt:
        from .tensor import DTYPES

        model = model.to(DTYPES[dt])
    model.eval()
    return model, meta


def _load_data(path):
    path = Path(path)
    if not path.exists():
        raise CLIError("io", f"no such file: {path}")
    ds = read_dataset(path)
    return ds


# ---------------------------------------------------------------------------
# commands


def cmd_train(args):
    mcfg, tcfg, cfg = load_run_config(args.config)
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    if args.steps is not None:
        tcfg = replace(tcfg, steps=args.steps)
    ds = build_dataset(cfg, Path(args.config).parent)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if ds.meta:
        (out / "task.json").write_text(json.dumps(ds.meta.get("spec", {}), sort_keys=True) + "\n")
    _, metrics = train(mcfg, tcfg, ds, out_dir=out, metrics_path=out / "metrics.jsonl")
    last = metrics[-1] if metrics else {}
    print(json.dumps({"out": str(out), "steps": tcfg.steps, "final": last}))
    return 0


def cmd_eval(args):
    model, _ = _load_model(args.ckpt)
    ds = _load_data(args.data)
    try:
        res = synthtask.evaluate(model, ds, args.k_shot)
    except ValueError as e:
        raise CLIError("data", str(e))
    print(json.dumps(res, sort_keys=True))
    return 0


def cmd_generate(args):
    from .model import generate

    model, _ = _load_model(args.ckpt)
    prompt = [int(t) for t in args.prompt.replace(",", " ").split()]
    try:
        out = generate(model, prompt, args.n, use_cache=not args.no_cache)
    except ValueError as e:
        raise CLIError("input", str(e))
    print(json.dumps({"prompt": prompt, "tokens": out[len(prompt) :]}))
    return 0


def cmd_gen_data(args):
    d = _read_json(args.spec)
    try:
        spec = synthtask.TaskSpec(**d.get("spec", d))
        ks = [int(k) for k in args.k_shot.split(",")]
        path = synthtask.write(args.out, spec, args.n, ks, args.seed)
    except synthtask.InfeasibleSpec as e:
        raise CLIError("infeasible_spec", str(e))
    except TypeError as e:
        raise CLIError("config", str(e))
    print(json.dumps({"out": str(path), "n_per_task": args.n, "tasks": len(spec.tasks), "vocab_size": spec.vocab_size}))
    return 0


def cmd_gradcheck(args):
    cfg = _read_json(args.config) if args.config else {}
    ablations = cfg.get("ablations", list(autodiff.GRADCHECK_ABLATIONS))
    level = cfg.get("level", "model")
    fn = autodiff.model_gradcheck if level == "model" else autodiff.attention_gradcheck
    worst = ("", "", 0.0)
    print(f"{'ablation':<12} {'tensor':<28} {'max_rel_err':>12}")
    for ab in ablations:
        rep = fn(ab, seed=cfg.get("seed", 0), h=cfg.get("h", 1e-5))
        for name, err in rep.items():
            flag = "" if err < args.tol else "  FAIL"
            print(f"{ab:<12} {name:<28} {err:12.3e}{flag}")
            if err > worst[2]:
                worst = (ab, name, err)
    ok = worst[2] < args.tol
    print(json.dumps({"ok": ok, "tol": args.tol, "worst": {"ablation": worst[0], "tensor": worst[1], "rel_err": worst[2]}}))
    return 0 if ok else 1


def cmd_equiv(args):
    if args.theorem == "dense":
        it = equivalence.dense_trials(args.trials, args.seed, base_mode=args.base)
    else:
        it = equivalence.theorem_trials(int(args.theorem), args.trials, args.seed)
    worst = 0.0
    for rec in it:
        worst = max(worst, rec["deviation"])
        print(json.dumps(rec))
    ok = worst < args.tol
    print(json.dumps({"ok": ok, "tol": args.tol, "worst": worst}))
    return 0 if ok else 1


def cmd_complexity(args):
    if args.table:
        print(complexity.format_table(complexity.OVERHEAD_ROWS, exact=args.exact))
        return 0
    inp = complexity.ComplexityInputs.from_rho(args.r, args.dh, args.rho, H=args.heads, L=args.layers)
    rep = complexity.report(inp)
    if args.json:
        print(json.dumps(rep.to_dict(), sort_keys=True))
    else:
        p = rep.dparams_exact if args.exact else rep.dparams_approx
        f = rep.dflops_exact if args.exact else rep.dflops_approx
        print(f"params +{100 * p:.1f}%  flops +{100 * f:.1f}%")
    return 0


def cmd_breakdown(args):
    model, _ = _load_model(args.ckpt)
    text = Path(args.input).read_text() if Path(args.input).exists() else args.input
    ids = torch.tensor([[int(t) for t in text.replace(",", " ").split()]])
    try:
        bd = analysis.compose_breakdown(model, ids, args.layer, args.site, args.i, args.j)
    except (IndexError, ValueError) as e:
        raise CLIError("input", str(e))
    out = bd.to_dict()
    out["max_sum_error"] = bd.max_sum_error()
    print(json.dumps(out))
    return 0


def cmd_diversity(args):
    model, _ = _load_model(args.ckpt)
    print(json.dumps(analysis.head_diversity(model, center=not args.no_center)))
    return 0


def cmd_compare(args):
    mcfg, tcfg, cfg = load_run_config(args.config, extra=("eval", "seeds", "min_accuracy", "min_wins"))
    if args.steps is not None:
        tcfg = replace(tcfg, steps=args.steps)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else cfg.get("seeds", [0, 1, 2, 3, 4])
    if "task" not in cfg:
        raise CLIError("config", "compare needs a 'task' section")
    train_ds = build_dataset(cfg, Path(args.config).parent)
    ev = cfg.get("eval", {})
    spec = synthtask.TaskSpec(**cfg["task"].get("spec", {}))
    ks = ev.get("k_shot", cfg["task"].get("k_shot", [1, 2, 3]))
    test_ds = synthtask.as_dataset(*synthtask.generate(spec, ev.get("n_examples", 500), ks, ev.get("seed", 2)))

    def show(rec):
        print(json.dumps(rec), flush=True)

    res = synthtask.compare(mcfg, tcfg, train_ds, test_ds, seeds, on_seed=show)
    min_acc, min_wins = cfg.get("min_accuracy", 0.9), cfg.get("min_wins", 3)
    res.pop("runs")
    res["ok"] = res["dcmha_accuracy"] >= min_acc and res["wins"] >= min_wins
    res.update(min_accuracy=min_acc, min_wins=min_wins)
    print(json.dumps(res))
    return 0 if res["ok"] else 1


def _bench_one(mcfg: ModelConfig, tcfg: TrainConfig, ds, steps: int) -> dict:
    from .model import Transformer, lm_loss, loss_mask, make_optimizer

    torch.manual_seed(0)
    model = Transformer(replace(mcfg, dtype=tcfg.dtype), seed=0)
    opt = make_optimizer(model, tcfg)
    data = torch.from_numpy(ds.tokens.astype("int64"))
    batch = data[: tcfg.batch_size]
    mask = loss_mask(batch, ds, tcfg.loss_on)
    t0 = time.perf_counter()
    for _ in range(steps):
        loss = lm_loss(model, batch, mask)
        opt.zero_grad()
        loss.backward()
        opt.step()
    dt = time.perf_counter() - t0
    n_tok = steps * batch.shape[0] * (batch.shape[1] - 1)
    return {"tokens_per_s": n_tok / dt, "s_per_step": dt / steps}


def cmd_bench(args):
    mcfg, tcfg, cfg = load_run_config(args.config)
    ds = build_dataset(cfg, Path(args.config).parent)
    mha = preset("tfm", plus_plus=mcfg.positional == "rope", **{k: getattr(mcfg, k) for k in ("n_layers", "d_model", "n_heads", "d_head", "vocab_size", "max_seq_len")})
    res = {"mha": _bench_one(mha, tcfg, ds, args.steps), "dcmha": _bench_one(mcfg, tcfg, ds, args.steps)}
    res["relative_throughput"] = res["dcmha"]["tokens_per_s"] / res["mha"]["tokens_per_s"]
    print(json.dumps(res))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dcmha")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train a model from a run config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="answer accuracy and perplexity on a dataset")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--k-shot", type=int)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("generate", help="greedy continuation of a token prompt")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--prompt", required=True, help="space or comma separated token ids")
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--no-cache", action="store_true")
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("gen-data", help="write a synthetic composition dataset")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, required=True, help="examples per task")
    s.add_argument("--k-shot", default="1,2,3")
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    s.add_argument("--config")
    s.add_argument("--tol", type=float, default=1e-5)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("equiv", help="numerical equivalence trials")
    s.add_argument("--theorem", choices=["1", "2", "dense"], required=True)
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--tol", type=float, default=1e-10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--base", choices=["skip", "static"], default="skip")
    s.set_defaults(fn=cmd_equiv)

    s = sub.add_parser("complexity", help="relative parameter and FLOP overhead")
    s.add_argument("--dh", type=int, default=128)
    s.add_argument("--r", type=int, default=2)
    s.add_argument("--rho", type=float, default=1.0)
    s.add_argument("--heads", type=int, default=32)
    s.add_argument("--layers", type=int, default=24)
    s.add_argument("--exact", action="store_true")
    s.add_argument("--json", action="store_true")
    s.add_argument("--table", action="store_true")
    s.set_defaults(fn=cmd_complexity)

    s = sub.add_parser("breakdown", help="per-branch Compose contributions for one (i, j)")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True, help="token ids, or a file containing them")
    s.add_argument("--layer", type=int, required=True)
    s.add_argument("--site", choices=["pre", "post"], required=True)
    s.add_argument("--i", type=int, required=True)
    s.add_argument("--j", type=int, required=True)
    s.set_defaults(fn=cmd_breakdown)

    s = sub.add_parser("diversity", help="QK/OV head diversity curves")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--no-center", action="store_true")
    s.set_defaults(fn=cmd_diversity)

    s = sub.add_parser("compare", help="seeded training runs against a parameter-matched MHA")
    s.add_argument("--config", required=True)
    s.add_argument("--seeds", help="comma separated, overrides the config")
    s.add_argument("--steps", type=int)
    s.set_defaults(fn=cmd_compare)

    s = sub.add_parser("bench", help="training throughput, MHA vs the configured model")
    s.add_argument("--config", required=True)
    s.add_argument("--steps", type=int, default=10)
    s.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CLIError as e:
        print(json.dumps({"error": str(e), "kind": e.kind}), file=sys.stderr)
        return e.code
    except (FileNotFoundError, PermissionError) as e:
        print(json.dumps({"error": str(e), "kind": "io"}), file=sys.stderr)
        return 2
    except ValueError as e:
        print(json.dumps({"error": str(e), "kind": "value"}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
