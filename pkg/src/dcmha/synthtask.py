"""Token-level head-composition tasks.

Each example lists ``n_pairs`` (key, value) pairs, then a query that selects
one source value by an attention rule (the QK pattern) and asks for a
function of it (the OV transform)::

    k1 v1 k2 v2 k3 v3  <pattern> <transform>  ->  key answer

Patterns
    same_key          Q_SAME k      -> value paired with k
    other_key         Q_OTHER k     -> value of the single pair whose key is not k
    different_in_set  Q_DIFF        -> the value that differs from all the others
Transforms
    copy              the source value itself
    successor         next value in the value partition (cyclic)
    class_lookup      class token from a fixed value -> class table

A sequence is ``BOS demo SEP demo ... SEP query``, left-padded with PAD to a
fixed length, so the answer is always the last token.
"""

from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .model import (
    ModelConfig,
    TokenDataset,
    TrainConfig,
    Transformer,
    n_params,
    param_matched,
    preset,
    train,
    write_dataset,
)
from .tensor import Rng

PATTERNS = ("same_key", "other_key", "different_in_set")
TRANSFORMS = ("copy", "successor", "class_lookup")
CONTROL = ("PAD", "BOS", "SEP", "ARROW", "Q_SAME", "Q_OTHER", "Q_DIFF", "T_COPY", "T_SUCC", "T_CLASS")
_PATTERN_TOKEN = {"same_key": "Q_SAME", "other_key": "Q_OTHER", "different_in_set": "Q_DIFF"}
ANSWER_GAP = 2  # ARROW, query key, answer
_TRANSFORM_TOKEN = {"copy": "T_COPY", "successor": "T_SUCC", "class_lookup": "T_CLASS"}


class InfeasibleSpec(ValueError):
    pass


@dataclass
class TaskSpec:
    patterns: tuple = PATTERNS
    transforms: tuple = TRANSFORMS
    n_pairs: int = 3
    n_keys: int = 32
    n_values: int = 64
    n_classes: int = 16
    n_control: int = 16
    seed: int = 0
    class_table: list = field(default_factory=list)  # value index -> class index

    def __post_init__(self):
        self.patterns = tuple(self.patterns)
        self.transforms = tuple(self.transforms)
        for p in self.patterns:
            if p not in PATTERNS:
                raise InfeasibleSpec(f"unknown pattern {p!r}")
        for t in self.transforms:
            if t not in TRANSFORMS:
                raise InfeasibleSpec(f"unknown transform {t!r}")
        if self.n_control < len(CONTROL):
            raise InfeasibleSpec("not enough control token slots")
        if self.n_pairs < 1:
            raise InfeasibleSpec("n_pairs must be >= 1")
        if "different_in_set" in self.patterns and self.n_pairs < 3:
            raise InfeasibleSpec("different_in_set needs a set of at least 3 items to single one out")
        if "other_key" in self.patterns and self.n_pairs < 2:
            raise InfeasibleSpec("other_key needs at least 2 pairs")
        if "same_key" in self.patterns and self.n_keys < self.n_pairs:
            raise InfeasibleSpec("same_key needs n_keys >= n_pairs")
        if self.n_values < self.n_pairs + 2:
            raise InfeasibleSpec("too few values for distinct pairs plus a held-out answer")
        if not self.class_table:
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, 7])))
            perm = rng.permutation(self.n_values)
            self.class_table = [int(perm[v] % self.n_classes) for v in range(self.n_values)]
        if len(self.class_table) != self.n_values:
            raise InfeasibleSpec("class_table must map every value")

    # vocabulary partitions -------------------------------------------------

    @property
    def key_ids(self) -> range:
        return range(self.n_control, self.n_control + self.n_keys)

    @property
    def value_ids(self) -> range:
        s = self.n_control + self.n_keys
        return range(s, s + self.n_values)

    @property
    def class_ids(self) -> range:
        s = self.n_control + self.n_keys + self.n_values
        return range(s, s + self.n_classes)

    @property
    def vocab_size(self) -> int:
        return self.n_control + self.n_keys + self.n_values + self.n_classes

    def tok(self, name: str) -> int:
        return CONTROL.index(name)

    @property
    def tasks(self) -> list[tuple[str, str]]:
        return list(itertools.product(self.patterns, self.transforms))

    @property
    def example_len(self) -> int:
        return 2 * self.n_pairs + 5  # ctx + pattern + transform + arrow + key + answer

    def seq_len(self, k_shot: int) -> int:
        return 1 + (k_shot + 1) * self.example_len + k_shot

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patterns"] = list(self.patterns)
        d["transforms"] = list(self.transforms)
        return d

    def transform(self, kind: str, value_tok: int) -> int:
        v = value_tok - self.value_ids.start
        if kind == "copy":
            return value_tok
        if kind == "successor":
            return self.value_ids.start + (v + 1) % self.n_values
        return self.class_ids.start + self.class_table[v]


def _distinct(rng: Rng, pool, n, exclude=()):
    ex = set(exclude)
    cand = [x for x in pool if x not in ex]
    return [int(x) for x in rng.choice(cand, size=n, replace=False)]


def make_example(
    spec: TaskSpec, pattern: str, transform: str, rng: Rng, used_keys=()
) -> tuple[list[int], int, int]:
    """Return (tokens ending with the answer, answer, source value).

    Keys in ``used_keys`` are not drawn, so a key never reappears in a later
    example of the same sequence with a different value.
    """
    n = spec.n_pairs
    keys_pool = [k for k in spec.key_ids if k not in set(used_keys)]
    vals_pool = list(spec.value_ids)
    if pattern == "same_key":
        keys = _distinct(rng, keys_pool, n)
        src = int(rng.integers(0, n))
        query = [keys[src]]
    elif pattern == "other_key":
        k, k_other = _distinct(rng, keys_pool, 2)
        src = int(rng.integers(0, n))
        keys = [k_other if i == src else k for i in range(n)]
        query = [k]
    else:
        keys = _distinct(rng, keys_pool, n)
        src = int(rng.integers(0, n))
        query = [spec.tok("PAD")]  # slot kept so every example has one length
    src_val = int(rng.choice(vals_pool))
    answer = spec.transform(transform, src_val)
    # values that would leak the answer into the prompt are excluded
    banned = {src_val, answer}
    if pattern == "different_in_set":
        other = _distinct(rng, vals_pool, 1, banned)[0]
        values = [src_val if i == src else other for i in range(n)]
    else:
        others = iter(_distinct(rng, vals_pool, n - 1, banned))
        values = [src_val if i == src else next(others) for i in range(n)]
    ctx = [t for pair in zip(keys, values) for t in pair]
    # the query key sits right before the answer, as each value sits right after its key
    toks = ctx + [spec.tok(_PATTERN_TOKEN[pattern]), spec.tok(_TRANSFORM_TOKEN[transform]), spec.tok("ARROW")]
    toks += query + [answer]
    return toks, answer, src_val


def make_sequence(spec: TaskSpec, task: tuple[str, str], k_shot: int, rng: Rng, seq_len: int):
    parts, used = [spec.tok("BOS")], set()
    for _ in range(k_shot):
        demo, _, _ = make_example(spec, *task, rng, used)
        used.update(t for t in demo if t in spec.key_ids)
        parts += demo + [spec.tok("SEP")]
    query, answer, src = make_example(spec, *task, rng, used)
    parts += query
    if len(parts) > seq_len:
        raise InfeasibleSpec(f"sequence of {len(parts)} tokens does not fit seq_len={seq_len}")
    pad = [spec.tok("PAD")] * (seq_len - len(parts))
    return pad + parts, answer, len(query)


def generate(spec: TaskSpec, n_examples: int, k_shot=(1, 2, 3), seed: int | None = None):
    """Generate ``n_examples`` sequences per task.

    ``k_shot`` is an int or a sequence of ints; with a sequence each example
    draws its k uniformly. Returns (tokens (N, L) int64, info dict).
    """
    ks = [k_shot] if isinstance(k_shot, int) else list(k_shot)
    if min(ks) < 0:
        raise InfeasibleSpec("k_shot must be >= 0")
    per_example = max(spec.n_pairs if p != "other_key" else 2 for p in spec.patterns)
    if (max(ks) + 1) * per_example > spec.n_keys:
        raise InfeasibleSpec(f"{max(ks) + 1} examples need {(max(ks) + 1) * per_example} distinct keys, have {spec.n_keys}")
    seq_len = spec.seq_len(max(ks))
    rng = Rng(spec.seed if seed is None else seed)
    rows, task_ids, kk, answers, qlen = [], [], [], [], []
    for t, task in enumerate(spec.tasks):
        for _ in range(n_examples):
            k = ks[int(rng.integers(0, len(ks)))]
            row, ans, ql = make_sequence(spec, task, k, rng, seq_len)
            rows.append(row)
            task_ids.append(t)
            kk.append(k)
            answers.append(ans)
            qlen.append(ql)
    info = {
        "spec": spec.to_dict(),
        "tasks": [list(t) for t in spec.tasks],
        "task_ids": task_ids,
        "k_shot": kk,
        "query_len": qlen,
        "tokens": {name: i for i, name in enumerate(CONTROL)},
        "class_table": spec.class_table,
        "vocab_size": spec.vocab_size,
        "seq_len": seq_len,
        "answer_gap": ANSWER_GAP,
    }
    return np.asarray(rows, dtype=np.int64), info


def write(path, spec: TaskSpec, n_examples: int, k_shot=(1, 2, 3), seed=None) -> Path:
    tokens, info = generate(spec, n_examples, k_shot, seed)
    path = Path(path)
    write_dataset(path, tokens, spec.vocab_size)
    path.with_suffix(".json").write_text(json.dumps(info, sort_keys=True) + "\n")
    return path


def as_dataset(tokens: np.ndarray, info: dict) -> TokenDataset:
    return TokenDataset(
        tokens,
        info["vocab_size"],
        answer_after=info["tokens"]["ARROW"],
        answer_gap=info.get("answer_gap", ANSWER_GAP),
        pad_id=info["tokens"]["PAD"],
        meta=info,
    )


@torch.no_grad()
def evaluate(model: Transformer, ds: TokenDataset, k_shot: int | None = None, batch_size: int = 256) -> dict:
    """Greedy accuracy and perplexity of the final (answer) token.

    With ``k_shot`` set, only examples with that many demonstrations count.
    Also reports per-k and per-task accuracy when the dataset has metadata.
    """
    if ds.vocab_size > model.cfg.vocab_size:
        raise ValueError(f"dataset vocab {ds.vocab_size} exceeds model vocab {model.cfg.vocab_size}")
    toks = torch.as_tensor(np.asarray(ds.tokens, dtype=np.int64))
    ks = np.asarray(ds.meta.get("k_shot", [0] * len(ds)))
    tids = np.asarray(ds.meta.get("task_ids", [0] * len(ds)))
    sel = np.arange(len(ds)) if k_shot is None else np.nonzero(ks == k_shot)[0]
    if sel.size == 0:
        raise ValueError(f"no examples with k_shot={k_shot}")
    correct, nll = [], []
    for s in range(0, sel.size, batch_size):
        idx = torch.as_tensor(sel[s : s + batch_size])
        batch = toks[idx]
        logits = model(batch[:, :-1])[:, -1].double()
        ans = batch[:, -1]
        correct.append((logits.argmax(-1) == ans).numpy())
        nll.append(F.cross_entropy(logits, ans, reduction="none").numpy())
    correct = np.concatenate(correct)
    nll = np.concatenate(nll)
    out = {
        "n": int(sel.size),
        "accuracy": float(correct.mean()),
        "perplexity": float(math.exp(nll.mean())),
    }
    out["per_k"] = {int(k): float(correct[ks[sel] == k].mean()) for k in np.unique(ks[sel])}
    tasks = ds.meta.get("tasks")
    if tasks:
        out["per_task"] = {
            "/".join(tasks[t]): float(correct[tids[sel] == t].mean()) for t in np.unique(tids[sel])
        }
    return out


def compare(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_ds: TokenDataset,
    test_ds: TokenDataset,
    seeds=(0, 1, 2, 3, 4),
    on_seed=None,
) -> dict:
    """Train ``model_cfg`` and a parameter-matched MHA baseline on every seed.

    The baseline is the ``tfm`` preset with the same dims and style, its MLP
    widened until the parameter counts agree. "Loss" is held-out answer NLL.
    """
    same = {k: getattr(model_cfg, k) for k in ("n_layers", "d_model", "n_heads", "d_head", "vocab_size", "max_seq_len")}
    base = preset("tfm", plus_plus=model_cfg.positional == "rope", **same)
    base = replace(base, window=model_cfg.window, local_global_pattern=model_cfg.local_global_pattern)
    base = param_matched(base, model_cfg)
    runs = []
    for seed in seeds:
        tc = replace(train_cfg, seed=seed)
        rec = {"seed": seed}
        for name, cfg in (("dcmha", model_cfg), ("mha", base)):
            t0 = time.perf_counter()
            m, hist = train(cfg, tc, train_ds)
            ev = evaluate(m, test_ds)
            rec[name] = {
                "accuracy": ev["accuracy"],
                "loss": math.log(ev["perplexity"]),
                "train_loss": float(np.mean([h["loss"] for h in hist[-100:]])),
                "seconds": round(time.perf_counter() - t0, 1),
            }
        rec["dcmha_wins"] = rec["dcmha"]["loss"] <= rec["mha"]["loss"]
        runs.append(rec)
        if on_seed:
            on_seed(rec)
    return {
        "runs": runs,
        "params": {"dcmha": n_params(model_cfg), "mha": n_params(base)},
        "dcmha_accuracy": float(np.mean([r["dcmha"]["accuracy"] for r in runs])),
        "mha_accuracy": float(np.mean([r["mha"]["accuracy"] for r in runs])),
        "wins": sum(r["dcmha_wins"] for r in runs),
        "seeds": len(runs),
    }
