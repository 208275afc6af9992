"""Decoder-only language model with MHA or DCMHA layers, plus training,
greedy generation and checkpointing.

Checkpoint layout (a directory)::

    model.json / model.bin   named tensors (see ``dcmha.tensor``); ``meta``
                             holds {"model": ModelConfig, "train": TrainConfig,
                             "rng": RNG state or null, "step": int}

Dataset file (``*.tok``): a 16-byte little-endian header
``struct "<4sIII"`` = (b"DCMT", vocab_size, seq_len, count) followed by
``count * seq_len`` uint16 token ids, row-major.
"""

from __future__ import annotations

import json
import math
import re
import struct
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .attention import Attention, AttentionConfig, DecodeCache
from .tensor import DTYPES, InitSpec, Rng, init, load_tensors, save_tensors

DATA_MAGIC = b"DCMT"
_HEADER = struct.Struct("<4sIII")


@dataclass
class ModelConfig:
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 8
    d_head: int = 16
    vocab_size: int = 128
    max_seq_len: int = 128
    attn: AttentionConfig = None
    mlp: str = "swiglu"  # gelu | swiglu
    norm: str = "rmsnorm"  # layernorm | rmsnorm
    positional: str = "rope"  # learned | rope
    local_global_pattern: str = "LG"
    window: int = 64
    tie_embeddings: bool = False
    parallel_block: bool = False
    mlp_hidden: int = 0  # 0 -> 8/3 d rounded up to 8 (swiglu) or 4 d (gelu)
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.attn, dict):
            self.attn = AttentionConfig.from_dict(self.attn)
        if self.attn is None:
            self.attn = AttentionConfig(self.d_model, self.n_heads, self.d_head, compose_sites=())
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError("d_model must equal n_heads * d_head")
        if (self.attn.d_model, self.attn.n_heads, self.attn.d_head) != (self.d_model, self.n_heads, self.d_head):
            raise ValueError("attn dims disagree with model dims")
        if not self.local_global_pattern or set(self.local_global_pattern) - {"L", "G"}:
            raise ValueError("local_global_pattern must be a nonempty string over {L, G}")
        if self.n_layers % len(self.local_global_pattern):
            raise ValueError("pattern length must divide n_layers")
        if self.mlp not in ("gelu", "swiglu") or self.norm not in ("layernorm", "rmsnorm"):
            raise ValueError("unknown mlp or norm kind")
        if self.positional not in ("learned", "rope"):
            raise ValueError(f"unknown positional {self.positional!r}")

    def layer_attn(self, i: int) -> AttentionConfig:
        local = self.local_global_pattern[i % len(self.local_global_pattern)] == "L"
        return replace(
            self.attn,
            causal=True,
            window=self.window if local else None,
            use_rope=self.positional == "rope",
        )

    @property
    def hidden(self) -> int:
        if self.mlp_hidden:
            return self.mlp_hidden
        if self.mlp == "swiglu":
            return 8 * math.ceil(8 * self.d_model / 3 / 8)
        return 4 * self.d_model

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["attn"] = self.attn.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class TrainConfig:
    lr: float = 3e-3
    betas: tuple = (0.9, 0.95)
    grad_clip: float = 1.0
    weight_decay: float = 0.1
    warmup_frac: float = 0.01
    final_lr_frac: float = 0.1
    steps: int = 1000
    batch_size: int = 32
    seed: int = 0
    dtype: str = "float32"
    loss_on: str = "all"  # all | answers
    log_every: int = 1

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.steps > 0 and self.warmup_frac * self.steps < 1:
            self.warmup_frac = 1.0 / self.steps

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# ---------------------------------------------------------------------------
# presets


DESK = dict(n_layers=4, d_model=128, n_heads=8, d_head=16, vocab_size=128, max_seq_len=128)

ABLATIONS = {
    # name: (base_mode, branches, compose_sites)
    "tfm": ("skip", (), ()),
    "static-proj": ("static", (), ("pre", "post")),
    "dyn-proj": ("skip", ("q_lowrank", "k_lowrank"), ("pre", "post")),
    "gate-only": ("skip", ("q_gate", "k_gate"), ("pre", "post")),
    "query-wise": ("skip", ("q_lowrank", "q_gate"), ("pre", "post")),
    "key-wise": ("skip", ("k_lowrank", "k_gate"), ("pre", "post")),
    "pre-comp": ("skip", ("q_lowrank", "q_gate", "k_lowrank", "k_gate"), ("pre",)),
    "post-comp": ("skip", ("q_lowrank", "q_gate", "k_lowrank", "k_gate"), ("post",)),
    "all": ("static", ("q_lowrank", "q_gate", "k_lowrank", "k_gate"), ("pre", "post")),
    "dcformer": ("skip", ("q_lowrank", "q_gate", "k_lowrank", "k_gate"), ("pre", "post")),
}


def preset(name: str = "dcformer", plus_plus: bool = True, rank: int = 2, groups: int = 1, **overrides) -> ModelConfig:
    """Desk-scale model. ``plus_plus`` selects RoPE + SwiGLU + RMSNorm,
    otherwise learned positions + GELU MLP + LayerNorm."""
    base_mode, branches, sites = ABLATIONS[name]
    dims = {**DESK, **{k: v for k, v in overrides.items() if k in DESK}}
    rest = {k: v for k, v in overrides.items() if k not in DESK}
    attn_kw = {k: rest.pop(k) for k in list(rest) if k in ("use_qknorm", "rope_fraction", "scale_before_compose")}
    attn = AttentionConfig(
        dims["d_model"],
        dims["n_heads"],
        dims["d_head"],
        rank=rank,
        groups=groups,
        base_mode=base_mode,
        branches=branches,
        compose_sites=sites,
        **attn_kw,
    )
    style = (
        dict(mlp="swiglu", norm="rmsnorm", positional="rope")
        if plus_plus
        else dict(mlp="gelu", norm="layernorm", positional="learned")
    )
    return ModelConfig(**dims, attn=attn, **{**style, **rest})


def n_params(cfg: ModelConfig) -> int:
    return sum(p.numel() for p in Transformer(replace(cfg, dtype="float32")).parameters())


def param_matched(cfg: ModelConfig, target: ModelConfig) -> ModelConfig:
    """``cfg`` with its MLP width (a multiple of 8) chosen so the parameter
    count is as close as possible to ``target``'s."""
    want = n_params(target)
    base = replace(cfg, mlp_hidden=8)
    per_unit = (n_params(replace(cfg, mlp_hidden=16)) - n_params(base)) / 8
    hidden = max(8, 8 * round((8 + (want - n_params(base)) / per_unit) / 8))
    return replace(cfg, mlp_hidden=hidden)


# ---------------------------------------------------------------------------
# modules


class RMSNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-6, dtype=torch.float32):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(d, dtype=dtype))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


class LayerNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-5, dtype=torch.float32):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(d, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(d, dtype=dtype))

    def forward(self, x):
        return F.layer_norm(x, x.shape[-1:], self.weight, self.bias, self.eps)


def _param(shape, spec: InitSpec, rng: Rng, dtype) -> nn.Parameter:
    return nn.Parameter(init(shape, spec, rng, torch.float64).to(dtype))


class MLP(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: Rng, dtype, out_std: float):
        super().__init__()
        self.kind = cfg.mlp
        D = cfg.d_model
        spec = InitSpec("normal", 0.02)
        Hd = cfg.hidden
        if cfg.mlp == "swiglu":
            self.W_gate = _param((D, Hd), spec, rng, dtype)
            self.W_up = _param((D, Hd), spec, rng, dtype)
            self.W_down = _param((Hd, D), InitSpec("normal", out_std), rng, dtype)
        else:
            self.W_in = _param((D, Hd), spec, rng, dtype)
            self.W_out = _param((Hd, D), InitSpec("normal", out_std), rng, dtype)

    def forward(self, x):
        if self.kind == "swiglu":
            return (F.silu(x @ self.W_gate) * (x @ self.W_up)) @ self.W_down
        return F.gelu(x @ self.W_in) @ self.W_out


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig, i: int, rng: Rng, dtype):
        super().__init__()
        norm = RMSNorm if cfg.norm == "rmsnorm" else LayerNorm
        out_std = 0.02 / math.sqrt(2 * cfg.n_layers)
        self.parallel = cfg.parallel_block
        self.norm1 = norm(cfg.d_model, dtype=dtype)
        self.attn = Attention(cfg.layer_attn(i), rng.child(), dtype=dtype, out_std=out_std)
        self.norm2 = norm(cfg.d_model, dtype=dtype)
        self.mlp = MLP(cfg, rng.child(), dtype, out_std)

    def forward(self, x, return_diag=False):
        a, diag = self.attn(self.norm1(x), return_diag=True)
        if self.parallel:
            x = x + a + self.mlp(self.norm2(x))
        else:
            x = x + a
            x = x + self.mlp(self.norm2(x))
        return (x, diag) if return_diag else x

    def decode(self, x, cache: DecodeCache):
        a, cache = self.attn.decode(self.norm1(x), cache)
        if self.parallel:
            return x + a + self.mlp(self.norm2(x)), cache
        x = x + a
        return x + self.mlp(self.norm2(x)), cache


class Transformer(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        dtype = DTYPES[cfg.dtype]
        rng = Rng(seed)
        r_embed, r_pos, r_blocks, r_out = rng.spawn(4)
        spec = InitSpec("normal", 0.02)
        self.embed = _param((cfg.vocab_size, cfg.d_model), spec, r_embed, dtype)
        if cfg.positional == "learned":
            self.pos_embed = _param((cfg.max_seq_len, cfg.d_model), spec, r_pos, dtype)
        else:
            self.pos_embed = None
        self.layers = nn.ModuleList(Block(cfg, i, r, dtype) for i, r in enumerate(r_blocks.spawn(cfg.n_layers)))
        self.final_norm = (RMSNorm if cfg.norm == "rmsnorm" else LayerNorm)(cfg.d_model, dtype=dtype)
        if cfg.tie_embeddings:
            self.unembed = None
        else:
            self.unembed = _param((cfg.d_model, cfg.vocab_size), spec, r_out, dtype)

    def _check_ids(self, ids: Tensor, offset: int = 0):
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.cfg.vocab_size):
            raise ValueError(f"token id out of range [0, {self.cfg.vocab_size})")
        if offset + ids.shape[1] > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {offset + ids.shape[1]} exceeds max_seq_len {self.cfg.max_seq_len}")

    def _embed(self, ids: Tensor, offset: int = 0) -> Tensor:
        x = self.embed[ids]
        if self.pos_embed is not None:
            x = x + self.pos_embed[offset : offset + ids.shape[1]]
        return x

    def _logits(self, x: Tensor) -> Tensor:
        x = self.final_norm(x)
        W = self.embed.T if self.unembed is None else self.unembed
        return x @ W

    def forward(self, ids: Tensor, return_diag: bool = False):
        self._check_ids(ids)
        x = self._embed(ids)
        diags = []
        for layer in self.layers:
            x, d = layer(x, return_diag=True)
            diags.append(d)
        logits = self._logits(x)
        return (logits, diags) if return_diag else logits

    def new_cache(self) -> list[DecodeCache]:
        return [DecodeCache() for _ in self.layers]

    def decode(self, ids: Tensor, caches: list[DecodeCache]) -> tuple[Tensor, list[DecodeCache]]:
        """Logits for new tokens ``ids`` (B, n) continuing the cached prefix."""
        offset = caches[0].length
        self._check_ids(ids, offset)
        x = self._embed(ids, offset)
        new = []
        for layer, c in zip(self.layers, caches):
            x, c = layer.decode(x, c)
            new.append(c)
        return self._logits(x), new

    # named tensors ---------------------------------------------------------

    _GROUPED = ("W_q1", "W_q2", "W_k1", "W_k2", "W_b")

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for key, t in self.state_dict().items():
            name = re.sub(r"^layers\.(\d+)\.", r"layer\1.", key).replace(".attn.compose.", ".attn.")
            leaf = name.rsplit(".", 1)[-1]
            if ".attn." in name and leaf in self._GROUPED:
                if t.shape[0] == 1:
                    out[name] = t[0]
                else:
                    for g in range(t.shape[0]):
                        out[f"{name}.group{g}"] = t[g]
            else:
                out[name] = t
        return out

    def load_named_tensors(self, tensors: dict[str, Tensor]) -> None:
        state = {}
        for key, ref in self.state_dict().items():
            name = re.sub(r"^layers\.(\d+)\.", r"layer\1.", key).replace(".attn.compose.", ".attn.")
            leaf = name.rsplit(".", 1)[-1]
            if ".attn." in name and leaf in self._GROUPED:
                if ref.shape[0] == 1:
                    state[key] = tensors[name].unsqueeze(0)
                else:
                    state[key] = torch.stack([tensors[f"{name}.group{g}"] for g in range(ref.shape[0])])
            else:
                state[key] = tensors[name]
        self.load_state_dict(state)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(out_dir, model: Transformer, train_cfg: Optional[TrainConfig] = None, rng=None, step=0) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "model": model.cfg.to_dict(),
        "train": train_cfg.to_dict() if train_cfg else None,
        "rng": _jsonable(rng.state()) if rng is not None else None,
        "step": step,
    }
    return save_tensors(out_dir / "model", model.named_tensors(), meta)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (np.integer,)):
        return int(x)
    return x


def load_checkpoint(ckpt_dir) -> tuple[Transformer, dict]:
    tensors, meta = load_tensors(Path(ckpt_dir) / "model")
    cfg = ModelConfig.from_dict(meta["model"])
    model = Transformer(cfg)
    model.load_named_tensors(tensors)
    return model, meta


# ---------------------------------------------------------------------------
# datasets


@dataclass
class TokenDataset:
    tokens: np.ndarray  # (count, seq_len) uint16
    vocab_size: int
    answer_after: Optional[int] = None  # marker token for answers
    answer_gap: int = 1  # answers sit this many positions after the marker
    pad_id: Optional[int] = None
    meta: dict = field(default_factory=dict)

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]

    def __len__(self):
        return self.tokens.shape[0]


def write_dataset(path, tokens: np.ndarray, vocab_size: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tokens = np.asarray(tokens)
    if vocab_size > 65536:
        raise ValueError("uint16 token ids need vocab_size <= 65536")
    if tokens.size and int(tokens.max()) >= vocab_size:
        raise ValueError("token id exceeds vocab_size")
    count, seq_len = tokens.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATA_MAGIC, vocab_size, seq_len, count))
        fh.write(tokens.astype("<u2").tobytes())
    return path


def read_dataset(path) -> TokenDataset:
    path = Path(path)
    raw = path.read_bytes()
    magic, vocab, seq_len, count = _HEADER.unpack_from(raw)
    if magic != DATA_MAGIC:
        raise ValueError(f"{path} is not a token dataset")
    arr = np.frombuffer(raw, dtype="<u2", offset=_HEADER.size, count=count * seq_len)
    ds = TokenDataset(arr.reshape(count, seq_len).astype(np.int64), vocab)
    side = path.with_suffix(".json")
    if side.exists():
        meta = json.loads(side.read_text())
        ds.meta = meta
        ds.answer_after = meta.get("tokens", {}).get("ARROW")
        ds.answer_gap = meta.get("answer_gap", 1)
        ds.pad_id = meta.get("tokens", {}).get("PAD")
    return ds


def repeating_dataset(pattern: Iterable[int], seq_len: int, count: int, vocab_size: int) -> TokenDataset:
    """Every row is the same periodic sequence (memorisation smoke test)."""
    pat = list(pattern)
    row = np.array([pat[i % len(pat)] for i in range(seq_len)], dtype=np.int64)
    return TokenDataset(np.tile(row, (count, 1)), vocab_size)


# ---------------------------------------------------------------------------
# training


class TrainingDiverged(RuntimeError):
    pass


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup, then cosine decay to ``final_lr_frac`` of the peak."""
    warm = max(1, int(round(cfg.warmup_frac * cfg.steps)))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    progress = (step - warm) / max(1, cfg.steps - warm)
    return cfg.lr * (cfg.final_lr_frac + (1 - cfg.final_lr_frac) * 0.5 * (1 + math.cos(math.pi * progress)))


def loss_mask(batch: Tensor, ds: TokenDataset, loss_on: str) -> Tensor:
    """Mask over next-token targets ``batch[:, 1:]``."""
    tgt = batch[:, 1:]
    mask = torch.ones_like(tgt, dtype=torch.bool)
    if ds.pad_id is not None:
        mask &= tgt != ds.pad_id
    if loss_on == "answers":
        if ds.answer_after is None:
            raise ValueError("loss_on='answers' needs a dataset with an answer marker")
        g = ds.answer_gap
        marked = torch.zeros_like(mask)
        marked[:, g - 1 :] = batch[:, : batch.shape[1] - g] == ds.answer_after
        mask &= marked
    return mask


def lm_loss(model: Transformer, batch: Tensor, mask: Tensor) -> Tensor:
    logits = model(batch[:, :-1])
    nll = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), batch[:, 1:].reshape(-1), reduction="none")
    m = mask.reshape(-1).to(nll.dtype)
    return (nll * m).sum() / m.sum().clamp_min(1)


def make_optimizer(model: Transformer, cfg: TrainConfig) -> torch.optim.Optimizer:
    decay, no_decay = [], []
    for p in model.parameters():
        (decay if p.dim() >= 2 else no_decay).append(p)
    groups = [
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=cfg.lr, betas=cfg.betas, eps=1e-8)


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset: TokenDataset,
    out_dir=None,
    metrics_path=None,
    model: Optional[Transformer] = None,
    on_step=None,
) -> tuple[Transformer, list[dict]]:
    """Train and return (model, per-step metrics). Writes a checkpoint and a
    JSON-lines metrics file when ``out_dir`` / ``metrics_path`` are given."""
    torch.use_deterministic_algorithms(True)
    if model is None:
        model_cfg = replace(model_cfg, dtype=train_cfg.dtype)
        model = Transformer(model_cfg, seed=train_cfg.seed)
    if dataset.vocab_size > model.cfg.vocab_size:
        raise ValueError("dataset vocabulary exceeds model vocabulary")
    opt = make_optimizer(model, train_cfg)
    rng = Rng(train_cfg.seed).spawn(2)[1]
    data = torch.from_numpy(np.asarray(dataset.tokens, dtype=np.int64))
    metrics = []
    fh = open(metrics_path, "w") if metrics_path else None
    tokens_seen = 0
    t0 = time.perf_counter()
    try:
        for step in range(train_cfg.steps):
            lr = lr_at(step, train_cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            idx = torch.from_numpy(rng.integers(0, len(dataset), size=train_cfg.batch_size))
            batch = data[idx]
            mask = loss_mask(batch, dataset, train_cfg.loss_on)
            loss = lm_loss(model, batch, mask)
            if not torch.isfinite(loss):
                if out_dir is not None:
                    save_checkpoint(out_dir, model, train_cfg, rng, step)
                raise TrainingDiverged(f"non-finite loss at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            gnorm = torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
            opt.step()
            tokens_seen += batch.shape[0] * (batch.shape[1] - 1)
            rec = {
                "step": step,
                "loss": float(loss.detach()),
                "lr": lr,
                "grad_norm": float(gnorm),
                "tokens_seen": tokens_seen,
                "wall_ms": round(1000 * (time.perf_counter() - t0), 3),
            }
            metrics.append(rec)
            if fh and step % train_cfg.log_every == 0:
                fh.write(json.dumps(rec) + "\n")
            if on_step:
                on_step(rec)
    finally:
        if fh:
            fh.close()
    if out_dir is not None:
        save_checkpoint(out_dir, model, train_cfg, rng, train_cfg.steps)
    return model, metrics


# ---------------------------------------------------------------------------
# generation


@torch.no_grad()
def generate(model: Transformer, prompt: list[int], n_tokens: int, greedy: bool = True, use_cache: bool = True):
    """Greedy continuation of ``prompt``; returns prompt + new tokens."""
    if not greedy:
        raise NotImplementedError("only greedy decoding is supported")
    if len(prompt) + n_tokens > model.cfg.max_seq_len:
        raise ValueError("prompt + n_tokens exceeds max_seq_len")
    out = list(prompt)
    if n_tokens == 0:
        return out
    if not use_cache:
        for _ in range(n_tokens):
            logits = model(torch.tensor([out]))
            out.append(int(logits[0, -1].argmax()))
        return out
    caches = model.new_cache()
    logits, caches = model.decode(torch.tensor([out]), caches)
    for i in range(n_tokens):
        nxt = int(logits[0, -1].argmax())
        out.append(nxt)
        if i + 1 < n_tokens:
            logits, caches = model.decode(torch.tensor([[nxt]]), caches)
    return out
