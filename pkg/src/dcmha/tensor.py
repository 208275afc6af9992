"""Dense tensor primitives used throughout the package.

Tensors are plain ``torch.Tensor`` values; this module adds the handful of
operations the attention code is written in terms of, a seeded RNG with
splittable streams, initializers, and the named-tensor file format.

Named-tensor format
-------------------
A checkpoint is two files, ``<stem>.json`` (manifest) and ``<stem>.bin``
(blob). The manifest is UTF-8 JSON::

    {"format": "dcmha-tensors", "version": 1,
     "tensors": [{"name": ..., "shape": [...], "dtype": "float32"|"float64",
                  "byte_offset": int, "byte_length": int}, ...],
     "meta": {...}}

The blob is the concatenation of every tensor's elements, row-major,
little-endian, in manifest order with no padding. ``byte_offset`` of entry
``k`` equals the sum of ``byte_length`` over entries ``< k``. The manifest is
written with sorted ``meta`` keys so identical contents give identical bytes.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

DTYPES = {"float32": torch.float32, "float64": torch.float64}
_NP_DTYPES = {"float32": "<f4", "float64": "<f8"}

MASK_VALUE = -1e9


class ShapeError(ValueError):
    pass


def dtype_name(dtype: torch.dtype) -> str:
    for name, dt in DTYPES.items():
        if dt == dtype:
            return name
    raise TypeError(f"unsupported dtype {dtype}")


# ---------------------------------------------------------------------------
# contraction


_SPEC_RE = re.compile(r"^([A-Za-z]*(?:,[A-Za-z]*)*)->([A-Za-z]*)$")


def contract(a: torch.Tensor, b: torch.Tensor, spec: str) -> torch.Tensor:
    """Index-notation contraction of two tensors, e.g. ``"BHTS,BTRH->BRTS"``.

    Axes named in both operands must agree in extent, except that an axis of
    extent 1 broadcasts against the other operand.
    """
    m = _SPEC_RE.match(spec.replace(" ", ""))
    if m is None or m.group(1).count(",") != 1:
        raise ShapeError(f"bad contraction spec {spec!r}: need 'xy,yz->xz' form")
    lhs, rhs = m.group(1).split(",")
    out = m.group(2)
    for name, idx, t in (("a", lhs, a), ("b", rhs, b)):
        if len(set(idx)) != len(idx):
            raise ShapeError(f"operand {name} repeats an axis in {idx!r}")
        if len(idx) != t.dim():
            raise ShapeError(
                f"operand {name} has {t.dim()} axes but spec {idx!r} names {len(idx)}"
            )
    for ax in out:
        if ax not in lhs and ax not in rhs:
            raise ShapeError(f"output axis {ax!r} not present in either operand")
    for ax in set(lhs) & set(rhs):
        ea, eb = a.shape[lhs.index(ax)], b.shape[rhs.index(ax)]
        if ea != eb and 1 not in (ea, eb):
            raise ShapeError(
                f"axis {ax!r} has extent {ea} in operand a {tuple(a.shape)} "
                f"but {eb} in operand b {tuple(b.shape)}"
            )
    return torch.einsum(f"{lhs},{rhs}->{out}", a, b)


# ---------------------------------------------------------------------------
# elementwise and normalisation


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    # torch's kernel subtracts the row max before exp()
    return torch.softmax(x, dim=axis)


def gelu(x: torch.Tensor) -> torch.Tensor:
    """Exact GELU, ``x * Phi(x)`` with the error-function CDF."""
    return torch.nn.functional.gelu(x, approximate="none")


def tanh(x: torch.Tensor) -> torch.Tensor:
    return torch.tanh(x)


def rmsnorm_noscale(x: torch.Tensor, axis: int = -1, eps: float = 1e-6) -> torch.Tensor:
    if eps <= 0:
        raise ValueError("eps must be positive")
    return x * torch.rsqrt(x.pow(2).mean(dim=axis, keepdim=True) + eps)


# ---------------------------------------------------------------------------
# randomness and initialisation


class Rng:
    """Seeded generator built on numpy's PCG64 with ``SeedSequence`` splitting.

    PCG64 output is specified bit-for-bit, so identical seeds give identical
    draws on any platform numpy supports.
    """

    algorithm = "pcg64"

    def __init__(self, seed: int | np.random.SeedSequence = 0):
        if isinstance(seed, np.random.SeedSequence):
            self._ss = seed
            self.seed = int(seed.entropy) if isinstance(seed.entropy, int) else 0
        else:
            self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
            self._ss = np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.PCG64(self._ss))

    def spawn(self, n: int) -> list["Rng"]:
        return [Rng(ss) for ss in self._ss.spawn(n)]

    def child(self) -> "Rng":
        return self.spawn(1)[0]

    def normal(self, shape, std: float = 1.0, dtype=torch.float64) -> torch.Tensor:
        draw = np.asarray(self._gen.standard_normal(size=tuple(shape)) * std)
        return torch.from_numpy(draw).to(dtype)

    def uniform(self, shape, low=-1.0, high=1.0, dtype=torch.float64) -> torch.Tensor:
        return torch.from_numpy(np.asarray(self._gen.uniform(low, high, size=tuple(shape)))).to(dtype)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def permutation(self, x):
        return self._gen.permutation(x)

    def state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


@dataclass(frozen=True)
class InitSpec:
    kind: str = "normal"  # normal | xavier_normal | zeros | identity
    std: float = 0.02

    def __post_init__(self):
        if self.kind not in ("normal", "xavier_normal", "zeros", "identity"):
            raise ValueError(f"unknown init kind {self.kind!r}")
        if self.std < 0:
            raise ValueError("std must be nonnegative")


def xavier_std(fan_in: int, fan_out: int) -> float:
    return math.sqrt(2.0 / (fan_in + fan_out))


def init(shape, spec: InitSpec, rng: Rng, dtype=torch.float64) -> torch.Tensor:
    """Draw a tensor. Fans for ``xavier_normal`` are the last two axes
    (leading axes are treated as independent blocks, e.g. head groups)."""
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ShapeError("init needs a nonempty shape")
    if spec.kind == "zeros":
        return torch.zeros(shape, dtype=dtype)
    if spec.kind == "identity":
        eye = torch.eye(shape[-1], dtype=dtype)
        return eye.expand(shape).clone()
    if spec.kind == "xavier_normal":
        fan_in = shape[-2] if len(shape) >= 2 else shape[-1]
        return rng.normal(shape, xavier_std(fan_in, shape[-1]), dtype)
    if spec.std == 0:
        return torch.zeros(shape, dtype=dtype)
    return rng.normal(shape, spec.std, dtype)


# ---------------------------------------------------------------------------
# named-tensor files


def _paths(stem: str | Path) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def save_tensors(stem, tensors: Mapping[str, torch.Tensor], meta: dict | None = None) -> Path:
    manifest_path, blob_path = _paths(stem)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(blob_path, "wb") as fh:
        for name, t in tensors.items():
            dname = dtype_name(t.dtype)
            raw = t.detach().cpu().contiguous().numpy().astype(_NP_DTYPES[dname]).tobytes()
            entries.append(
                {
                    "name": name,
                    "shape": list(t.shape),
                    "dtype": dname,
                    "byte_offset": offset,
                    "byte_length": len(raw),
                }
            )
            fh.write(raw)
            offset += len(raw)
    manifest = {
        "format": "dcmha-tensors",
        "version": 1,
        "tensors": entries,
        "meta": meta or {},
    }
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return manifest_path


def load_tensors(stem) -> tuple[dict[str, torch.Tensor], dict]:
    manifest_path, blob_path = _paths(stem)
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != "dcmha-tensors":
        raise ValueError(f"{manifest_path} is not a named-tensor manifest")
    blob = blob_path.read_bytes()
    out = {}
    for e in manifest["tensors"]:
        chunk = blob[e["byte_offset"] : e["byte_offset"] + e["byte_length"]]
        if len(chunk) != e["byte_length"]:
            raise ValueError(f"blob truncated at tensor {e['name']!r}")
        arr = np.frombuffer(chunk, dtype=_NP_DTYPES[e["dtype"]]).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))).clone()
    return out, manifest.get("meta", {})
