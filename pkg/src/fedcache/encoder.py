"""Sample hashing: a fixed random-feature network mapping raw features to unit-norm codes.

Stands in for a pretrained image encoder. Codes computed elsewhere can be
loaded from a text file (``client_id<TAB>sample_id<TAB>v1,...,vd``).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError, InvalidArgument, ParseError

DEFAULT_HASH_DIM = 32

SampleIndex = tuple[int, int]


@dataclass(frozen=True)
class EncoderSpec:
    input_dim: int
    widths: tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths or min(self.widths) <= 0:
            raise InvalidArgument("encoder widths must be non-empty and positive")
        if self.output_dim >= self.input_dim:
            raise InvalidArgument(
                f"hash dim {self.output_dim} must be smaller than input dim {self.input_dim}"
            )

    @property
    def output_dim(self) -> int:
        return self.widths[-1]

    @property
    def depth(self) -> int:
        return len(self.widths)

    @classmethod
    def default(cls, input_dim: int, hash_dim: int = DEFAULT_HASH_DIM, depth: int = 3, seed: int = 0):
        hidden = (2 * hash_dim,) * (depth - 1)
        return cls(input_dim, (*hidden, hash_dim), seed)


class Encoder:
    """Deterministic hash network for one ``EncoderSpec``; counts encoded samples."""

    def __init__(self, spec: EncoderSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        dims = (spec.input_dim, *spec.widths)
        self._weights = [
            rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
            for fan_in, fan_out in zip(dims[:-1], dims[1:])
        ]
        self.calls = 0

    def encode_batch(self, xs: np.ndarray) -> np.ndarray:
        h = np.asarray(xs, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.spec.input_dim:
            raise InvalidArgument(f"expected (n, {self.spec.input_dim}) inputs, got {h.shape}")
        for w in self._weights:
            h = np.tanh(h @ w)
        norms = np.linalg.norm(h, axis=1, keepdims=True)
        # All-zero codes only arise from all-zero input; map them to a fixed unit vector.
        zero = norms[:, 0] == 0
        if zero.any():
            h[zero] = 0.0
            h[zero, 0] = 1.0
            norms[zero] = 1.0
        self.calls += len(h)
        return h / norms

    def encode(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise InvalidArgument("encode takes a single sample")
        return self.encode_batch(x[None, :])[0]


def encode(spec: EncoderSpec, x) -> np.ndarray:
    return Encoder(spec).encode(x)


def save_hashes(hashes: Mapping[SampleIndex, np.ndarray], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for (k, i), h in sorted(hashes.items()):
            fh.write(f"{k}\t{i}\t{','.join(repr(float(v)) for v in h)}\n")


def load_hashes(path: str | Path, renorm_tol: float = 1e-6) -> dict[SampleIndex, np.ndarray]:
    out: dict[SampleIndex, np.ndarray] = {}
    dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"expected 3 tab-separated fields, got {len(parts)}", line=lineno)
            try:
                key = (int(parts[0]), int(parts[1]))
                vec = np.array([float(v) for v in parts[2].split(",")], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(f"bad number: {exc}", line=lineno) from None
            if not np.all(np.isfinite(vec)):
                raise ParseError("non-finite hash entry", line=lineno)
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise FormatError(f"line {lineno}: hash has dim {len(vec)}, earlier records have {dim}")
            if key in out:
                raise FormatError(f"line {lineno}: duplicate sample index {key}")
            norm = np.linalg.norm(vec)
            if norm == 0:
                raise FormatError(f"line {lineno}: zero hash vector")
            if abs(norm - 1.0) > renorm_tol:
                vec = vec / norm
            out[key] = vec
    return out
