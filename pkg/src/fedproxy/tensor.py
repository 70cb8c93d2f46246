"""Dense float32 matrices and deterministic, labeled random streams.

All simulator state lives in 2-D float32 numpy arrays ("matrices").
Arithmetic is deliberately pinned down so that a run is bit-reproducible
across processes, platforms and BLAS thread settings:

* ``matmul`` accumulates in float64 with a fixed summation order (the
  reduction index ascending, innermost) and rounds to float32 once.  It is
  implemented with ``np.einsum`` without the ``optimize`` path, which
  executes that exact order single-threaded and never dispatches to BLAS.
* ``add_scaled`` forms ``x + c*y`` in float64 and rounds once.
* Random draws come from :class:`RandomSource`: a Philox counter-based
  generator keyed by SHA-256 of ``(seed, stream label)``.  Child streams
  are derived by extending the label, never by consuming parent state, so
  parallel consumers cannot perturb each other.

Matrices are treated as immutable values; functions always return fresh
arrays and never write to their inputs.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = [
    "Matrix",
    "RandomSource",
    "ShapeError",
    "add_scaled",
    "as_matrix",
    "gaussian_fill",
    "matmul",
    "require_finite",
]

Matrix = np.ndarray

_U64 = 1 << 64


class ShapeError(ValueError):
    """Raised when matrix dimensions do not line up."""


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> Matrix:
    """Validate and convert ``values`` to a finite 2-D float32 array.

    When ``rows``/``cols`` are given, a flat sequence is reshaped row-major.
    """
    a = np.asarray(values, dtype=np.float32)
    if rows is not None and cols is not None:
        if rows <= 0 or cols <= 0:
            raise ShapeError(f"matrix dimensions must be positive, got {rows}x{cols}")
        if a.size != rows * cols:
            raise ShapeError(f"expected {rows * cols} values for a {rows}x{cols} matrix, got {a.size}")
        a = a.reshape(rows, cols)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={a.ndim}")
    if a.shape[0] == 0 or a.shape[1] == 0:
        raise ShapeError(f"matrix dimensions must be positive, got {a.shape[0]}x{a.shape[1]}")
    require_finite(a, "matrix")
    return a


def require_finite(m: Matrix, name: str) -> None:
    if not np.isfinite(m).all():
        raise ValueError(f"{name} contains non-finite entries")


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with float64 accumulation, rounded once to float32.

    Summation over the inner dimension runs index-ascending in a single
    thread, so results are bit-identical regardless of the host's BLAS or
    thread configuration.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}: "
            f"inner dimensions {a.shape[1]} and {b.shape[0]} differ"
        )
    out = np.einsum("ij,jk->ik", a.astype(np.float64), b.astype(np.float64))
    return out.astype(np.float32)


def add_scaled(x: Matrix, y: Matrix, c: float) -> Matrix:
    """Elementwise ``x + c*y`` in float64, rounded once to float32."""
    if x.shape != y.shape:
        raise ShapeError(f"add_scaled shapes differ: {x.shape[0]}x{x.shape[1]} vs {y.shape[0]}x{y.shape[1]}")
    out = x.astype(np.float64) + float(c) * y.astype(np.float64)
    return out.astype(np.float32)


def gaussian_fill(rows: int, cols: int, mean: float, stddev: float, rng: "RandomSource") -> Matrix:
    """Matrix of Normal(mean, stddev^2) draws from a deterministic stream."""
    if rows <= 0 or cols <= 0:
        raise ShapeError(f"matrix dimensions must be positive, got {rows}x{cols}")
    if not (np.isfinite(mean) and np.isfinite(stddev)):
        raise ValueError("gaussian_fill parameters must be finite")
    if stddev < 0:
        raise ValueError(f"stddev must be >= 0, got {stddev}")
    draws = rng.generator.standard_normal((rows, cols))
    return (draws * stddev + mean).astype(np.float32)


class RandomSource:
    """Seeded, labeled random stream with deterministic child derivation.

    The underlying bit generator is Philox4x64 keyed by
    ``SHA-256(little-endian seed || 0x1f || utf-8 label)``; this mapping is
    part of the reproducibility contract and must stay stable.  Distinct
    labels under one seed give independent streams, and ``child`` extends
    the label path so per-round / per-client streams never interact.
    """

    def __init__(self, seed: int, label: str = "root"):
        seed = int(seed)
        if not 0 <= seed < _U64:
            raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self.label = label
        digest = hashlib.sha256(seed.to_bytes(8, "little") + b"\x1f" + label.encode("utf-8")).digest()
        key = np.frombuffer(digest[:16], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def child(self, *parts: object) -> "RandomSource":
        """Derive an independent stream labeled ``<label>/<part>/...``."""
        suffix = "/".join(str(p) for p in parts)
        return RandomSource(self.seed, f"{self.label}/{suffix}")

    def __repr__(self) -> str:
        return f"RandomSource(seed={self.seed}, label={self.label!r})"
