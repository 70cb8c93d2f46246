"""Block-wise absmax quantization onto "standard number" codebooks.

A codebook V is a sorted list of reals in [-1, 1] that always contains
-1, 0 and +1.  To quantize a matrix: flatten it row-major, cut the flat
vector into consecutive blocks of ``block_size`` elements (the final block
may be shorter), divide each block by its largest absolute value z_l, and
replace every normalized entry with the nearest codebook value.  Scales
and code indices together form a :class:`QuantizedTensor`; reconstruction
multiplies each looked-up value by its block scale.

Because 0 is always in V and normalization never changes signs, a nonzero
entry is never reconstructed with the opposite sign, and every
reconstruction error is bounded by z_l times half the largest gap between
adjacent codebook values.

Nearest-value semantics are exact: normalized entries are float32, the
distances to float32 codebook values are formed in float64 (which
represents those differences exactly), and ties resolve toward the value
of smaller absolute magnitude, i.e. toward zero.

The serialized form ("FLPQ") is little-endian:

    magic "FLPQ" | version u16 = 1 | rows u32 | cols u32 | block_size u32
    | value_count u16 | V as value_count x float32 | scale_count u32
    | scales as scale_count x float32
    | codes bit-packed LSB-first, ceil(log2(value_count)) bits each,
      zero-padded to a byte boundary

A full-precision variant shares the header with ``block_size = 0`` and
``value_count = 0``, followed directly by rows*cols float32 values; it is
used for model snapshots and for broadcasts when quantization is disabled
(see :func:`serialize_matrix`).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .tensor import Matrix, require_finite

__all__ = [
    "ErrorStats",
    "FormatError",
    "IntegrityError",
    "QuantizedTensor",
    "StandardNumberSet",
    "build_standard_set",
    "dequantize",
    "deserialize",
    "deserialize_matrix",
    "max_gap",
    "nearest_code",
    "nearest_codes",
    "quantization_error",
    "quantize",
    "serialize",
    "serialize_matrix",
]

MAGIC = b"FLPQ"
VERSION = 1
DEFAULT_BLOCK_SIZE = 256

_HEADER = struct.Struct("<4sHIIIH")
_U32 = struct.Struct("<I")

# Bit-width 1..3 codebooks are fixed tables; see build_standard_set for w >= 4.
_CANONICAL_TABLES = {
    1: (-1.0, 0.0, 1.0),
    2: (-1.0, 0.0, 0.33, 1.0),
    3: (-1.0, -0.47, -0.21, 0.0, 0.16, 0.33, 0.56, 1.0),
}


class FormatError(ValueError):
    """Raised when an FLPQ payload cannot be parsed."""


class IntegrityError(ValueError):
    """Raised when a quantized tensor's internal state is inconsistent."""


@dataclass(frozen=True)
class StandardNumberSet:
    """Sorted quantization codebook over [-1, 1] containing -1, 0 and 1."""

    values: np.ndarray
    bit_width: int | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        object.__setattr__(self, "values", v)
        if v.ndim != 1 or v.size < 3:
            raise ValueError("codebook needs at least the three anchor values -1, 0, 1")
        if not np.all(np.diff(v) > 0):
            raise ValueError("codebook values must be strictly increasing")
        if v[0] != -1.0 or v[-1] != 1.0 or not np.any(v == 0.0):
            raise ValueError("codebook must start at -1, end at 1 and contain 0")
        if self.bit_width is not None and self.bit_width >= 2 and v.size != 2 ** self.bit_width:
            raise ValueError(f"canonical codebook for w={self.bit_width} must have {2 ** self.bit_width} values")

    @property
    def zero_index(self) -> int:
        return int(np.flatnonzero(self.values == 0.0)[0])

    @property
    def code_bits(self) -> int:
        """Storage bits per code: ceil(log2 |V|)."""
        return max(1, (len(self.values) - 1).bit_length())

    def __len__(self) -> int:
        return len(self.values)

    def __eq__(self, other) -> bool:
        if not isinstance(other, StandardNumberSet):
            return NotImplemented
        return np.array_equal(self.values, other.values) and self.bit_width == other.bit_width

    def __hash__(self):
        return hash((self.values.tobytes(), self.bit_width))


def build_standard_set(w: int) -> StandardNumberSet:
    """Codebook for bit-width ``w`` (1 <= w <= 8).

    w in {1, 2, 3} returns the fixed tables.  Larger widths use evenly
    spaced standard-normal quantiles, normalized so the extremes land on
    -1/+1, with 0 inserted at the center position: parameters are roughly
    normal, so codebook mass should concentrate near zero.
    """
    if not 1 <= int(w) <= 8:
        raise ValueError(f"bit width must be in 1..8, got {w}")
    w = int(w)
    if w in _CANONICAL_TABLES:
        return StandardNumberSet(np.array(_CANONICAL_TABLES[w], dtype=np.float32), bit_width=w)
    half = 2 ** (w - 1)
    tail = 1.0 / (2.0 * 2 ** w)
    ppf = NormalDist().inv_cdf
    neg = np.array([ppf(p) for p in np.linspace(tail, 0.5, half)[:-1]])
    pos = np.array([ppf(p) for p in np.linspace(0.5, 1.0 - tail, half + 1)[1:]])
    neg /= -neg[0]
    pos /= pos[-1]
    values = np.concatenate([neg, [0.0], pos]).astype(np.float32)
    return StandardNumberSet(values, bit_width=w)


def max_gap(number_set: StandardNumberSet) -> float:
    """Largest spacing between adjacent codebook values (error bound: z*gap/2)."""
    return float(np.diff(number_set.values.astype(np.float64)).max())


def nearest_codes(xs: np.ndarray, number_set: StandardNumberSet) -> np.ndarray:
    """Vectorized nearest-value lookup with ties toward smaller magnitude."""
    v = number_set.values.astype(np.float64)
    x = np.asarray(xs, dtype=np.float32).astype(np.float64)
    hi = np.clip(np.searchsorted(v, x, side="left"), 0, len(v) - 1)
    lo = np.clip(hi - 1, 0, len(v) - 1)
    d_lo = np.abs(x - v[lo])
    d_hi = np.abs(v[hi] - x)
    pick_hi = d_hi < d_lo
    tie = d_hi == d_lo
    pick_hi |= tie & (np.abs(v[hi]) < np.abs(v[lo]))
    return np.where(pick_hi, hi, lo).astype(np.uint8)


def nearest_code(x: float, number_set: StandardNumberSet) -> int:
    """Index of the codebook value closest to ``x`` (|x| <= 1)."""
    return int(nearest_codes(np.array([x], dtype=np.float32), number_set)[0])


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    """Codes + per-block scales for one quantized rows x cols matrix."""

    rows: int
    cols: int
    block_size: int
    codebook: StandardNumberSet
    codes: np.ndarray = field(repr=False)
    scales: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0:
            raise IntegrityError(f"dimensions must be positive, got {self.rows}x{self.cols}")
        if self.block_size <= 0:
            raise IntegrityError(f"block size must be positive, got {self.block_size}")
        codes = np.asarray(self.codes, dtype=np.uint8)
        scales = np.asarray(self.scales, dtype=np.float32)
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "scales", scales)
        n = self.rows * self.cols
        if codes.shape != (n,):
            raise IntegrityError(f"expected {n} codes, got {codes.shape}")
        if codes.size and codes.max() >= len(self.codebook):
            raise IntegrityError(
                f"code index {int(codes.max())} exceeds codebook size {len(self.codebook)}"
            )
        expected_blocks = -(-n // self.block_size)
        if scales.shape != (expected_blocks,):
            raise IntegrityError(f"expected {expected_blocks} scales, got {scales.shape}")
        if not np.isfinite(scales).all() or (scales < 0).any():
            raise IntegrityError("scales must be finite and non-negative")

    @property
    def element_count(self) -> int:
        return self.rows * self.cols

    @property
    def block_count(self) -> int:
        return len(self.scales)

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return (
            (self.rows, self.cols, self.block_size) == (other.rows, other.cols, other.block_size)
            and self.codebook == other.codebook
            and np.array_equal(self.codes, other.codes)
            and np.array_equal(self.scales, other.scales)
        )


def quantize(x: Matrix, number_set: StandardNumberSet, block_size: int = DEFAULT_BLOCK_SIZE) -> QuantizedTensor:
    """Block-wise absmax quantization of a finite float32 matrix.

    Each block is scaled by its largest absolute value and rounded to the
    nearest codebook entries; an all-zero block stores scale 0 with every
    code pointing at the codebook's zero.
    """
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={x.ndim}")
    if block_size <= 0:
        raise ValueError(f"block size must be positive, got {block_size}")
    x = np.ascontiguousarray(x, dtype=np.float32)
    require_finite(x, "quantize input")
    rows, cols = x.shape
    flat = x.reshape(-1)
    n = flat.size
    n_blocks = -(-n // block_size)
    padded = np.zeros(n_blocks * block_size, dtype=np.float32)
    padded[:n] = flat
    blocks = padded.reshape(n_blocks, block_size)
    scales = np.abs(blocks).max(axis=1)
    nonzero = scales > 0
    safe = np.where(nonzero, scales, 1.0).astype(np.float32)
    normalized = (blocks / safe[:, None]).astype(np.float32)
    codes = nearest_codes(normalized.reshape(-1), number_set).reshape(n_blocks, block_size)
    codes[~nonzero, :] = number_set.zero_index
    return QuantizedTensor(
        rows=rows,
        cols=cols,
        block_size=block_size,
        codebook=number_set,
        codes=codes.reshape(-1)[:n].copy(),
        scales=scales,
    )


def dequantize(q: QuantizedTensor) -> Matrix:
    """Reconstruct scales[block(i)] * V[codes[i]], reshaped rows x cols."""
    if q.codes.size and q.codes.max() >= len(q.codebook):
        raise IntegrityError(
            f"code index {int(q.codes.max())} exceeds codebook size {len(q.codebook)}"
        )
    values = q.codebook.values[q.codes]
    per_element = np.repeat(q.scales, q.block_size)[: q.element_count]
    return (values * per_element).astype(np.float32).reshape(q.rows, q.cols)


@dataclass(frozen=True)
class ErrorStats:
    """Reconstruction error summary for one quantization call."""

    max_abs: float
    mean_abs: float
    sign_agreement_rate: float


def quantization_error(
    x: Matrix, number_set: StandardNumberSet, block_size: int = DEFAULT_BLOCK_SIZE
) -> ErrorStats:
    """Measure |x - dequantize(quantize(x))| and sign agreement."""
    recon = dequantize(quantize(x, number_set, block_size))
    diff = np.abs(x.astype(np.float64) - recon.astype(np.float64))
    agree = (x.astype(np.float64) * recon.astype(np.float64)) >= 0.0
    return ErrorStats(
        max_abs=float(diff.max()),
        mean_abs=float(diff.mean()),
        sign_agreement_rate=float(agree.mean()),
    )


def _pack_codes(codes: np.ndarray, bits: int) -> bytes:
    bit_matrix = np.unpackbits(codes[:, None], axis=1, bitorder="little")[:, :bits]
    return np.packbits(bit_matrix.reshape(-1), bitorder="little").tobytes()


def _unpack_codes(raw: bytes, count: int, bits: int) -> np.ndarray:
    bit_stream = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")
    needed = count * bits
    if bit_stream.size < needed:
        raise FormatError("truncated code section")
    if bit_stream[needed:].any():
        raise FormatError("nonzero padding bits in code section")
    bit_matrix = bit_stream[:needed].reshape(count, bits)
    padded = np.zeros((count, 8), dtype=np.uint8)
    padded[:, :bits] = bit_matrix
    return np.packbits(padded, axis=1, bitorder="little")[:, 0]


def serialize(q: QuantizedTensor) -> bytes:
    """Encode a QuantizedTensor in the FLPQ wire format."""
    head = _HEADER.pack(MAGIC, VERSION, q.rows, q.cols, q.block_size, len(q.codebook))
    parts = [
        head,
        q.codebook.values.astype("<f4").tobytes(),
        _U32.pack(q.block_count),
        q.scales.astype("<f4").tobytes(),
        _pack_codes(q.codes, q.codebook.code_bits),
    ]
    return b"".join(parts)


def _read(data: bytes, offset: int, size: int, what: str) -> tuple[bytes, int]:
    if len(data) < offset + size:
        raise FormatError(f"truncated payload: missing {what}")
    return data[offset : offset + size], offset + size


def _parse_header(data: bytes) -> tuple[int, int, int, int, int]:
    raw, offset = _read(data, 0, _HEADER.size, "header")
    magic, version, rows, cols, block_size, value_count = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}")
    if rows == 0 or cols == 0:
        raise FormatError(f"dimensions must be positive, got {rows}x{cols}")
    return rows, cols, block_size, value_count, offset


def deserialize(data: bytes) -> QuantizedTensor:
    """Parse an FLPQ payload; the exact inverse of :func:`serialize`."""
    rows, cols, block_size, value_count, offset = _parse_header(data)
    if value_count == 0:
        raise FormatError("full-precision payload: use deserialize_matrix")
    if value_count < 3:
        raise FormatError(f"codebook with {value_count} values cannot hold -1, 0, 1")
    if block_size == 0:
        raise FormatError("block size must be positive for a quantized payload")
    raw, offset = _read(data, offset, 4 * value_count, "codebook")
    values = np.frombuffer(raw, dtype="<f4")
    try:
        codebook = StandardNumberSet(values)
    except ValueError as exc:
        raise FormatError(f"invalid codebook: {exc}") from exc
    raw, offset = _read(data, offset, 4, "scale count")
    (scale_count,) = _U32.unpack(raw)
    expected_blocks = -(-(rows * cols) // block_size)
    if scale_count != expected_blocks:
        raise FormatError(f"scale count {scale_count} does not match {expected_blocks} blocks")
    raw, offset = _read(data, offset, 4 * scale_count, "scales")
    scales = np.frombuffer(raw, dtype="<f4")
    n = rows * cols
    bits = codebook.code_bits
    code_bytes = -(-n * bits // 8)
    raw, offset = _read(data, offset, code_bytes, "codes")
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes after codes")
    codes = _unpack_codes(raw, n, bits)
    if codes.size and codes.max() >= value_count:
        raise FormatError(f"code index {int(codes.max())} exceeds codebook size {value_count}")
    try:
        return QuantizedTensor(rows, cols, block_size, codebook, codes, scales)
    except IntegrityError as exc:
        raise FormatError(str(exc)) from exc


def serialize_matrix(m: Matrix) -> bytes:
    """Encode a full-precision matrix in the FLPQ raw variant."""
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={m.ndim}")
    m = np.ascontiguousarray(m, dtype=np.float32)
    require_finite(m, "matrix payload")
    head = _HEADER.pack(MAGIC, VERSION, m.shape[0], m.shape[1], 0, 0)
    return head + m.astype("<f4").tobytes()


def deserialize_matrix(data: bytes) -> Matrix:
    """Parse an FLPQ raw (full-precision) payload."""
    rows, cols, block_size, value_count, offset = _parse_header(data)
    if value_count != 0 or block_size != 0:
        raise FormatError("quantized payload: use deserialize")
    raw, offset = _read(data, offset, 4 * rows * cols, "matrix values")
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes after values")
    values = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    if not np.isfinite(values).all():
        raise FormatError("matrix payload contains non-finite values")
    return values.reshape(rows, cols)


def payload_stats(data: bytes) -> tuple[int, int]:
    """(element count, data bits) of one payload: scales+codes, or raw values.

    Header and codebook bytes are bookkeeping, not per-element data, and are
    excluded so that the disabled-quantization reduction factor is exactly 1.
    """
    rows, cols, block_size, value_count, offset = _parse_header(data)
    n = rows * cols
    if value_count == 0:
        return n, 32 * n
    scale_count = -(-n // block_size)
    bits = max(1, (int(value_count) - 1).bit_length())
    code_bytes = -(-n * bits // 8)
    return n, 8 * (4 * scale_count + code_bytes)
