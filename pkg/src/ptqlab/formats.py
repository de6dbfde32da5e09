"""Block-scaled low-precision tensor formats.

Two families share one descriptor type:

* MX (microscaling) formats ``mxint<P>_<K>`` and ``mxfp<P>_e<E>m<M>_<K>``: every
  contiguous block of ``K`` elements along a row shares an e8m0 power-of-two
  scale, elements are symmetric integers or sign-magnitude minifloats.
* Plain symmetric integer formats ``int<P>_tens``, ``int<P>_chan`` and
  ``int<P>_g<G>``, whose real-valued scales come from :mod:`ptqlab.calibration`.

Quantization always happens in float64; weights stored as float32 are upcast.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass
from functools import lru_cache
from typing import BinaryIO

import numpy as np

MX_INT = "mx_int"
MX_FP = "mx_fp"
PLAIN_INT = "plain_int"

PER_TENSOR = "tens"
PER_CHANNEL = "chan"
PER_GROUP = "group"

MX_BLOCK_SIZES = (16, 32, 64, 128)
E8M0_BIAS = 127
SCALE_EXP_MIN = -127
SCALE_EXP_MAX = 127

_MXINT_RE = re.compile(r"mxint(\d+)_(\d+)")
_MXFP_RE = re.compile(r"mxfp(\d+)_e(\d+)m(\d+)_(\d+)")
_INT_RE = re.compile(r"int(\d+)_(tens|chan|g(\d+))")


class FormatError(ValueError):
    """Raised for malformed or inconsistent format names and descriptors."""


@dataclass(frozen=True)
class QuantFormat:
    family: str
    precision: int
    exp_bits: int = 0
    man_bits: int = 0
    block_size: int = 0
    granularity: str = ""
    group_size: int = 0

    def __post_init__(self) -> None:
        p = self.precision
        if self.family == MX_INT:
            if not 2 <= p <= 8:
                raise FormatError(f"mxint precision must be in [2, 8], got {p}")
            if self.block_size not in MX_BLOCK_SIZES:
                raise FormatError(f"MX block size must be one of {MX_BLOCK_SIZES}, got {self.block_size}")
        elif self.family == MX_FP:
            if self.exp_bits < 1 or self.man_bits < 0:
                raise FormatError("mxfp needs at least one exponent bit and nonnegative mantissa bits")
            if p != 1 + self.exp_bits + self.man_bits:
                raise FormatError(
                    f"mxfp precision {p} != 1 + {self.exp_bits} + {self.man_bits}"
                )
            if self.block_size not in MX_BLOCK_SIZES:
                raise FormatError(f"MX block size must be one of {MX_BLOCK_SIZES}, got {self.block_size}")
        elif self.family == PLAIN_INT:
            if not 2 <= p <= 8:
                raise FormatError(f"int precision must be in [2, 8], got {p}")
            if self.granularity not in (PER_TENSOR, PER_CHANNEL, PER_GROUP):
                raise FormatError(f"unknown granularity {self.granularity!r}")
            if self.granularity == PER_GROUP and self.group_size <= 0:
                raise FormatError("group size must be positive")
        else:
            raise FormatError(f"unknown format family {self.family!r}")

    @property
    def is_mx(self) -> bool:
        return self.family in (MX_INT, MX_FP)

    @property
    def name(self) -> str:
        return format_name(self)

    def __str__(self) -> str:
        return format_name(self)


def parse_format(name: str) -> QuantFormat:
    """Parse a canonical format name such as ``mxfp4_e2m1_128`` or ``int3_g32``."""
    if not isinstance(name, str):
        raise FormatError(f"format name must be a string, got {type(name).__name__}")
    m = _MXINT_RE.fullmatch(name)
    if m:
        return QuantFormat(MX_INT, _positive(m.group(1), name), block_size=_positive(m.group(2), name))
    m = _MXFP_RE.fullmatch(name)
    if m:
        return QuantFormat(
            MX_FP,
            _positive(m.group(1), name),
            exp_bits=_positive(m.group(2), name),
            man_bits=_nonnegative(m.group(3), name),
            block_size=_positive(m.group(4), name),
        )
    m = _INT_RE.fullmatch(name)
    if m:
        p = _positive(m.group(1), name)
        if m.group(2) == PER_TENSOR:
            return QuantFormat(PLAIN_INT, p, granularity=PER_TENSOR)
        if m.group(2) == PER_CHANNEL:
            return QuantFormat(PLAIN_INT, p, granularity=PER_CHANNEL)
        return QuantFormat(PLAIN_INT, p, granularity=PER_GROUP, group_size=_positive(m.group(3), name))
    raise FormatError(f"malformed format name {name!r}")


def _positive(digits: str, name: str) -> int:
    # Leading zeros would break the string round trip.
    if len(digits) > 1 and digits[0] == "0":
        raise FormatError(f"leading zero in {name!r}")
    value = int(digits)
    if value <= 0:
        raise FormatError(f"sizes must be positive in {name!r}")
    return value


def _nonnegative(digits: str, name: str) -> int:
    if len(digits) > 1 and digits[0] == "0":
        raise FormatError(f"leading zero in {name!r}")
    return int(digits)


def format_name(fmt: QuantFormat) -> str:
    if fmt.family == MX_INT:
        return f"mxint{fmt.precision}_{fmt.block_size}"
    if fmt.family == MX_FP:
        return f"mxfp{fmt.precision}_e{fmt.exp_bits}m{fmt.man_bits}_{fmt.block_size}"
    if fmt.granularity == PER_GROUP:
        return f"int{fmt.precision}_g{fmt.group_size}"
    return f"int{fmt.precision}_{fmt.granularity}"


def qmax(fmt: QuantFormat) -> int:
    """Largest integer code magnitude of a symmetric integer element."""
    return 2 ** (fmt.precision - 1) - 1


@lru_cache(maxsize=None)
def _fp_magnitudes(exp_bits: int, man_bits: int) -> np.ndarray:
    # Indexed by the unsigned (exponent, mantissa) bit field; monotone in the index.
    bias = 2 ** (exp_bits - 1) - 1
    mags = np.empty(2 ** (exp_bits + man_bits), dtype=np.float64)
    for e in range(2**exp_bits):
        for m in range(2**man_bits):
            if e == 0:
                v = m * 2.0 ** (1 - bias - man_bits)
            else:
                v = (1 + m / 2**man_bits) * 2.0 ** (e - bias)
            mags[(e << man_bits) | m] = v
    mags.setflags(write=False)
    return mags


def element_grid(fmt: QuantFormat) -> np.ndarray:
    """Sorted array of every representable element value (scale 1)."""
    if fmt.family == MX_INT:
        q = qmax(fmt)
        return np.arange(-q, q + 1, dtype=np.float64)
    if fmt.family == MX_FP:
        mags = _fp_magnitudes(fmt.exp_bits, fmt.man_bits)
        return np.concatenate([-mags[:0:-1], mags])
    raise FormatError("plain int grids depend on a calibrated scale; see ptqlab.calibration")


def grid_max(fmt: QuantFormat) -> float:
    if fmt.family == MX_FP:
        return float(_fp_magnitudes(fmt.exp_bits, fmt.man_bits)[-1])
    return float(qmax(fmt))


def effective_bits(fmt: QuantFormat) -> float:
    """Storage cost per weight including the amortized 8-bit shared scale."""
    if not fmt.is_mx:
        raise FormatError("effective bits are defined for MX formats only")
    return fmt.precision + 8.0 / fmt.block_size


def round_elements(x: np.ndarray, fmt: QuantFormat) -> tuple[np.ndarray, np.ndarray]:
    """Round pre-scaled values onto the element grid of ``fmt``.

    Returns ``(codes, values)``. Integer codes are the signed integer itself;
    minifloat codes are the sign/exponent/mantissa bit pattern. Ties go to the
    even magnitude index (even integer, even mantissa LSB). Values beyond the
    grid saturate.
    """
    x = np.asarray(x, dtype=np.float64)
    if fmt.family in (MX_INT, PLAIN_INT):
        q = qmax(fmt)
        values = np.clip(np.rint(x), -q, q)
        # rint(-0.4) is -0.0; keep zero unsigned
        values = values + 0.0
        return values.astype(np.int16), values
    mags = _fp_magnitudes(fmt.exp_bits, fmt.man_bits)
    a = np.abs(x)
    hi = np.clip(np.searchsorted(mags, a, side="left"), 1, mags.size - 1)
    lo = hi - 1
    d_lo = a - mags[lo]
    d_hi = mags[hi] - a
    take_hi = (d_hi < d_lo) | ((d_hi == d_lo) & (hi % 2 == 0))
    idx = np.where(take_hi, hi, lo)
    negative = (x < 0) & (idx > 0)
    codes = idx | (negative.astype(np.int64) << (fmt.precision - 1))
    values = np.where(negative, -mags[idx], mags[idx])
    return codes.astype(np.int16), values


def code_values(codes: np.ndarray, fmt: QuantFormat) -> np.ndarray:
    """Element values (scale 1) for an array of element codes."""
    codes = np.asarray(codes).astype(np.int64)
    if fmt.family in (MX_INT, PLAIN_INT):
        return codes.astype(np.float64)
    mags = _fp_magnitudes(fmt.exp_bits, fmt.man_bits)
    sign_bit = 1 << (fmt.precision - 1)
    mag = mags[codes & (sign_bit - 1)]
    return np.where(codes & sign_bit, -mag, mag)


@dataclass
class QuantizedTensor:
    """Quantized weight matrix.

    ``scales`` holds e8m0 codes of shape ``(rows, ceil(cols / K))`` for MX
    formats and float32 granule scales for plain int formats (``(1, 1)`` per
    tensor, ``(rows, 1)`` per channel, ``(rows, cols / G)`` per group).
    """

    format: QuantFormat
    shape: tuple[int, int]
    scales: np.ndarray
    codes: np.ndarray
    dequant: np.ndarray

    @property
    def n_scales(self) -> int:
        return int(self.scales.size)


def _check_matrix(weights: np.ndarray) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 1:
        w = w[None, :]
    if w.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {w.shape}")
    if w.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights contain non-finite values")
    return w


def n_blocks(cols: int, block_size: int) -> int:
    return -(-cols // block_size)


def block_exponents(weights: np.ndarray, fmt: QuantFormat) -> np.ndarray:
    """Shared scale exponents, shape ``(rows, n_blocks)``, chosen so nothing clips.

    ``e`` is the smallest integer with ``max|block| / 2**e <= gmax``, clamped
    to the e8m0 range; all-zero blocks get the minimum exponent.
    """
    w = _check_matrix(weights)
    rows, cols = w.shape
    k = fmt.block_size
    nb = n_blocks(cols, k)
    padded = np.zeros((rows, nb * k))
    padded[:, :cols] = np.abs(w)
    amax = padded.reshape(rows, nb, k).max(axis=2)
    gmax = grid_max(fmt)
    nonzero = amax > 0
    safe = np.where(nonzero, amax, 1.0)
    e = np.ceil(np.log2(safe) - np.log2(gmax)).astype(np.int64)  # safe / gmax can underflow
    # log2 is inexact near powers of two; settle on the minimal no-clip exponent.
    for _ in range(4):
        up = np.ldexp(safe, -e) > gmax
        down = np.ldexp(safe, -(e - 1)) <= gmax
        if not (up.any() or down.any()):
            break
        e = e + up - down
    e = np.where(nonzero, e, SCALE_EXP_MIN)
    return np.clip(e, SCALE_EXP_MIN, SCALE_EXP_MAX)


def scale_matrix(q_scales: np.ndarray, fmt: QuantFormat, shape: tuple[int, int]) -> np.ndarray:
    """Expand stored scales to one real scale per element."""
    rows, cols = shape
    if fmt.is_mx:
        s = np.ldexp(1.0, q_scales.astype(np.int64) - E8M0_BIAS)
        return np.repeat(s, fmt.block_size, axis=1)[:, :cols]
    s = np.asarray(q_scales, dtype=np.float64)
    if fmt.granularity == PER_TENSOR:
        return np.full(shape, s.reshape(-1)[0])
    if fmt.granularity == PER_CHANNEL:
        return np.repeat(s.reshape(rows, 1), cols, axis=1)
    return np.repeat(s.reshape(rows, -1), fmt.group_size, axis=1)


def quantize_with_scales(weights: np.ndarray, scales: np.ndarray, fmt: QuantFormat) -> QuantizedTensor:
    """Round ``weights`` onto fixed (frozen) scales."""
    w = _check_matrix(weights)
    s = scale_matrix(scales, fmt, w.shape)
    codes, values = round_elements(w / s, fmt)
    return QuantizedTensor(fmt, w.shape, scales, codes, values * s)


def rtn_quantize(weights: np.ndarray, fmt: QuantFormat) -> QuantizedTensor:
    """Round-to-nearest quantization onto an MX format."""
    if not fmt.is_mx:
        raise FormatError("rtn_quantize handles MX formats; use calibration for plain int")
    w = _check_matrix(weights)
    e = block_exponents(w, fmt)
    return quantize_with_scales(w, (e + E8M0_BIAS).astype(np.uint8), fmt)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    s = scale_matrix(q.scales, q.format, q.shape)
    return code_values(q.codes, q.format) * s


def quantize_dequantize(weights: np.ndarray, fmt: QuantFormat) -> np.ndarray:
    """RTN fake-quantization preserving the input's shape (vectors included)."""
    w = np.asarray(weights, dtype=np.float64)
    return rtn_quantize(w.reshape(-1, w.shape[-1]) if w.ndim > 1 else w[None], fmt).dequant.reshape(w.shape)


# ---------------------------------------------------------------------------
# On-disk packing
# ---------------------------------------------------------------------------

_MAGIC = b"PTQT"


def _pack_codes(codes: np.ndarray, bits: int) -> np.ndarray:
    u = codes.astype(np.int64) & ((1 << bits) - 1)
    shifts = np.arange(bits - 1, -1, -1)
    bit_planes = (u[..., None] >> shifts) & 1
    return np.packbits(bit_planes.reshape(codes.shape[0], -1).astype(np.uint8), axis=1)


def _unpack_codes(packed: np.ndarray, rows: int, cols: int, bits: int, signed: bool) -> np.ndarray:
    bit_planes = np.unpackbits(packed, axis=1)[:, : cols * bits].reshape(rows, cols, bits)
    weights = 1 << np.arange(bits - 1, -1, -1)
    u = (bit_planes.astype(np.int64) * weights).sum(axis=2)
    if signed:
        u = np.where(u >= 1 << (bits - 1), u - (1 << bits), u)
    return u.astype(np.int16)


def write_packed(q: QuantizedTensor, fh: BinaryIO) -> None:
    """Serialize ``q``: header, scales (row-major), then P-bit codes MSB-first per row."""
    rows, cols = q.shape
    header = json.dumps({"format": q.format.name, "rows": rows, "cols": cols}).encode()
    fh.write(_MAGIC + struct.pack("<I", len(header)) + header)
    if q.format.is_mx:
        fh.write(np.ascontiguousarray(q.scales, dtype=np.uint8).tobytes())
    else:
        fh.write(np.ascontiguousarray(q.scales, dtype="<f4").tobytes())
    fh.write(_pack_codes(q.codes, q.format.precision).tobytes())


def read_packed(fh: BinaryIO) -> QuantizedTensor:
    if fh.read(4) != _MAGIC:
        raise ValueError("not a packed quantized tensor")
    (n,) = struct.unpack("<I", fh.read(4))
    header = json.loads(fh.read(n))
    fmt = parse_format(header["format"])
    rows, cols = header["rows"], header["cols"]
    if fmt.is_mx:
        nb = n_blocks(cols, fmt.block_size)
        scales = np.frombuffer(fh.read(rows * nb), dtype=np.uint8).reshape(rows, nb).copy()
    else:
        shape = _int_scale_shape(fmt, rows, cols)
        count = shape[0] * shape[1]
        scales = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    row_bytes = -(-cols * fmt.precision // 8)
    packed = np.frombuffer(fh.read(rows * row_bytes), dtype=np.uint8).reshape(rows, row_bytes)
    signed = fmt.family != MX_FP
    codes = _unpack_codes(packed, rows, cols, fmt.precision, signed)
    s = scale_matrix(scales, fmt, (rows, cols))
    return QuantizedTensor(fmt, (rows, cols), scales, codes, code_values(codes, fmt) * s)


def _int_scale_shape(fmt: QuantFormat, rows: int, cols: int) -> tuple[int, int]:
    if fmt.granularity == PER_TENSOR:
        return (1, 1)
    if fmt.granularity == PER_CHANNEL:
        return (rows, 1)
    if cols % fmt.group_size:
        raise FormatError(f"group size {fmt.group_size} does not divide {cols} columns")
    return (rows, cols // fmt.group_size)
