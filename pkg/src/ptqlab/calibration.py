"""MSE-calibrated symmetric integer quantizers (no zero point).

A granule is the whole tensor (``tens``), one row (``chan``) or ``G``
consecutive columns within a row (``g<G>``). Each granule gets one positive
scale picked from ``t * max|granule| / qmax`` for ``t = 0.01 .. 1.00``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .formats import (
    PER_CHANNEL,
    PER_GROUP,
    PER_TENSOR,
    PLAIN_INT,
    FormatError,
    QuantFormat,
    QuantizedTensor,
    _check_matrix,
    quantize_with_scales,
    qmax,
)

N_CANDIDATES = 100
_F32_TINY = np.finfo(np.float32).smallest_subnormal
_F32_MAX = np.finfo(np.float32).max


@dataclass
class IntQuantizer:
    format: QuantFormat
    scales: np.ndarray  # float32, shape (rows or 1, granules per row)
    fractions: np.ndarray  # chosen t per granule, same shape
    warnings: list[str] = field(default_factory=list)


def _granules(w: np.ndarray, fmt: QuantFormat) -> tuple[np.ndarray, tuple[int, int]]:
    rows, cols = w.shape
    if fmt.granularity == PER_TENSOR:
        return w.reshape(1, -1), (1, 1)
    if fmt.granularity == PER_CHANNEL:
        return w, (rows, 1)
    g = fmt.group_size
    if cols % g:
        raise FormatError(f"group size {g} does not divide the input dimension {cols}")
    return w.reshape(rows * (cols // g), g), (rows, cols // g)


def calibrate(weights: np.ndarray, fmt: QuantFormat) -> IntQuantizer:
    """Pick per-granule scales minimizing the weight quantization MSE."""
    if fmt.family != PLAIN_INT:
        raise FormatError(f"calibrate needs a plain int format, got {fmt.name}")
    w = _check_matrix(weights)
    gran, shape = _granules(w, fmt)
    q = qmax(fmt)
    amax = np.abs(gran).max(axis=1)
    zero = amax == 0
    base = np.where(zero, 1.0, amax) / q

    best_err = np.full(gran.shape[0], np.inf)
    best_scale = np.ones(gran.shape[0], dtype=np.float32)
    best_t = np.ones(gran.shape[0])
    for j in range(1, N_CANDIDATES + 1):
        t = j / N_CANDIDATES
        with np.errstate(over="ignore"):
            # keep float32 scales positive and finite for extreme magnitudes
            s = np.clip((t * base).astype(np.float32), _F32_TINY, _F32_MAX)
        s64 = s.astype(np.float64)[:, None]
        deq = np.clip(np.rint(gran / s64), -q, q) * s64
        err = np.sum((gran - deq) ** 2, axis=1)
        # ascending t with <= keeps the largest t among ties
        better = err <= best_err
        best_err = np.where(better, err, best_err)
        best_scale = np.where(better, s, best_scale)
        best_t = np.where(better, t, best_t)

    warnings = []
    if zero.any():
        best_scale = np.where(zero, np.float32(1.0), best_scale)
        for idx in np.flatnonzero(zero):
            warnings.append(f"granule {int(idx)} is all zeros; scale set to 1")
    return IntQuantizer(
        fmt,
        best_scale.astype(np.float32).reshape(shape),
        best_t.reshape(shape),
        warnings,
    )


def quantize_int(weights: np.ndarray, quantizer: IntQuantizer) -> QuantizedTensor:
    w = _check_matrix(weights)
    rows, cols = w.shape
    s = quantizer.scales
    fmt = quantizer.format
    expected = _granules(np.zeros((rows, cols)), fmt)[1]
    if s.shape != expected:
        raise ValueError(f"quantizer scales {s.shape} do not match weights {w.shape}")
    return quantize_with_scales(w, s, fmt)


def int_rtn(weights: np.ndarray, fmt: QuantFormat) -> QuantizedTensor:
    """Calibrate then quantize in one step."""
    return quantize_int(weights, calibrate(weights, fmt))
