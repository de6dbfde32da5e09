"""Norm ratios in decibels and log-log power-law fits."""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

INF_DB = math.inf


def _norm(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    return float(math.sqrt(np.dot(x, x)))


def snr_db(w: np.ndarray, dw: np.ndarray) -> float:
    """``20 log10(||w|| / ||dw||)``; ``inf`` when ``dw`` is exactly zero."""
    w = np.asarray(w, dtype=np.float64)
    dw = np.asarray(dw, dtype=np.float64)
    if w.size != dw.size:
        raise ValueError(f"length mismatch: {w.size} vs {dw.size}")
    signal = _norm(w)
    if signal == 0.0:
        raise ValueError("signal has zero norm")
    noise = _norm(dw)
    if noise == 0.0:
        return INF_DB
    return 20.0 * math.log10(signal / noise)


def sqnr_db(w: np.ndarray, q_of_w: np.ndarray) -> float:
    w = np.asarray(w, dtype=np.float64)
    q = np.asarray(q_of_w, dtype=np.float64)
    if w.size != q.size:
        raise ValueError(f"length mismatch: {w.size} vs {q.size}")
    return snr_db(w, q.reshape(w.shape) - w)


def db_to_str(value: float) -> str:
    """CSV form of a dB value; the +inf sentinel is written as ``inf``."""
    if math.isinf(value) and value > 0:
        return "inf"
    return repr(float(value))


def db_from_str(text: str) -> float:
    return math.inf if text.strip() == "inf" else float(text)


def fit_power_law(points: Iterable[Sequence[float]]) -> tuple[float, float, float]:
    """Least-squares fit of ``y = c * x**a`` in log space.

    Returns ``(c, a, rms_residual)`` with the residual measured in natural-log
    units.
    """
    pts = np.asarray(list(points), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
        raise ValueError("need at least two (x, y) points")
    if np.any(pts <= 0):
        raise ValueError("power-law fit needs positive coordinates")
    lx, ly = np.log(pts[:, 0]), np.log(pts[:, 1])
    if np.ptp(lx) == 0:
        raise ValueError("x values must be distinct")
    design = np.stack([np.ones_like(lx), lx], axis=1)
    (log_c, a), *_ = np.linalg.lstsq(design, ly, rcond=None)
    resid = ly - (log_c + a * lx)
    return float(math.exp(log_c)), float(a), float(math.sqrt(np.mean(resid**2)))
