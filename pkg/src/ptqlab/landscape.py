"""Radial loss profiles ``NLL(w + lambda e)`` parameterized by SNR in dB."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, TextIO

import numpy as np

from . import metrics
from .formats import QuantFormat, quantize_with_scales
from .gptq import frozen_scales, gptq_model
from .toymodel import ToyCheckpoint, apply_weights, eval_nll, grad_nll, hvp, replace_tensors

DEFAULT_GRID_DB = tuple(float(s) for s in range(60, -1, -2))
SLOPE_HALF_WIDTH_DB = 1.0
PROFILE_HEADER = ("kind", "seed", "format", "snr_db", "lambda", "nll")


class ExactQuantization(ValueError):
    """The quantizer reproduced the weights exactly (SQNR = +inf)."""

    def __init__(self, message: str) -> None:
        super().__init__(message)
        self.sqnr_db = math.inf


@dataclass
class RadialProfile:
    kind: str  # "random", "rtn", "gptq", or "taylor1"/"taylor2" variants
    samples: list[tuple[float, float, float]]  # (snr_db, lambda, nll), lambda ascending
    base_nll: float
    seed: int | None = None
    format: str = ""
    meta: dict = field(default_factory=dict)

    def rows(self) -> list[tuple]:
        return [
            (self.kind, "" if self.seed is None else self.seed, self.format, metrics.db_to_str(s), repr(lam), repr(nll))
            for s, lam, nll in self.samples
        ]

    def nll_at(self, snr: float) -> float:
        for s, _, nll in self.samples:
            if s == snr:
                return nll
        raise KeyError(snr)


def write_profiles(profiles: Iterable[RadialProfile], fh: TextIO) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(PROFILE_HEADER)
    for p in profiles:
        writer.writerows(p.rows())


def parse_grid(spec: str) -> list[float]:
    """``"start:stop:step"`` (inclusive, either direction) or a comma list, in dB."""
    spec = spec.strip()
    try:
        if ":" in spec:
            parts = [float(x) for x in spec.split(":")]
            if len(parts) != 3 or parts[2] <= 0 or not all(map(math.isfinite, parts)):
                raise ValueError
            a, b, step = parts
            n = int(math.floor(abs(b - a) / step + 1e-9))
            sign = 1.0 if b >= a else -1.0
            values = [a + sign * i * step for i in range(n + 1)]
        else:
            values = [float(x) for x in spec.split(",") if x.strip()]
    except ValueError:
        raise ValueError(f"malformed SNR grid {spec!r}; expected start:stop:step or a comma list") from None
    if not values or not all(math.isfinite(v) for v in values):
        raise ValueError(f"malformed SNR grid {spec!r}")
    return values


def snr_to_lambda(norm_w: float, snr: float) -> float:
    return norm_w * 10.0 ** (-snr / 20.0)


def sample_direction(D: int, seed: int) -> np.ndarray:
    """Uniform unit vector on the ``D``-sphere (normalized Gaussian)."""
    if D < 1:
        raise ValueError("dimension must be positive")
    v = np.random.default_rng(seed).standard_normal(D)
    return v / np.linalg.norm(v)


def _sorted_grid(grid: Sequence[float]) -> list[float]:
    g = sorted({float(s) for s in grid}, reverse=True)
    if not g:
        raise ValueError("SNR grid must not be empty")
    return g


def _profile(
    loss_at: Callable[[float], float],
    norm_w: float,
    grid: Sequence[float],
    base_nll: float,
    **kw,
) -> RadialProfile:
    samples = [(math.inf, 0.0, base_nll)]
    for s in _sorted_grid(grid):
        lam = snr_to_lambda(norm_w, s)
        samples.append((s, lam, loss_at(lam)))
    return RadialProfile(samples=samples, base_nll=base_nll, **kw)


def _check_direction(ckpt: ToyCheckpoint, direction: np.ndarray) -> np.ndarray:
    d = np.asarray(direction, dtype=np.float64).ravel()
    if d.size != ckpt.n_quantizable:
        raise ValueError(f"direction has length {d.size}, expected {ckpt.n_quantizable}")
    return d


def radial_profile(
    ckpt: ToyCheckpoint,
    direction: np.ndarray,
    snr_grid_db: Sequence[float],
    seqs: np.ndarray,
    kind: str = "random",
    seed: int | None = None,
    fmt: str = "",
    base_nll: float | None = None,
) -> RadialProfile:
    """Validation NLL along ``w + lambda * direction`` at each grid SNR, plus lambda = 0."""
    d = _check_direction(ckpt, direction)
    w = ckpt.flatten()
    if base_nll is None:
        base_nll = eval_nll(ckpt, seqs)
    return _profile(
        lambda lam: eval_nll(apply_weights(ckpt, w + lam * d), seqs),
        float(np.linalg.norm(w)),
        snr_grid_db,
        base_nll,
        kind=kind,
        seed=seed,
        format=fmt,
    )


def quantized_weights(
    ckpt: ToyCheckpoint, fmt: QuantFormat, method: str, calib: np.ndarray | None = None, hessians=None
) -> ToyCheckpoint:
    """RTN (``rtn``/``int_rtn``) or GPTQ quantization of every quantizable matrix."""
    if method in ("rtn", "int_rtn"):
        updates = {
            name: quantize_with_scales(ckpt.tensors[name], frozen_scales(ckpt.tensors[name], fmt), fmt).dequant
            for name in ckpt.quantizable_names()
        }
        return replace_tensors(ckpt, updates)
    if method == "gptq":
        if calib is None and hessians is None:
            raise ValueError("GPTQ needs calibration data")
        return gptq_model(ckpt, fmt, calib, hessians=hessians)[0]
    raise ValueError(f"unknown quantization method {method!r}")


def quantization_direction(
    ckpt: ToyCheckpoint, fmt: QuantFormat, method: str = "rtn", calib: np.ndarray | None = None, hessians=None
) -> tuple[np.ndarray, float]:
    """Unit vector ``(Q(w) - w) / |Q(w) - w|`` and the SQNR of ``Q(w)``."""
    w = ckpt.flatten()
    q = quantized_weights(ckpt, fmt, method, calib, hessians).flatten()
    dw = q - w
    norm = float(np.linalg.norm(dw))
    if norm == 0.0:
        raise ExactQuantization(f"{method} quantization to {fmt.name} is exact")
    return dw / norm, metrics.sqnr_db(w, q)


def taylor_profile(
    ckpt: ToyCheckpoint,
    direction: np.ndarray,
    snr_grid_db: Sequence[float],
    seqs: np.ndarray,
    order: int = 2,
    base_nll: float | None = None,
) -> RadialProfile:
    """First- or second-order expansion of the radial profile around ``w``."""
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    d = _check_direction(ckpt, direction)
    if base_nll is None:
        base_nll = eval_nll(ckpt, seqs)
    slope = float(grad_nll(ckpt, seqs) @ d)
    curv = float(d @ hvp(ckpt, d, seqs)) if order == 2 else 0.0
    prof = _profile(
        lambda lam: base_nll + lam * slope + 0.5 * lam * lam * curv,
        float(np.linalg.norm(ckpt.flatten())),
        snr_grid_db,
        base_nll,
        kind=f"taylor{order}",
    )
    prof.meta.update(gradient=slope, curvature=curv)
    return prof


def central_slope(loss_at_snr: Callable[[float], float], snr: float, half_width_db: float = SLOPE_HALF_WIDTH_DB) -> float:
    """``[L(snr - h) - L(snr + h)] / (2 h)``, positive when loss grows as SNR drops."""
    return (loss_at_snr(snr - half_width_db) - loss_at_snr(snr + half_width_db)) / (2 * half_width_db)


def slope_at_operating_point(
    ckpt: ToyCheckpoint,
    fmt: QuantFormat,
    seqs: np.ndarray,
    half_width_db: float = SLOPE_HALF_WIDTH_DB,
    direction: tuple[np.ndarray, float] | None = None,
) -> float:
    """Radial slope dNLL/dSQNR (nats per dB) along the RTN direction at the RTN SQNR."""
    d, sqnr = direction if direction is not None else quantization_direction(ckpt, fmt, "rtn")
    if math.isinf(sqnr):
        raise ExactQuantization(f"RTN quantization to {fmt.name} is exact")
    w = ckpt.flatten()
    norm_w = float(np.linalg.norm(w))
    return central_slope(
        lambda s: eval_nll(apply_weights(ckpt, w + snr_to_lambda(norm_w, s) * d), seqs),
        sqnr,
        half_width_db,
    )
