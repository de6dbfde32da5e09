"""GPTQ with a per-layer dampening search on frozen MX or calibrated-int grids.

Hessians of every quantizable layer are accumulated once on the unquantized
network. Each layer then runs the column-sequential GPTQ sweep for every
dampening candidate, plus plain RTN as a fallback, and keeps whichever gives
the lowest output MSE on the calibration activations.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import metrics
from .calibration import calibrate
from .formats import (
    E8M0_BIAS,
    QuantFormat,
    QuantizedTensor,
    block_exponents,
    quantize_with_scales,
    round_elements,
    scale_matrix,
)
from .toymodel import ToyCheckpoint, capture_inputs, replace_tensors

log = logging.getLogger(__name__)

DAMP_GRID = tuple(10.0**k for k in range(-3, 5))


class GptqError(RuntimeError):
    pass


@dataclass
class LayerHessian:
    """``H = sum X X^T`` over calibration input vectors (columns of ``X``)."""

    layer_id: str
    H: np.ndarray
    n_samples: int

    @property
    def cols(self) -> int:
        return self.H.shape[0]


class HessianAccumulator:
    def __init__(self, layer_id: str = "") -> None:
        self.layer_id = layer_id
        self._H: np.ndarray | None = None
        self.n_samples = 0

    def add(self, x: np.ndarray) -> None:
        """Add a batch ``x`` of shape ``(cols, batch)``."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError("Hessian batches must be 2-D (cols x batch)")
        if self._H is None:
            self._H = np.zeros((x.shape[0], x.shape[0]))
        elif x.shape[0] != self._H.shape[0]:
            raise ValueError(f"batch has {x.shape[0]} rows, expected {self._H.shape[0]}")
        self._H += x @ x.T
        self.n_samples += x.shape[1]

    def result(self) -> LayerHessian:
        if self._H is None or self.n_samples == 0:
            raise ValueError(f"no calibration inputs for layer {self.layer_id!r}")
        return LayerHessian(self.layer_id, self._H.copy(), self.n_samples)


def accumulate_hessian(batches: Iterable[np.ndarray], layer_id: str = "") -> LayerHessian:
    acc = HessianAccumulator(layer_id)
    for x in batches:
        acc.add(x)
    return acc.result()


@dataclass
class GptqResult:
    quantized: QuantizedTensor
    chosen_damp: float | None  # None means the RTN fallback won
    rtn_mse: float
    gptq_mse: float
    seconds: float
    scores: dict[str, float] = field(default_factory=dict)

    @property
    def damp_label(self) -> str:
        return "rtn" if self.chosen_damp is None else repr(self.chosen_damp)


def frozen_scales(W: np.ndarray, fmt: QuantFormat) -> np.ndarray:
    """Scales used for the whole sweep: RTN block scales or calibrated int scales."""
    if fmt.is_mx:
        return (block_exponents(W, fmt) + E8M0_BIAS).astype(np.uint8)
    return calibrate(W, fmt).scales


def output_mse(W: np.ndarray, W_hat: np.ndarray, H: LayerHessian) -> float:
    """``||W X - W_hat X||^2 / n`` evaluated through the accumulated Hessian."""
    d = np.asarray(W, dtype=np.float64) - W_hat
    return float(np.sum((d @ H.H) * d) / H.n_samples)


def _inverse_cholesky(H: np.ndarray, damp: float) -> np.ndarray | None:
    """Upper factor ``U`` with ``U^T U = (H + damp * mean(diag H) I)^-1``."""
    n = H.shape[0]
    lam = damp * float(np.mean(np.diag(H)))
    Hd = H + lam * np.eye(n)
    try:
        L = np.linalg.cholesky(Hd)
        L_inv = np.linalg.solve(L, np.eye(n)) if n else L
        Hinv = L_inv.T @ L_inv
        Hinv = (Hinv + Hinv.T) / 2
        U = np.linalg.cholesky(Hinv).T
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(U)):
        return None
    return U


def _sweep(W: np.ndarray, factors: np.ndarray, smat: np.ndarray, fmt: QuantFormat) -> tuple[np.ndarray, np.ndarray]:
    """Column-sequential quantization for a stack of candidates at once.

    ``factors`` has shape ``(A, cols, cols)``; returns codes and dequantized
    weights of shape ``(A, rows, cols)``. Candidates never interact, so each
    slice equals a single-candidate run.
    """
    A = factors.shape[0]
    rows, cols = W.shape
    work = np.broadcast_to(W, (A, rows, cols)).copy()
    codes = np.empty((A, rows, cols), dtype=np.int16)
    deq = np.empty((A, rows, cols))
    for j in range(cols):
        col = work[:, :, j]
        c, v = round_elements(col / smat[:, j], fmt)
        q = v * smat[:, j]
        codes[:, :, j] = c
        deq[:, :, j] = q
        if j + 1 < cols:
            err = (col - q) / factors[:, j, j][:, None]
            work[:, :, j + 1 :] -= err[:, :, None] * factors[:, None, j, j + 1 :]
    return codes, deq


def gptq_layer(
    W: np.ndarray,
    H: LayerHessian,
    fmt: QuantFormat,
    damp_grid: Iterable[float] = DAMP_GRID,
    scales: np.ndarray | None = None,
) -> GptqResult:
    """Quantize ``W`` (rows x cols) with GPTQ, choosing the dampening by output MSE.

    Ties go to the larger dampening; the RTN fallback loses every tie.
    """
    t0 = time.perf_counter()
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[1] != H.cols:
        raise ValueError(f"layer {H.layer_id}: weight shape {W.shape} vs Hessian {H.H.shape}")
    grid = sorted(float(a) for a in damp_grid)
    if not grid:
        raise ValueError("damp_grid must not be empty")
    if scales is None:
        scales = frozen_scales(W, fmt)
    smat = scale_matrix(scales, fmt, W.shape)

    rtn = quantize_with_scales(W, scales, fmt)
    rtn_mse = output_mse(W, rtn.dequant, H)

    usable, factors = [], []
    for a in grid:
        U = _inverse_cholesky(H.H, a)
        if U is not None:
            usable.append(a)
            factors.append(U)
    if not usable:
        raise GptqError(f"layer {H.layer_id}: damped Hessian is not positive definite for any dampening")
    codes, deq = _sweep(W, np.stack(factors), smat, fmt)

    scores = {"rtn": rtn_mse}
    best_mse, best_idx = rtn_mse, None
    # ascending dampening with <= hands ties to the larger value, and RTN never wins a tie
    for i, a in enumerate(usable):
        mse = output_mse(W, deq[i], H)
        scores[repr(a)] = mse
        if mse <= best_mse:
            best_mse, best_idx = mse, i
    if best_idx is None:
        quantized, damp = rtn, None
    else:
        quantized = QuantizedTensor(fmt, W.shape, scales, codes[best_idx], deq[best_idx])
        damp = usable[best_idx]
    return GptqResult(quantized, damp, rtn_mse, best_mse, time.perf_counter() - t0, scores)


# ---------------------------------------------------------------------------
# Whole-model driver
# ---------------------------------------------------------------------------


def model_hessians(ckpt: ToyCheckpoint, calib: np.ndarray) -> dict[str, LayerHessian]:
    """One forward pass over ``calib`` on the unquantized model, all layers at once."""
    accs = {name: HessianAccumulator(name) for name in ckpt.quantizable_names()}
    last_q: list[np.ndarray] = []

    def on_batch(name: str, x: np.ndarray) -> None:
        # forward() hands Wq, Wk, Wv the same input back to back
        if name.endswith(("Wk", "Wv")):
            xtx = last_q[0]
        else:
            xtx = x.T @ x
            if name.endswith("Wq"):
                last_q[:] = [xtx]
        acc = accs[name]
        if acc._H is None:
            acc._H = np.zeros_like(xtx)
        acc._H += xtx
        acc.n_samples += x.shape[0]

    capture_inputs(ckpt, calib, on_batch)
    return {name: acc.result() for name, acc in accs.items()}


@dataclass
class LayerReport:
    layer: str
    format: str
    damp: float | None
    rtn_mse: float
    gptq_mse: float
    sqnr_rtn_db: float
    sqnr_gptq_db: float
    seconds: float

    def to_json(self) -> dict:
        return {
            "layer": self.layer,
            "format": self.format,
            "damp": self.damp,
            "rtn_mse": self.rtn_mse,
            "gptq_mse": self.gptq_mse,
            "sqnr_rtn_db": _json_db(self.sqnr_rtn_db),
            "sqnr_gptq_db": _json_db(self.sqnr_gptq_db),
            "seconds": self.seconds,
        }


def _json_db(value: float) -> float | str:
    return "inf" if math.isinf(value) else value


def _sqnr_or_inf(w: np.ndarray, q: np.ndarray) -> float:
    return metrics.sqnr_db(w, q) if np.any(w) else math.inf


def gptq_model(
    ckpt: ToyCheckpoint,
    fmt: QuantFormat,
    calib: np.ndarray,
    damp_grid: Iterable[float] = DAMP_GRID,
    hessians: dict[str, LayerHessian] | None = None,
) -> tuple[ToyCheckpoint, list[LayerReport]]:
    """Quantize every quantizable layer of ``ckpt`` with GPTQ.

    Pass precomputed ``hessians`` to reuse one calibration pass across formats.
    """
    if hessians is None:
        if len(calib) == 0:
            raise ValueError("calibration set is empty")
        hessians = model_hessians(ckpt, calib)
    updates, reports = {}, []
    for name in ckpt.quantizable_names():
        W = np.asarray(ckpt.tensors[name], dtype=np.float64)
        res = gptq_layer(W, hessians[name], fmt, damp_grid)
        rtn_deq = quantize_with_scales(W, res.quantized.scales, fmt).dequant
        updates[name] = res.quantized.dequant
        reports.append(
            LayerReport(
                name,
                fmt.name,
                res.chosen_damp,
                res.rtn_mse,
                res.gptq_mse,
                _sqnr_or_inf(W, rtn_deq),
                _sqnr_or_inf(W, res.quantized.dequant),
                res.seconds,
            )
        )
        log.debug("%s %s damp=%s rtn=%.3g gptq=%.3g", name, fmt.name, res.damp_label, res.rtn_mse, res.gptq_mse)
    return replace_tensors(ckpt, updates), reports
