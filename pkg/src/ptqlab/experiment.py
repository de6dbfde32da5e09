"""Experiment bookkeeping shared by the CLI and the acceptance suite.

An :class:`Lab` wraps one checkpoint with its corpus-derived dataset and
caches what repeated measurements share (baseline NLL, calibration
Hessians). Results land in an append-only JSON-lines record store.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

from . import metrics
from .formats import MX_FP, PER_CHANNEL, PER_TENSOR, QuantFormat, effective_bits, parse_format
from .gptq import gptq_model, model_hessians, output_mse
from .landscape import ExactQuantization, quantization_direction, quantized_weights, slope_at_operating_point
from .predictor import FeatureRecord
from .toymodel import TokenDataset, ToyCheckpoint, eval_nll, load_checkpoint, make_dataset

FP_BITS = 32.0
PARETO_HEADER = ("model_id", "format", "method", "bits_per_weight", "D", "total_bits", "nll", "pareto")
SWEEP_HEADER = ("model_id", "config_hash", "format", "method", "sqnr_db", "nll", "calib_mse")


def format_manifest() -> dict:
    return json.loads(resources.files("ptqlab").joinpath("data/formats36.json").read_text())


def all36() -> list[str]:
    return list(format_manifest()["formats"])


def resolve_formats(spec: str | Iterable[str]) -> list[QuantFormat]:
    """``"all36"`` or comma-separated format names."""
    names = spec.split(",") if isinstance(spec, str) else list(spec)
    out = []
    for name in (n.strip() for n in names):
        if not name:
            continue
        if name == "all36":
            out.extend(parse_format(n) for n in all36())
        else:
            out.append(parse_format(name))
    if not out:
        raise ValueError("empty format list")
    return out


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Record store
# ---------------------------------------------------------------------------


class RecordStore:
    """Append-only JSON-lines file; one self-describing record per line."""

    def __init__(self, path: str | os.PathLike) -> None:
        self.path = Path(path)

    def append(self, record: dict) -> None:
        rec = dict(record)
        rec.setdefault("timestamp", _dt.datetime.now(_dt.timezone.utc).isoformat())
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True, allow_nan=False, default=_json_default) + "\n")

    def records(self) -> list[dict]:
        if not self.path.exists():
            return []
        with open(self.path) as fh:
            return [json.loads(line) for line in fh if line.strip()]

    def find(self, config_hash: str, fmt: str, method: str) -> dict | None:
        hit = None
        for r in self.records():
            if r.get("config_hash") == config_hash and r.get("format") == fmt and r.get("method") == method:
                hit = r
        return hit


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _db(value: float) -> float | str:
    return "inf" if math.isinf(value) else value


# ---------------------------------------------------------------------------
# Measurements
# ---------------------------------------------------------------------------


@dataclass
class Lab:
    ckpt: ToyCheckpoint
    data: TokenDataset
    n_calib: int = 128
    _base_nll: float | None = None
    _hessians: dict | None = None
    timings: dict = field(default_factory=dict)

    @classmethod
    def open(cls, ckpt_path: str | os.PathLike, corpus: str | os.PathLike | None = None) -> "Lab":
        ckpt = load_checkpoint(ckpt_path)
        corpus_path = corpus or ckpt.meta.get("corpus")
        if not corpus_path:
            raise ValueError(f"checkpoint {ckpt_path} does not name its corpus; pass --corpus")
        corpus_bytes = Path(corpus_path).read_bytes()
        return cls(ckpt, make_dataset(corpus_bytes, ckpt.config.ctx_len, ckpt.meta.get("seed", 0)))

    @property
    def base_nll(self) -> float:
        if self._base_nll is None:
            self._base_nll = eval_nll(self.ckpt, self.data.valid)
        return self._base_nll

    @property
    def hessians(self) -> dict:
        if self._hessians is None:
            t0 = time.perf_counter()
            self._hessians = model_hessians(self.ckpt, self.data.calibration(self.n_calib))
            self.timings["hessian"] = time.perf_counter() - t0
        return self._hessians

    def identity(self) -> dict:
        return {
            "model_id": self.ckpt.model_id,
            "config_hash": self.ckpt.config_hash(),
            "D": self.ckpt.n_quantizable,
        }

    def fp_record(self) -> dict:
        return {**self.identity(), "format": "fp32", "method": "none", "sqnr_db": "inf", "nll": self.base_nll,
                "bits_per_weight": FP_BITS, "calib_mse": 0.0}

    def bits_per_weight(self, fmt: QuantFormat) -> float:
        if fmt.is_mx:
            return effective_bits(fmt)
        # float32 scale per granule, amortized over the quantizable set
        n_scales = 0
        for name in self.ckpt.quantizable_names():
            rows, cols = self.ckpt.tensors[name].shape
            if fmt.granularity == PER_TENSOR:
                n_scales += 1
            elif fmt.granularity == PER_CHANNEL:
                n_scales += rows
            else:
                n_scales += rows * (cols // fmt.group_size)
        return fmt.precision + FP_BITS * n_scales / self.ckpt.n_quantizable

    def measure(self, fmt: QuantFormat, method: str) -> dict:
        """Quantize with ``method`` and return a store record (SQNR, NLL, per-layer detail)."""
        t0 = time.perf_counter()
        if method == "gptq":
            hess = self.hessians
            q, reports = gptq_model(self.ckpt, fmt, None, hessians=hess)
            layers = [r.to_json() for r in reports]
            calib_mse = sum(r.gptq_mse for r in reports)
        elif method in ("rtn", "int_rtn"):
            if (method == "int_rtn") == fmt.is_mx:
                raise ValueError(f"method {method} does not apply to {fmt.name}")
            hess = self.hessians
            q = quantized_weights(self.ckpt, fmt, "rtn")
            layers, calib_mse = [], 0.0
            for name in self.ckpt.quantizable_names():
                w = np.asarray(self.ckpt.tensors[name], dtype=np.float64)
                mse = output_mse(w, q.tensors[name], hess[name])
                calib_mse += mse
                layers.append({"layer": name, "format": fmt.name, "rtn_mse": mse,
                               "sqnr_db": _db(metrics.sqnr_db(w, q.tensors[name]))})
        else:
            raise ValueError(f"unknown method {method!r}")
        t_quant = time.perf_counter() - t0
        sqnr = metrics.sqnr_db(self.ckpt.flatten(), q.flatten())
        nll = eval_nll(q, self.data.valid)
        return {
            **self.identity(),
            "format": fmt.name,
            "method": method,
            "sqnr_db": _db(sqnr),
            "nll": nll,
            "nll_fp": self.base_nll,
            "bits_per_weight": self.bits_per_weight(fmt),
            "calib_mse": calib_mse,
            "layers": layers,
            "seconds": {"quantize": t_quant, "hessian": self.timings.get("hessian", 0.0)},
        }

    def feature_record(self, fmt: QuantFormat, store: RecordStore | None = None) -> FeatureRecord:
        """The eight predictor features plus the GPTQ target for one format."""
        if not fmt.is_mx:
            raise ValueError("feature records are defined for MX formats")
        rtn = self._cached_or_measure(fmt, "rtn", store)
        gptq = self._cached_or_measure(fmt, "gptq", store)
        sqnr = metrics.db_from_str(str(rtn["sqnr_db"]))
        if math.isinf(sqnr):
            raise ExactQuantization(f"RTN quantization to {fmt.name} is exact; slope undefined")
        direction = quantization_direction(self.ckpt, fmt, "rtn")
        slope = slope_at_operating_point(self.ckpt, fmt, self.data.valid, direction=direction)
        return FeatureRecord(
            model_id=self.ckpt.model_id,
            D=float(self.ckpt.n_quantizable),
            nll_fp=self.base_nll,
            sqnr_rtn_db=sqnr,
            nll_rtn=rtn["nll"],
            slope_db=slope,
            precision=float(fmt.precision),
            ebits=float(fmt.exp_bits if fmt.family == MX_FP else 0),
            block=float(fmt.block_size),
            nll_gptq=gptq["nll"],
            format=fmt.name,
        )

    def _cached_or_measure(self, fmt: QuantFormat, method: str, store: RecordStore | None) -> dict:
        if store is not None:
            hit = store.find(self.ckpt.config_hash(), fmt.name, method)
            if hit is not None:
                return hit
        rec = self.measure(fmt, method)
        if store is not None:
            store.append(rec)
        return rec


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def write_sweep_csv(records: Iterable[dict], fh: TextIO) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(SWEEP_HEADER)
    for r in records:
        writer.writerow([r["model_id"], r["config_hash"], r["format"], r["method"],
                         _csv_num(r["sqnr_db"]), repr(float(r["nll"])), repr(float(r["calib_mse"]))])


def _csv_num(value) -> str:
    return "inf" if value == "inf" else repr(float(value))


def pareto_rows(records: Iterable[dict]) -> list[dict]:
    """Rows sorted by total weight bits, each flagged if no other row dominates it."""
    latest: dict[tuple, dict] = {}
    for r in records:
        if "bits_per_weight" not in r or "nll" not in r:
            continue
        latest[(r["config_hash"], r["format"], r["method"])] = r
    rows = [
        {
            "model_id": r["model_id"],
            "format": r["format"],
            "method": r["method"],
            "bits_per_weight": float(r["bits_per_weight"]),
            "D": int(r["D"]),
            "total_bits": float(r["bits_per_weight"]) * int(r["D"]),
            "nll": float(r["nll"]),
        }
        for r in latest.values()
    ]
    if not rows:
        raise ValueError("record store holds no sweep records")
    rows.sort(key=lambda r: (r["total_bits"], r["nll"], r["model_id"], r["format"], r["method"]))
    for r in rows:
        r["pareto"] = not any(
            o["total_bits"] <= r["total_bits"] and o["nll"] <= r["nll"]
            and (o["total_bits"] < r["total_bits"] or o["nll"] < r["nll"])
            for o in rows
        )
    return rows


def write_pareto_csv(rows: Iterable[dict], fh: TextIO) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(PARETO_HEADER)
    for r in rows:
        writer.writerow([r["model_id"], r["format"], r["method"], repr(r["bits_per_weight"]), r["D"],
                         repr(r["total_bits"]), repr(r["nll"]), int(r["pareto"])])
