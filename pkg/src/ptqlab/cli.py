"""``ptqlab`` command line: train, sweep, landscape, features, fit-predict,
predict, pareto and cost.

Tabular output is CSV with a header row; structured output is JSON lines.
Exit status is 0 on success, 2 on usage errors and 1 on computation errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import landscape as ls
from . import predictor as rf
from .corpus import synthetic_corpus
from .experiment import (
    Lab,
    RecordStore,
    file_sha256,
    pareto_rows,
    resolve_formats,
    write_pareto_csv,
    write_sweep_csv,
)
from .formats import FormatError
from .toymodel import PRESETS, TrainConfig, save_checkpoint, train

log = logging.getLogger("ptqlab")


class UsageError(Exception):
    pass


def _open_out(path: str | None):
    if path in (None, "-"):
        return sys.stdout
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", newline="")


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"malformed seed list {text!r}") from None


def _formats(text: str):
    try:
        return resolve_formats(text)
    except (FormatError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _grid(text: str) -> list[float]:
    try:
        return ls.parse_grid(text)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_make_corpus(args) -> None:
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_bytes(synthetic_corpus(args.bytes, args.seed))


def cmd_train(args) -> None:
    corpus_path = Path(args.corpus)
    if not corpus_path.is_file():
        raise UsageError(f"corpus not found: {corpus_path}")
    if args.size not in PRESETS:
        raise UsageError(f"unknown size {args.size!r}; choose from {', '.join(PRESETS)}")
    corpus = corpus_path.read_bytes()
    tc = TrainConfig(steps=args.steps) if args.steps is not None else TrainConfig()
    t0 = time.perf_counter()
    ckpt = train(corpus, PRESETS[args.size], seed=args.seed, train_config=tc)
    ckpt.meta.update(
        model_id=f"toy-{args.size}",
        size=args.size,
        corpus=str(corpus_path.resolve()),
        corpus_sha256=file_sha256(corpus_path),
    )
    out = save_checkpoint(ckpt, args.out)
    print(json.dumps({"checkpoint": str(out), "model_id": ckpt.model_id, "D": ckpt.n_quantizable,
                      "valid_nll": ckpt.meta["valid_nll"], "seconds": time.perf_counter() - t0}))


def cmd_sweep(args) -> None:
    fmts = _formats(args.formats)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in ("rtn", "gptq"):
            raise UsageError(f"unknown method {m!r}")
    lab = Lab.open(args.checkpoint, args.corpus)
    store = RecordStore(args.store)
    records = [lab.fp_record()]
    store.append(records[0])
    for fmt in fmts:
        for method in methods:
            # plain int formats run RTN as calibrated int RTN
            m = "int_rtn" if method == "rtn" and not fmt.is_mx else method
            rec = lab.measure(fmt, m)
            store.append(rec)
            records.append(rec)
            log.info("%s %s sqnr=%s nll=%.4f", fmt.name, m, rec["sqnr_db"], rec["nll"])
    with _open_out(args.out) as fh:
        write_sweep_csv(records, fh)


def cmd_landscape(args) -> None:
    grid = _grid(args.grid)
    seeds = _seeds(args.seeds)
    lab = Lab.open(args.checkpoint, args.corpus)
    seqs = lab.data.valid
    base = lab.base_nll
    D = lab.ckpt.n_quantizable
    profiles = [
        ls.radial_profile(lab.ckpt, ls.sample_direction(D, s), grid, seqs, seed=s, base_nll=base) for s in seeds
    ]
    if args.format:
        fmt = _formats(args.format)[0]
        for method in ("rtn", "gptq"):
            try:
                d, sqnr = ls.quantization_direction(lab.ckpt, fmt, method, hessians=lab.hessians)
            except ls.ExactQuantization:
                log.warning("%s quantization to %s is exact; no direction", method, fmt.name)
                continue
            p = ls.radial_profile(lab.ckpt, d, grid, seqs, kind=method, fmt=fmt.name, base_nll=base)
            profiles.append(p)
            log.info("%s %s operating point %.2f dB", method, fmt.name, sqnr)
    if args.taylor:
        d0 = ls.sample_direction(D, seeds[0]) if seeds else None
        if d0 is not None:
            for order in (1, 2):
                p = ls.taylor_profile(lab.ckpt, d0, grid, seqs, order=order, base_nll=base)
                p.seed = seeds[0]
                profiles.append(p)
    with _open_out(args.out) as fh:
        ls.write_profiles(profiles, fh)


def cmd_features(args) -> None:
    fmts = _formats(args.formats)
    store = RecordStore(args.store) if args.store else None
    records = []
    for path in args.checkpoints:
        lab = Lab.open(path, args.corpus)
        for fmt in fmts:
            records.append(lab.feature_record(fmt, store))
    with _open_out(args.out) as fh:
        rf.write_records(records, fh)


def _read_table(path: str) -> list[rf.FeatureRecord]:
    try:
        with open(path, newline="") as fh:
            return rf.read_records(fh)
    except FileNotFoundError:
        raise UsageError(f"feature table not found: {path}") from None
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None


def cmd_fit_predict(args) -> None:
    train_recs = _read_table(args.train)
    hold = _read_table(args.holdout)
    forest = rf.fit(train_recs, n_estimators=args.n_estimators, max_depth=args.max_depth, seed=args.seed)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(forest.to_json()) + "\n")
    imp, imp_std = rf.importance(forest)
    report = {"n_train": len(train_recs), "n_holdout": len(hold), "seed": args.seed}
    targets = [r.nll_gptq for r in hold]
    if all(t is not None for t in targets) and hold:
        pred = rf.predict(forest, hold)
        y = np.array(targets)
        report.update(
            rmse=rf.rmse(pred, y),
            r2=rf.r2(pred, y),
            target_std=float(np.std(y)),
            delta_rmse=rf.rmse(pred - np.array([r.nll_rtn for r in hold]), y - np.array([r.nll_rtn for r in hold])),
        )
    report["importance"] = {f: {"mean": float(m), "std": float(s)} for f, m, s in zip(rf.FEATURES, imp, imp_std)}
    print(json.dumps(report, sort_keys=True))
    if args.report:
        Path(args.report).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")


def cmd_predict(args) -> None:
    try:
        forest = rf.Forest.from_json(json.loads(Path(args.forest).read_text()))
    except FileNotFoundError:
        raise UsageError(f"forest file not found: {args.forest}") from None
    recs = _read_table(args.table)
    pred = rf.predict(forest, recs)
    with _open_out(args.out) as fh:
        fh.write("model_id,precision,ebits,block,nll_rtn,nll_gptq_pred,delta_pred\n")
        for r, p in zip(recs, pred):
            fh.write(f"{r.model_id},{int(r.precision)},{int(r.ebits)},{int(r.block)},{r.nll_rtn!r},{float(p)!r},{float(p) - r.nll_rtn!r}\n")


def cmd_pareto(args) -> None:
    store = RecordStore(args.store)
    try:
        rows = pareto_rows(store.records())
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    with _open_out(args.out) as fh:
        write_pareto_csv(rows, fh)


def cmd_cost(args) -> None:
    fmt = _formats(args.format)[0]
    lab = Lab.open(args.checkpoint, args.corpus)
    seqs = lab.data.valid
    grid = _grid(args.grid)
    phases = {}
    t0 = time.perf_counter()
    base = lab.base_nll
    phases["base_nll"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    direction = ls.quantization_direction(lab.ckpt, fmt, "rtn")
    phases["rtn"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    for s in range(3):
        ls.radial_profile(lab.ckpt, ls.sample_direction(lab.ckpt.n_quantizable, s), grid, seqs, base_nll=base)
    phases["landscape"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    ls.slope_at_operating_point(lab.ckpt, fmt, seqs, direction=direction)
    phases["slope"] = time.perf_counter() - t0
    features = phases["rtn"] + phases["landscape"] + phases["slope"]

    t0 = time.perf_counter()
    _ = lab.hessians
    phases["hessian"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    from .gptq import gptq_model

    gptq_model(lab.ckpt, fmt, None, hessians=lab.hessians)
    phases["gptq"] = time.perf_counter() - t0
    gptq_total = phases["hessian"] + phases["gptq"]
    print(json.dumps({
        "model_id": lab.ckpt.model_id,
        "format": fmt.name,
        "feature_seconds": features,
        "gptq_seconds": gptq_total,
        "gptq_over_features": gptq_total / features if features > 0 else math.inf,
        "phases": phases,
    }, sort_keys=True))


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ptqlab", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-corpus", help="write a deterministic synthetic text corpus")
    p.add_argument("out")
    p.add_argument("--bytes", type=int, default=400_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_corpus)

    p = sub.add_parser("train", help="train a toy model")
    p.add_argument("corpus")
    p.add_argument("out")
    p.add_argument("--size", default="s2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="RTN/GPTQ SQNR and NLL over a format list")
    p.add_argument("checkpoint")
    p.add_argument("--formats", "--format", default="all36")
    p.add_argument("--methods", default="rtn,gptq")
    p.add_argument("--store", default="records.jsonl")
    p.add_argument("--out", default="-")
    p.add_argument("--corpus")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("landscape", help="radial loss profiles as CSV")
    p.add_argument("checkpoint")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--format", default="")
    p.add_argument("--grid", default="0:60:2")
    p.add_argument("--taylor", action="store_true", help="add order-1/2 Taylor profiles for the first seed")
    p.add_argument("--out", default="-")
    p.add_argument("--corpus")
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("features", help="predictor feature table")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--formats", "--format", default="all36")
    p.add_argument("--store", default=None)
    p.add_argument("--out", default="-")
    p.add_argument("--corpus")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("fit-predict", help="fit the forest and score a held-out table")
    p.add_argument("train")
    p.add_argument("holdout")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-estimators", type=int, default=120)
    p.add_argument("--max-depth", type=int, default=8)
    p.add_argument("--out", default=None, help="forest JSON path")
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_fit_predict)

    p = sub.add_parser("predict", help="apply a fitted forest to a feature table")
    p.add_argument("forest")
    p.add_argument("table")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("pareto", help="weight-size vs NLL tradeoff from the record store")
    p.add_argument("--store", default="records.jsonl")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_pareto)

    p = sub.add_parser("cost", help="time feature extraction against GPTQ")
    p.add_argument("checkpoint")
    p.add_argument("--format", required=True)
    p.add_argument("--grid", default="0:60:2")
    p.add_argument("--corpus")
    p.set_defaults(func=cmd_cost)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ptqlab: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and exit 1
        log.debug("failure", exc_info=True)
        print(f"ptqlab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
