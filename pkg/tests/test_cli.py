import csv
import hashlib
import json

import pytest

from ptqlab.cli import main
from ptqlab.experiment import PARETO_HEADER, SWEEP_HEADER, RecordStore, pareto_rows
from ptqlab.landscape import PROFILE_HEADER
from ptqlab.predictor import CSV_HEADER


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def lab(tmp_path_factory, corpus):
    root = tmp_path_factory.mktemp("cli")
    (root / "corpus.txt").write_bytes(corpus)
    assert run("train", "--size", "s1", "--seed", "7", "--steps", "30", root / "corpus.txt", root / "ck") == 0
    return root


def test_train_manifest_and_rerun_identical(lab, tmp_path):
    manifest = json.loads((lab / "ck" / "manifest.json").read_text())
    assert manifest["quantizable"] == [f"layers.0.{m}" for m in ("Wq", "Wk", "Wv", "Wo", "Wmlp_in", "Wmlp_out")]
    assert manifest["meta"]["corpus_sha256"] == hashlib.sha256((lab / "corpus.txt").read_bytes()).hexdigest()
    assert run("train", "--size", "s1", "--seed", "7", "--steps", "30", lab / "corpus.txt", tmp_path / "again") == 0
    blob = lambda p: hashlib.sha256((p / "weights.bin").read_bytes()).hexdigest()  # noqa: E731
    assert blob(lab / "ck") == blob(tmp_path / "again")


def test_missing_corpus_names_path(tmp_path, capsys):
    assert run("train", tmp_path / "nowhere.txt", tmp_path / "out") == 2
    assert "nowhere.txt" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["sweep", "CK", "--formats", "mxint9_32"], ["landscape", "CK", "--grid", "0:60"],
                                  ["landscape", "CK", "--seeds", "a,b"], ["train", "C", "O", "--size", "s9"]])
def test_usage_errors_exit_2(lab, argv):
    assert run(*[lab / "ck" if a == "CK" else a for a in argv]) == 2


@pytest.mark.parametrize("argv", [["bogus"], [], ["sweep"]])
def test_argparse_usage_error_is_exit_2(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == 2


def test_sweep_records_and_csv(lab):
    store = lab / "rec.jsonl"
    assert run("sweep", lab / "ck", "--formats", "mxint2_32,mxint6_32,int4_chan", "--store", store,
               "--out", lab / "sweep.csv") == 0
    rows = read_csv(lab / "sweep.csv")
    assert tuple(rows[0]) == SWEEP_HEADER
    recs = RecordStore(store).records()
    quantized = [r for r in recs if r["method"] != "none"]
    assert len(quantized) == 6
    assert {r["method"] for r in quantized} == {"rtn", "int_rtn", "gptq"}
    for r in recs:
        assert {"timestamp", "config_hash", "format", "method", "sqnr_db", "nll"} <= set(r)
    by = {(r["format"], r["method"]): r for r in quantized}
    for fmt in ("mxint2_32", "mxint6_32"):
        assert by[(fmt, "gptq")]["calib_mse"] <= by[(fmt, "rtn")]["calib_mse"]
    assert by[("int4_chan", "gptq")]["calib_mse"] <= by[("int4_chan", "int_rtn")]["calib_mse"]


def test_pareto(lab):
    out = lab / "pareto.csv"
    assert run("pareto", "--store", lab / "rec.jsonl", "--out", out) == 0
    rows = read_csv(out)
    assert tuple(rows[0]) == PARETO_HEADER
    body = [dict(zip(rows[0], r)) for r in rows[1:]]
    bits = [float(r["total_bits"]) for r in body]
    assert bits == sorted(bits)
    fp = [r for r in body if r["format"] == "fp32"]
    assert len(fp) == 1 and float(fp[0]["bits_per_weight"]) == 32.0
    for r in body:
        dominated = any(float(o["total_bits"]) <= float(r["total_bits"]) and float(o["nll"]) <= float(r["nll"])
                        and (float(o["total_bits"]), float(o["nll"])) != (float(r["total_bits"]), float(r["nll"]))
                        for o in body)
        assert (r["pareto"] == "1") == (not dominated)


def test_pareto_empty_store(tmp_path):
    assert run("pareto", "--store", tmp_path / "none.jsonl") == 2


def test_pareto_rows_never_flag_dominated():
    recs = [
        {"config_hash": "h", "model_id": "m", "format": f, "method": "rtn", "bits_per_weight": b, "D": 10, "nll": n}
        for f, b, n in [("a", 2, 3.0), ("b", 4, 2.0), ("c", 4, 2.5), ("d", 6, 2.0)]
    ]
    flags = {r["format"]: r["pareto"] for r in pareto_rows(recs)}
    assert flags == {"a": True, "b": True, "c": False, "d": False}


def test_landscape_profiles(lab):
    out = lab / "prof.csv"
    assert run("landscape", lab / "ck", "--seeds", "0,1,2", "--grid", "0:60:2", "--out", out) == 0
    rows = read_csv(out)
    assert tuple(rows[0]) == PROFILE_HEADER
    by_seed = {}
    for r in rows[1:]:
        by_seed.setdefault(r[1], []).append(r)
    assert sorted(by_seed) == ["0", "1", "2"]
    assert all(len(v) == 32 and v[0][3] == "inf" for v in by_seed.values())  # 31 grid points plus lambda = 0


def test_features_fit_predict(lab, capsys):
    feats = lab / "feat.csv"
    assert run("features", lab / "ck", "--formats", "mxint2_32,mxint3_32,mxint4_32,mxint6_32,mxfp4_e2m1_32",
               "--store", lab / "rec.jsonl", "--out", feats) == 0
    rows = read_csv(feats)
    assert tuple(rows[0]) == CSV_HEADER and len(rows) == 6
    sq = [float(r[3]) for r in rows[1:5]]
    assert sq == sorted(sq)
    forest = lab / "forest.json"
    capsys.readouterr()
    assert run("fit-predict", feats, feats, "--seed", "3", "--n-estimators", "10", "--out", forest) == 0
    first = capsys.readouterr().out
    report = json.loads(first)
    assert {"rmse", "r2", "importance"} <= set(report)
    assert abs(sum(v["mean"] for v in report["importance"].values()) - 1) < 1e-12
    assert run("fit-predict", feats, feats, "--seed", "3", "--n-estimators", "10") == 0
    assert capsys.readouterr().out == first
    assert run("predict", forest, feats, "--out", lab / "pred.csv") == 0
    assert read_csv(lab / "pred.csv")[0][-2:] == ["nll_gptq_pred", "delta_pred"]


def test_fit_predict_schema_mismatch(lab, tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("model_id,D\nx,1\n")
    assert run("fit-predict", bad, bad) == 2


def test_cost_report(lab, capsys):
    capsys.readouterr()
    assert run("cost", lab / "ck", "--format", "mxint4_32", "--grid", "0:60:20") == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["feature_seconds"] > 0 and rep["gptq_seconds"] > 0
    assert {"rtn", "landscape", "slope", "hessian", "gptq"} <= set(rep["phases"])
    assert rep["gptq_over_features"] == pytest.approx(rep["gptq_seconds"] / rep["feature_seconds"])
