import json

import numpy as np
import pytest

from ptqlab.experiment import Lab, RecordStore, all36, pareto_rows, resolve_formats
from ptqlab.formats import FormatError, parse_format


def test_all36_unique_and_parseable():
    names = all36()
    assert len(names) == len(set(names)) == 36
    assert sum(n.startswith("mxint") for n in names) == 16  # P in {2,3,4,6} x four block sizes
    assert [f.name for f in resolve_formats(names)] == names


def test_resolve_formats():
    assert [f.name for f in resolve_formats("mxint4_32, int4_chan,")] == ["mxint4_32", "int4_chan"]
    assert len(resolve_formats("all36,mxint2_16")) == 37
    with pytest.raises(ValueError):
        resolve_formats(" , ")
    with pytest.raises(FormatError):
        resolve_formats("mxint4_31")


def test_store_append_find_latest(tmp_path):
    store = RecordStore(tmp_path / "sub" / "r.jsonl")
    assert store.records() == [] and store.find("h", "f", "rtn") is None
    store.append({"config_hash": "h", "format": "f", "method": "rtn", "nll": np.float64(1.5)})
    store.append({"config_hash": "h", "format": "f", "method": "rtn", "nll": 1.25, "timestamp": "t"})
    store.append({"config_hash": "h", "format": "f", "method": "gptq", "nll": 1.0})
    assert len(store.records()) == 3
    hit = store.find("h", "f", "rtn")
    assert hit["nll"] == 1.25 and hit["timestamp"] == "t"
    assert "timestamp" in store.records()[0]
    with pytest.raises(ValueError):
        store.append({"nll": float("nan")})


def test_pareto_keeps_latest_record_per_key():
    base = {"config_hash": "h", "model_id": "m", "method": "rtn", "D": 4}
    recs = [{**base, "format": "a", "bits_per_weight": 2, "nll": 9.0},
            {**base, "format": "a", "bits_per_weight": 2, "nll": 1.0},
            {"config_hash": "h", "format": "x"}]
    rows = pareto_rows(recs)
    assert len(rows) == 1 and rows[0]["nll"] == 1.0 and rows[0]["total_bits"] == 8.0
    with pytest.raises(ValueError):
        pareto_rows([])


def test_bits_per_weight(tiny):
    ckpt, ds = tiny
    lab = Lab(ckpt, ds)
    assert lab.bits_per_weight(parse_format("mxint4_32")) == 4.25
    assert lab.bits_per_weight(parse_format("mxfp6_e3m2_128")) == 6 + 8 / 128
    D = ckpt.n_quantizable
    shapes = [ckpt.tensors[n].shape for n in ckpt.quantizable_names()]
    assert lab.bits_per_weight(parse_format("int4_tens")) == 4 + 32 * len(shapes) / D
    assert lab.bits_per_weight(parse_format("int4_chan")) == 4 + 32 * sum(r for r, _ in shapes) / D
    assert lab.bits_per_weight(parse_format("int4_g16")) == 4 + 32 * sum(r * c // 16 for r, c in shapes) / D


def test_measure_and_feature_record(tiny, tmp_path):
    ckpt, ds = tiny
    lab = Lab(ckpt, ds)
    store = RecordStore(tmp_path / "r.jsonl")
    fmt = parse_format("mxint3_32")
    rec = lab.feature_record(fmt, store)
    stored = store.records()
    assert [r["method"] for r in stored] == ["rtn", "gptq"]
    assert rec.nll_rtn == stored[0]["nll"] and rec.nll_gptq == stored[1]["nll"]
    assert rec.D == ckpt.n_quantizable and rec.precision == 3 and rec.ebits == 0 and rec.block == 32
    assert rec.slope_db > 0
    # a second call is served from the store
    again = lab.feature_record(fmt, store)
    assert len(store.records()) == 2 and again.nll_gptq == rec.nll_gptq
    json.dumps(stored)
    with pytest.raises(ValueError):
        lab.measure(fmt, "int_rtn")
    with pytest.raises(ValueError):
        lab.feature_record(parse_format("int4_chan"))
