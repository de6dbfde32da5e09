import itertools

import numpy as np
import pytest

from ptqlab.calibration import calibrate
from ptqlab.formats import parse_format, quantize_with_scales, round_elements, rtn_quantize, scale_matrix
from ptqlab.gptq import (
    DAMP_GRID,
    GptqError,
    HessianAccumulator,
    LayerHessian,
    accumulate_hessian,
    frozen_scales,
    gptq_layer,
    gptq_model,
    model_hessians,
    output_mse,
)
from ptqlab.toymodel import capture_inputs, eval_nll, replace_tensors


def textbook_gptq(W, H, fmt, alpha):
    """Column loop with an explicit inverse, downdated after every column."""
    W = W.astype(np.float64).copy()
    n = H.shape[0]
    Hinv = np.linalg.inv(H + alpha * np.mean(np.diag(H)) * np.eye(n))
    smat = scale_matrix(frozen_scales(W, fmt), fmt, W.shape)
    out = np.zeros_like(W)
    for j in range(n):
        _, v = round_elements(W[:, j] / smat[:, j], fmt)
        out[:, j] = v * smat[:, j]
        err = (W[:, j] - out[:, j]) / Hinv[j, j]
        W[:, j + 1 :] -= np.outer(err, Hinv[j, j + 1 :])
        Hinv = Hinv - np.outer(Hinv[:, j], Hinv[j, :]) / Hinv[j, j]
    return out


def correlated_problem(rows=6, cols=32, n=200, seed=0):
    rng = np.random.default_rng(seed)
    mix = rng.standard_normal((cols, cols)) * 0.3 + np.eye(cols)
    X = mix @ rng.standard_normal((cols, n))
    W = rng.standard_normal((rows, cols))
    return W, accumulate_hessian([X], "layer"), X


# -- Hessian accumulation ------------------------------------------------------


def test_identity_batch():
    h = accumulate_hessian([np.eye(4)])
    assert np.array_equal(h.H, np.eye(4)) and h.n_samples == 4


def test_two_identical_batches_double():
    x = np.random.default_rng(0).standard_normal((3, 5))
    one = accumulate_hessian([x])
    two = accumulate_hessian([x, x])
    assert np.allclose(two.H, 2 * one.H, rtol=1e-15) and two.n_samples == 10


def test_order_independence():
    rng = np.random.default_rng(1)
    batches = [rng.standard_normal((8, 16)) for _ in range(10)]
    a = accumulate_hessian(batches).H
    b = accumulate_hessian(batches[::-1]).H
    assert np.max(np.abs(a - b)) <= 1e-12 * np.max(np.abs(a))


def test_accumulation_errors():
    with pytest.raises(ValueError):
        accumulate_hessian([])
    acc = HessianAccumulator()
    acc.add(np.ones((3, 2)))
    with pytest.raises(ValueError):
        acc.add(np.ones((4, 2)))


def test_output_mse_via_hessian_matches_direct():
    W, H, X = correlated_problem()
    What = rtn_quantize(W, parse_format("mxint3_16")).dequant
    direct = np.sum(((W - What) @ X) ** 2) / X.shape[1]
    assert output_mse(W, What, H) == pytest.approx(direct, rel=1e-10)


# -- single layer --------------------------------------------------------------


@pytest.mark.parametrize("name", ["mxint2_16", "mxint4_32", "mxfp4_e2m1_16", "mxfp6_e3m2_32", "int3_g8", "int4_chan"])
def test_diagonal_hessian_is_rtn_bitwise(name):
    fmt = parse_format(name)
    rng = np.random.default_rng(2)
    W = rng.standard_normal((5, 32))
    H = LayerHessian("diag", np.diag(rng.uniform(0.5, 3.0, 32)), 100)
    res = gptq_layer(W, H, fmt)
    rtn = quantize_with_scales(W, frozen_scales(W, fmt), fmt)
    assert np.array_equal(res.quantized.dequant, rtn.dequant)
    assert np.array_equal(res.quantized.codes, rtn.codes)
    assert all(v == res.rtn_mse for v in res.scores.values())
    # every candidate ties RTN, so the largest dampening is kept
    assert res.chosen_damp == max(DAMP_GRID)


@pytest.mark.parametrize("alpha", [1e-3, 1e-1, 10.0])
@pytest.mark.parametrize("name", ["mxint3_16", "mxfp5_e2m2_32", "int4_g16"])
def test_matches_textbook_sweep(name, alpha):
    fmt = parse_format(name)
    W, H, _ = correlated_problem(seed=3)
    res = gptq_layer(W, H, fmt, damp_grid=[alpha])
    ref = textbook_gptq(W, H.H, fmt, alpha)
    mse_ref = output_mse(W, ref, H)
    assert res.scores[repr(alpha)] == pytest.approx(mse_ref, rel=1e-9)


H_FIXTURES = {
    "anti": np.array([[1.0, -0.9], [-0.9, 1.0]]),
    "pos": np.array([[1.0, 0.9], [0.9, 1.0]]),
    "lopsided": np.array([[4.0, -1.9], [-1.9, 1.0]]),
}


@pytest.mark.parametrize("key", H_FIXTURES)
def test_brute_force_two_weights(key):
    fmt = parse_format("mxint2_16")
    W = np.array([[1.4, 0.6]])
    H = LayerHessian(key, H_FIXTURES[key] * 10, 10)
    res = gptq_layer(W, H, fmt)
    s = 2.0 ** (int(res.quantized.scales[0, 0]) - 127)
    assert s == 2.0
    best = min(output_mse(W, s * np.array([[a, b]], dtype=float), H) for a, b in itertools.product((-1, 0, 1), repeat=2))
    assert res.gptq_mse <= res.rtn_mse
    assert res.gptq_mse <= 1.1 * best


def test_anti_correlated_fixture_beats_rtn():
    W = np.array([[1.4, 0.6]])
    res = gptq_layer(W, LayerHessian("anti", H_FIXTURES["anti"], 1), parse_format("mxint2_16"))
    assert res.quantized.dequant.tolist() == [[2.0, 2.0]]
    assert res.gptq_mse < res.rtn_mse and res.chosen_damp is not None


def test_rtn_fallback_wins_when_compensation_hurts():
    # seeded instance where greedy compensation overshoots on the last column
    rng = np.random.default_rng(6)
    W = rng.standard_normal((1, 3))
    X = rng.standard_normal((3, 4))
    H = LayerHessian("x", X @ X.T, 4)
    res = gptq_layer(W, H, parse_format("mxint2_16"), damp_grid=[1e-3])
    assert res.scores["0.001"] > res.rtn_mse
    assert res.chosen_damp is None and res.damp_label == "rtn"
    assert res.gptq_mse == res.rtn_mse
    assert np.array_equal(res.quantized.dequant, rtn_quantize(W, parse_format("mxint2_16")).dequant)


@pytest.mark.parametrize("name", ["mxint3_16", "mxfp4_e2m1_32", "int3_g8"])
def test_scales_frozen_and_deterministic(name):
    fmt = parse_format(name)
    W, H, _ = correlated_problem(seed=4)
    a = gptq_layer(W, H, fmt)
    b = gptq_layer(W, H, fmt)
    expected = rtn_quantize(W, fmt).scales if fmt.is_mx else calibrate(W, fmt).scales
    assert np.array_equal(a.quantized.scales, expected)
    assert np.array_equal(a.quantized.dequant, b.quantized.dequant)
    assert a.scores == b.scores
    assert a.gptq_mse <= a.rtn_mse


def test_degenerate_hessian_raises():
    with pytest.raises(GptqError, match="dead"):
        gptq_layer(np.ones((2, 3)), LayerHessian("dead", np.zeros((3, 3)), 5), parse_format("mxint4_16"))


def test_shape_mismatch():
    with pytest.raises(ValueError):
        gptq_layer(np.ones((2, 3)), LayerHessian("x", np.eye(4), 4), parse_format("mxint4_16"))


# -- whole model ---------------------------------------------------------------


def test_model_hessians_psd_and_match_capture(tiny):
    ckpt, ds = tiny
    calib = ds.calibration(16)
    hess = model_hessians(ckpt, calib)
    assert set(hess) == set(ckpt.quantizable_names())
    for h in hess.values():
        assert np.allclose(h.H, h.H.T, rtol=0, atol=1e-10 * np.abs(h.H).max())
        assert np.linalg.eigvalsh(h.H).min() >= -1e-8 * np.trace(h.H)
        assert h.n_samples == 16 * 64
    # independent accumulation of one layer
    acc = HessianAccumulator()
    capture_inputs(ckpt, calib, lambda name, x: acc.add(x.T) if name == "layers.0.Wo" else None)
    assert np.allclose(acc.result().H, hess["layers.0.Wo"].H, rtol=1e-12)
    assert np.array_equal(hess["layers.0.Wq"].H, hess["layers.0.Wv"].H)


def test_exact_grid_model_is_unchanged(tiny):
    ckpt, ds = tiny
    fmt = parse_format("mxint6_16")
    on_grid = replace_tensors(ckpt, {n: rtn_quantize(ckpt.tensors[n], fmt).dequant for n in ckpt.quantizable_names()})
    q, reports = gptq_model(on_grid, fmt, ds.calibration(16))
    for n in ckpt.quantizable_names():
        assert np.array_equal(q.tensors[n], on_grid.tensors[n])
    assert all(r.rtn_mse == 0 and r.gptq_mse == 0 for r in reports)
    valid = ds.valid[:32]
    assert abs(eval_nll(q, valid) - eval_nll(on_grid, valid)) < 1e-6


def test_model_reports_fallback_and_schema(tiny):
    ckpt, ds = tiny
    hess = model_hessians(ckpt, ds.calibration(32))
    for name in ("mxint2_32", "mxint4_128", "mxfp6_e2m3_16"):
        _, reports = gptq_model(ckpt, parse_format(name), None, hessians=hess)
        for r in reports:
            assert r.gptq_mse <= r.rtn_mse
            assert set(r.to_json()) == {"layer", "format", "damp", "rtn_mse", "gptq_mse", "sqnr_rtn_db",
                                        "sqnr_gptq_db", "seconds"}
