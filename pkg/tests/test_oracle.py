import time

import numpy as np
import pytest

from paraformer.attention import GammaWeights, gpa_exact
from paraformer.oracle import (
    OracleTolerance,
    dft_dc_oracle,
    finite_diff_grad,
    horner_gpa,
    naive_gpa,
    scaling_benchmark,
)


def test_tolerance_validation():
    with pytest.raises(ValueError):
        OracleTolerance(0.0)
    t = OracleTolerance()
    assert t.rel_tol == 1e-10 and t.abs_floor == 1e-12
    assert t.close([1.0, 2.0], [1.0, 2.0 + 1e-12]) and not t.close([1.0], [1.1])


def test_naive_gpa_cases(rng):
    a = rng.random((5, 5))
    a /= a.sum(1, keepdims=True)
    v = rng.standard_normal((5, 2))
    assert np.array_equal(naive_gpa(a, v, [0.4]), 0.4 * v)
    g = GammaWeights.explicit(rng.standard_normal(6))
    assert np.max(np.abs(naive_gpa(a, v, g.numpy()) - gpa_exact(a, v, g))) < 1e-12
    half = np.full((2, 2), 0.5)
    v2 = rng.standard_normal((2, 3))
    gam = np.array([0.3, 0.2, 0.4, 0.1])
    assert np.max(np.abs(naive_gpa(half, v2, gam) - (0.3 * v2 + 0.7 * half @ v2))) < 1e-15
    assert np.max(np.abs(horner_gpa(a, v, g.numpy()) - naive_gpa(a, v, g.numpy()))) < 1e-12


def test_finite_diff_quadratic():
    params = {"x": np.array([1.5, -2.0])}
    est = finite_diff_grad(lambda p: float((p["x"] ** 2).sum()), params, [("x", 0), ("x", 1)])
    assert np.allclose(est, [3.0, -4.0], atol=1e-8)
    assert params["x"].tolist() == [1.5, -2.0]
    with pytest.raises(FloatingPointError):
        finite_diff_grad(lambda p: float("nan"), params, [("x", 0)])


def test_finite_diff_disconnected_parameter():
    from paraformer.model import ModelParams, ParaFormerConfig
    from paraformer.model import GraphOperators
    from paraformer.training import evaluate_loss
    from paraformer.verify import random_instance

    graph, x, y = random_instance(0)
    cfg = ParaFormerConfig(K=2, beta=1.0, d_hidden=4, dropout_rate=0.0)
    p = ModelParams.init(cfg, x.shape[1], 3)
    ops = GraphOperators.build(x, graph)
    est = finite_diff_grad(lambda t: evaluate_loss(ModelParams(t), ops, y, np.arange(12), cfg), p.tensors,
                           [("attn.w_q", 0), ("attn.w_v", 3)])
    assert np.all(np.abs(est) < 1e-8)


def test_dft_oracle_cases(rng):
    const = np.full((6, 1), 2.5)
    assert np.max(np.abs(dft_dc_oracle(const) - const)) < 1e-12
    alt = np.array([[1.0], [-1.0]] * 4)
    assert np.max(np.abs(dft_dc_oracle(alt))) < 1e-12
    h = rng.standard_normal((8, 3))
    assert np.max(np.abs(dft_dc_oracle(h) - h.mean(0))) < 1e-10


def test_benchmark_bookkeeping(tmp_path):
    res = scaling_benchmark("gpa_scalable", [64], d=8, K=3, repeats=5, out_csv=tmp_path / "b.csv")
    assert len(res["rows"]) == 5 and np.isnan(res["slope"])
    times = [r["seconds"] for r in res["rows"]]
    assert res["median_seconds"][0] == float(np.median(times))
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "op,n,d,K,repeat,seconds" and len(lines) == 6
    with pytest.raises(ValueError):
        scaling_benchmark("gpa_magic", [8], repeats=1)
    with pytest.raises(ValueError):
        scaling_benchmark("gpa_scalable", [])
