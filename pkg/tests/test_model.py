import math

import numpy as np
import pytest

from paraformer import autodiff as ad
from paraformer.attention import GammaWeights, gpa_exact, linear_attention_factors
from paraformer.graph_io import Graph, normalize_adjacency
from paraformer.model import (
    GraphOperators,
    ModelParams,
    ParaFormerConfig,
    combined_forward,
    cross_entropy_loss,
    encode,
    fuse,
    gcn_layer,
    gpr_propagate,
    graph_forward,
    graph_pool,
    node_forward,
)
from paraformer.oracle import naive_matmul
from paraformer.training import compute_gradients
from paraformer.verify import random_instance


def feed_of(params):
    f = dict(params.frozen)
    f.update(params.tensors)
    return f


def test_config_validation():
    for bad in ({"beta": 1.5}, {"K": -1}, {"dropout_rate": 1.0}, {"gnn_variant": "gat"},
                {"attention_mode": "fast"}, {"combined_variant": True}):
        with pytest.raises(ValueError):
            ParaFormerConfig(**bad)
    with pytest.raises(ValueError):
        ParaFormerConfig.from_dict({"alpha": 1})
    for b in (0, 0.3, 0.5, 0.7, 1):
        ParaFormerConfig(beta=b)


def test_gcn_layer_cases(rng):
    h = rng.standard_normal((3, 3))
    assert np.array_equal(gcn_layer(h, np.eye(3), np.eye(3), "none"), h)
    a = normalize_adjacency(Graph.from_pairs(2, [(0, 1)]))
    out = gcn_layer(np.eye(2), a, np.eye(2), "none")
    assert np.allclose(out, 0.5, atol=1e-15)
    g = Graph.from_pairs(5, [(0, 1), (1, 2), (3, 4), (0, 4)])
    a = normalize_adjacency(g, dense=True)
    h, w = rng.standard_normal((5, 3)), rng.standard_normal((3, 2))
    ref = np.maximum(naive_matmul(a, naive_matmul(h, w)), 0)
    assert np.max(np.abs(gcn_layer(h, normalize_adjacency(g), w) - ref)) < 1e-12


def test_gpr_propagate_cases(rng):
    g = Graph.from_pairs(6, [(i, i + 1) for i in range(5)])
    a = normalize_adjacency(g)
    h = rng.standard_normal((6, 2))
    assert np.array_equal(gpr_propagate(h, a, GammaWeights.explicit([1, 0, 0])), h)
    assert np.allclose(gpr_propagate(h, a, GammaWeights.explicit([0, 1])), a @ h, atol=1e-15)
    gam = GammaWeights.ppr(4)
    ref = gpa_exact(a.toarray(), h, gam, check=False)
    assert np.max(np.abs(gpr_propagate(h, a, gam) - ref)) < 1e-12


def test_fuse_cases(rng):
    z, g = np.array([[1.0, 1.0]]), np.array([[0.0, 2.0]])
    assert np.array_equal(fuse(z, g, 0), z) and np.array_equal(fuse(z, g, 1), g)
    assert np.allclose(fuse(z, g, 0.7), [[0.3, 1.7]], atol=1e-15)
    with pytest.raises(ValueError):
        fuse(z, np.ones((2, 2)), 0.5)
    z, g = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    for b in (0.3, 0.5, 0.7):
        assert np.max(np.abs(fuse(z, g, b) - ((1 - b) * fuse(z, g, 0) + b * fuse(z, g, 1)))) < 1e-15


def test_combined_forward_linearity(rng):
    n = 7
    g = Graph.from_pairs(n, [(i, (i + 2) % n) for i in range(n)])
    a_norm = normalize_adjacency(g)
    f = linear_attention_factors(rng.standard_normal((n, 3)), rng.standard_normal((n, 3)))
    a_hat = f.materialize()
    v = rng.standard_normal((n, 3))
    lam, lam2 = GammaWeights.explicit(rng.standard_normal(4)), GammaWeights.explicit(rng.standard_normal(4))
    zero = GammaWeights.explicit(np.zeros(4))
    assert np.allclose(combined_forward(a_hat, a_norm, v, lam, zero), gpa_exact(a_hat, v, lam), atol=1e-13)
    assert np.allclose(combined_forward(a_hat, a_norm, v, zero, lam2), gpr_propagate(v, a_norm, lam2), atol=1e-13)
    ref = gpa_exact(a_hat, v, lam) + gpa_exact(a_norm.toarray(), v, lam2, check=False)
    for a_like in (a_hat, f):
        got = combined_forward(a_like, a_norm, v, lam, lam2)
        assert np.linalg.norm(got - ref) <= 1e-10 * np.linalg.norm(ref)


@pytest.mark.parametrize("variant", [
    {}, {"gnn_variant": "gprgnn"}, {"attention_mode": "exact"}, {"combined_variant": True, "gnn_variant": "gprgnn"},
    {"gnn_input": "raw"}, {"use_attention": False}, {"learnable_gamma": False}, {"beta": 0.0},
])
def test_node_forward_prediction_rows(variant):
    graph, x, _ = random_instance(3)
    cfg = ParaFormerConfig(K=3, d_hidden=6, **variant)
    p = ModelParams.init(cfg, x.shape[1], 4, seed=1)
    ops = GraphOperators.build(x, graph)
    probs, z = node_forward(ops, feed_of(p), cfg)
    assert probs.shape == (12, 4) and z.shape == (12, 6)
    assert np.max(np.abs(probs.sum(1) - 1)) < 1e-9
    assert np.all((probs > 0) & (probs < 1))
    again, _ = node_forward(ops, feed_of(p), cfg)
    assert np.array_equal(probs, again)


def test_single_node_graph():
    cfg = ParaFormerConfig(K=2, d_hidden=3)
    p = ModelParams.init(cfg, 2, 3)
    probs, _ = node_forward(GraphOperators.build(np.ones((1, 2)), Graph.from_pairs(1, [])), feed_of(p), cfg)
    assert probs.shape == (1, 3) and abs(probs.sum() - 1) < 1e-12


def test_beta_one_disconnects_attention():
    graph, x, y = random_instance(5)
    cfg = ParaFormerConfig(K=3, beta=1.0, d_hidden=4, dropout_rate=0.0)
    p = ModelParams.init(cfg, x.shape[1], 3, seed=0)
    _, grads = compute_gradients(p, GraphOperators.build(x, graph), y, np.arange(12), cfg, train_mode=False)
    for name in ("attn.w_q", "attn.w_k", "attn.w_v", "gamma"):
        assert not np.any(grads[name])
    assert np.any(grads["gnn.0.weight"])


def test_dropout_zero_train_equals_eval():
    graph, x, _ = random_instance(6)
    cfg = ParaFormerConfig(K=2, d_hidden=4, dropout_rate=0.0)
    p = ModelParams.init(cfg, x.shape[1], 3)
    ops = GraphOperators.build(x, graph)
    a, _ = node_forward(ops, feed_of(p), cfg, train_mode=True, rng=np.random.default_rng(0))
    b, _ = node_forward(ops, feed_of(p), cfg, train_mode=False)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("gnn", ["gcn2", "gprgnn"])
def test_node_forward_permutation_equivariance(gnn):
    graph, x, _ = random_instance(8)
    cfg = ParaFormerConfig(K=3, d_hidden=5, gnn_variant=gnn)
    p = ModelParams.init(cfg, x.shape[1], 3, seed=4)
    perm = np.random.default_rng(0).permutation(12)
    inv = np.argsort(perm)
    base, _ = node_forward(GraphOperators.build(x, graph), feed_of(p), cfg)
    moved, _ = node_forward(GraphOperators.build(x[perm], graph.permute(inv)), feed_of(p), cfg)
    assert np.max(np.abs(moved - base[perm])) < 1e-12


def test_cross_entropy_cases(rng):
    y = np.array([0, 2, 1])
    perfect = np.eye(3)[y]
    assert cross_entropy_loss(perfect, y, np.arange(3)) <= 1e-11
    uni = np.full((3, 7), 1 / 7)
    assert abs(cross_entropy_loss(uni, y, np.arange(3)) - math.log(7)) < 1e-14
    p = ad.softmax(rng.standard_normal((5, 3)), 1)
    lab = np.array([0, 1, 2, 1, 0])
    mask = np.array([0, 2, 3])
    ref = -sum(math.log(p[i, lab[i]]) for i in mask) / 3
    assert abs(cross_entropy_loss(p, lab, mask) - ref) < 1e-12
    assert cross_entropy_loss(p, lab, mask) >= 0
    with pytest.raises(ValueError):
        cross_entropy_loss(p, lab, [])


def test_graph_pool_cases(rng):
    row = rng.standard_normal((1, 4))
    for mode in ("mean", "sum", "max"):
        assert np.allclose(graph_pool(row, mode), row)
    z = np.array([[1.0, 3.0], [3.0, 1.0]])
    assert graph_pool(z, "mean").tolist() == [[2.0, 2.0]]
    assert graph_pool(z, "max").tolist() == [[3.0, 3.0]]
    big = rng.standard_normal((20, 6))
    assert np.max(np.abs(graph_pool(big) - np.ones(20) @ big / 20)) < 1e-14
    with pytest.raises(ValueError):
        graph_pool(np.zeros((0, 3)))


def test_graph_forward_is_distribution():
    graph, x, _ = random_instance(2)
    cfg = ParaFormerConfig(K=2, d_hidden=4)
    p = ModelParams.init(cfg, x.shape[1], 5)
    out = graph_forward(GraphOperators.build(x, graph), feed_of(p), cfg, pool="max")
    assert out.shape == (1, 5) and abs(out.sum() - 1) < 1e-12


def test_checkpoint_round_trip(tmp_path):
    cfg = ParaFormerConfig(K=4, d_hidden=5, gnn_variant="gprgnn", learnable_gamma=False)
    p = ModelParams.init(cfg, 7, 3, seed=9)
    p.save(tmp_path / "ck", cfg)
    q, cfg2 = ModelParams.load(tmp_path / "ck")
    assert cfg2 == cfg
    assert set(q.tensors) == set(p.tensors) and set(q.frozen) == {"gamma"}
    for k in p.tensors:
        assert np.array_equal(p.tensors[k], q.tensors[k])


def test_sparse_features_path_matches_dense(rng):
    graph, _, _ = random_instance(1)
    x = (rng.random((12, 30)) < 0.05).astype(float)
    cfg = ParaFormerConfig(K=2, d_hidden=4)
    p = ModelParams.init(cfg, 30, 3)
    dense = GraphOperators.build(x, graph, sparse_features=False)
    sparse = GraphOperators.build(x, graph)
    assert not isinstance(sparse.x, np.ndarray)
    a, _ = encode(dense, feed_of(p), cfg)
    b, _ = encode(sparse, feed_of(p), cfg)
    assert np.max(np.abs(a - b)) < 1e-12
