"""ParaFormer forward pass: auxiliary GNN branches, local/global fusion,
classification heads and losses."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .attention import (
    SCALE_MODES,
    AttentionFactors,
    AttentionParams,
    GammaWeights,
    dense_attention,
    gpa_exact,
    gpa_scalable,
    linear_attention_factors,
    project,
)
from .graph_io import Graph, normalize_adjacency

GNN_VARIANTS = ("gcn2", "gprgnn")
ATTENTION_MODES = ("exact", "scalable")


@dataclass
class ParaFormerConfig:
    K: int = 10
    beta: float = 0.7
    d_hidden: int = 64
    dropout_rate: float = 0.5
    gnn_variant: str = "gcn2"
    attention_mode: str = "scalable"
    scale_mode: str = "inv_sqrt_d"
    gamma_init: str = "ppr(0.1)"
    learnable_gamma: bool = True
    combined_variant: bool = False
    gnn_input: str = "hidden"  # "hidden": projected features, "raw": X
    gnn_K: int = 10
    gnn_gamma_init: str = "ppr(0.1)"
    input_activation: str = "relu"
    use_attention: bool = True  # False drops GPA: Z = V (ablation without GPR)

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.K < 0:
            raise ValueError("K must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.gnn_variant not in GNN_VARIANTS:
            raise ValueError(f"gnn_variant must be one of {GNN_VARIANTS}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"attention_mode must be one of {ATTENTION_MODES}")
        if self.scale_mode not in SCALE_MODES:
            raise ValueError(f"scale_mode must be one of {SCALE_MODES}")
        if self.gnn_input not in ("hidden", "raw"):
            raise ValueError("gnn_input must be 'hidden' or 'raw'")
        if self.input_activation not in ("relu", "none"):
            raise ValueError("input_activation must be 'relu' or 'none'")
        if self.combined_variant and self.gnn_variant != "gprgnn":
            raise ValueError("combined_variant requires gnn_variant='gprgnn'")

    @classmethod
    def from_dict(cls, raw: dict) -> "ParaFormerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**raw)


def _glorot(rng, fan_in, fan_out):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class ModelParams:
    """Named trainable arrays of a ParaFormer model.

    Names: ``input_proj.{weight,bias}``, ``attn.{w_q,w_k,w_v}``, ``gamma``,
    ``gnn.*`` (per variant), ``gamma_adj`` (combined variant) and
    ``head.{0,1}.{weight,bias}``. Non-learnable gamma is stored under
    ``frozen`` so the optimizer never touches it.
    """

    def __init__(self, tensors: dict[str, np.ndarray], frozen: dict[str, np.ndarray] | None = None):
        self.tensors = dict(tensors)
        self.frozen = dict(frozen or {})

    def __getitem__(self, name):
        if name in self.tensors:
            return self.tensors[name]
        return self.frozen[name]

    def __contains__(self, name):
        return name in self.tensors or name in self.frozen

    def names(self):
        return list(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()},
                           {k: v.copy() for k, v in self.frozen.items()})

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    @classmethod
    def init(cls, cfg: ParaFormerConfig, d_in: int, c: int, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        h = cfg.d_hidden
        t = {
            "input_proj.weight": _glorot(rng, d_in, h),
            "input_proj.bias": np.zeros(h),
        }
        attn = AttentionParams.init(h, h, rng, cfg.scale_mode)
        t["attn.w_q"], t["attn.w_k"], t["attn.w_v"] = attn.w_q, attn.w_k, attn.w_v
        frozen = {}
        gamma = GammaWeights.from_policy(cfg.gamma_init, cfg.K).numpy()
        (t if cfg.learnable_gamma else frozen)["gamma"] = gamma
        gnn_in = h if cfg.gnn_input == "hidden" else d_in
        if cfg.combined_variant:
            t["gamma_adj"] = GammaWeights.from_policy(cfg.gnn_gamma_init, cfg.K).numpy()
        elif cfg.gnn_variant == "gcn2":
            t["gnn.0.weight"] = _glorot(rng, gnn_in, h)
            t["gnn.0.bias"] = np.zeros(h)
            t["gnn.1.weight"] = _glorot(rng, h, h)
            t["gnn.1.bias"] = np.zeros(h)
        else:
            t["gnn.lin.weight"] = _glorot(rng, gnn_in, h)
            t["gnn.lin.bias"] = np.zeros(h)
            t["gnn.gamma"] = GammaWeights.from_policy(cfg.gnn_gamma_init, cfg.gnn_K).numpy()
        t["head.0.weight"] = _glorot(rng, h, h)
        t["head.0.bias"] = np.zeros(h)
        t["head.1.weight"] = _glorot(rng, h, c)
        t["head.1.bias"] = np.zeros(c)
        return cls(t, frozen)

    def save(self, directory, config: ParaFormerConfig | None = None, extra: dict | None = None) -> Path:
        """Checkpoint: one CSV per array plus ``params.json`` (shapes, config, gamma)."""
        root = Path(directory)
        root.mkdir(parents=True, exist_ok=True)
        meta = {"tensors": {}, "frozen": {}}
        for group, store in (("tensors", self.tensors), ("frozen", self.frozen)):
            for name, arr in store.items():
                fname = f"{name}.csv"
                mat = arr.reshape(1, -1) if arr.ndim == 1 else arr
                with open(root / fname, "w") as fh:
                    fh.writelines(",".join(repr(v) for v in row) + "\n" for row in mat.tolist())
                meta[group][name] = {"file": fname, "shape": list(arr.shape)}
        if config is not None:
            meta["config"] = asdict(config)
        if "gamma" in self:
            meta["gamma"] = [float(v) for v in self["gamma"]]
        if extra:
            meta.update(extra)
        (root / "params.json").write_text(json.dumps(meta, indent=2) + "\n")
        return root

    @classmethod
    def load(cls, directory) -> tuple["ModelParams", ParaFormerConfig | None]:
        root = Path(directory)
        meta = json.loads((root / "params.json").read_text())
        stores = {}
        for group in ("tensors", "frozen"):
            stores[group] = {}
            for name, info in meta.get(group, {}).items():
                arr = np.loadtxt(root / info["file"], delimiter=",", ndmin=2)
                stores[group][name] = arr.reshape(info["shape"])
        cfg = ParaFormerConfig(**meta["config"]) if "config" in meta else None
        return cls(stores["tensors"], stores["frozen"]), cfg


@dataclass
class GraphOperators:
    """Per-graph constants reused across forward passes."""

    x: object  # dense ndarray or scipy sparse matrix
    a_norm: sp.csr_matrix  # sym_selfloop normalized adjacency
    n: int

    @classmethod
    def build(cls, x, graph: Graph, sparse_features: bool | None = None) -> "GraphOperators":
        x = np.asarray(x, dtype=np.float64) if not sp.issparse(x) else x
        if sparse_features is None:
            sparse_features = not sp.issparse(x) and x.size > 0 and np.mean(x == 0) > 0.9
        if sparse_features and not sp.issparse(x):
            x = sp.csr_matrix(x)
        return cls(x=x, a_norm=normalize_adjacency(graph, "sym_selfloop"), n=graph.n)


def gcn_layer(h, a_norm, w, activation: str = "relu", bias=None):
    """act(A_norm @ H @ W (+ b))."""
    if h.shape[1] != w.shape[0] or a_norm.shape[1] != h.shape[0]:
        raise ValueError("gcn_layer shapes do not conform")
    out = ad.spmm(a_norm, h @ w) if sp.issparse(a_norm) else a_norm @ (h @ w)
    if bias is not None:
        out = out + bias
    if activation == "relu":
        return ad.relu(out)
    if activation == "none":
        return out
    raise ValueError(f"unknown activation {activation!r}")


def gpr_propagate(h, a_norm, gamma: GammaWeights):
    """sum_k gamma_k A_norm^k H, one sparse product per hop."""
    if a_norm.shape[1] != h.shape[0]:
        raise ValueError("adjacency and features do not conform")
    out = gamma[0] * h
    cur = h
    for k in range(1, gamma.K + 1):
        cur = ad.spmm(a_norm, cur) if sp.issparse(a_norm) else a_norm @ cur
        out = out + gamma[k] * cur
    return out


def fuse(z, g, beta: float):
    """(1 - beta) Z + beta G."""
    if tuple(z.shape) != tuple(g.shape):
        raise ValueError(f"fusion inputs differ in shape: {z.shape} vs {g.shape}")
    if beta == 0.0:
        return z
    if beta == 1.0:
        return g
    return (1.0 - beta) * z + beta * g


def combined_forward(a_like, a_norm, v, lam: GammaWeights, lam_adj: GammaWeights):
    """sum_k (lam_k A_hat^k + lam'_k A^k) V.

    ``a_like`` is either a dense row-stochastic matrix or AttentionFactors, in
    which case the attention term runs through the scalable recursion.
    """
    if isinstance(a_like, AttentionFactors):
        att = gpa_scalable(a_like, v, lam)
    else:
        att = gpa_exact(a_like, v, lam, check=False, materialize_powers=False)
    return att + gpr_propagate(v, a_norm, lam_adj)


def _apply_x(x, w):
    if sp.issparse(x):
        return ad.spmm(x, w) if isinstance(w, ad.Tensor) else np.asarray(x @ w)
    return x @ w


def encode(ops: GraphOperators, p, cfg: ParaFormerConfig, train_mode: bool = False,
           rng: np.random.Generator | None = None):
    """Everything up to (and including) the fused representation Z_hat.

    ``p`` maps parameter names to arrays or Tensors. Returns
    ``(z_hat, parts)`` where ``parts`` exposes intermediate representations.
    """
    h = _apply_x(ops.x, p["input_proj.weight"]) + p["input_proj.bias"]
    if cfg.input_activation == "relu":
        h = ad.relu(h)
    h = ad.dropout(h, cfg.dropout_rate, rng, train_mode)
    attn = AttentionParams(p["attn.w_q"], p["attn.w_k"], p["attn.w_v"], cfg.scale_mode)
    gamma = GammaWeights(p["gamma"])
    q, k, v = project(h, attn)
    if not cfg.use_attention:
        z = v
        a_like = None
    elif cfg.attention_mode == "scalable":
        a_like = linear_attention_factors(q, k)
    else:
        a_like, _ = dense_attention(q, k, v, cfg.scale_mode)

    parts = {"h": h}
    if cfg.combined_variant:
        if a_like is None:
            z = gpr_propagate(v, ops.a_norm, GammaWeights(p["gamma_adj"]))
        else:
            z = combined_forward(a_like, ops.a_norm, v, gamma, GammaWeights(p["gamma_adj"]))
        parts["z"] = z
        return z, parts

    if a_like is not None:
        if isinstance(a_like, AttentionFactors):
            z = gpa_scalable(a_like, v, gamma)
        else:
            z = gpa_exact(a_like, v, gamma, check=False, materialize_powers=False)
    parts["z"] = z
    if cfg.beta == 0.0:
        return z, parts

    gin = h if cfg.gnn_input == "hidden" else ops.x
    if cfg.gnn_variant == "gcn2":
        if cfg.gnn_input == "raw":
            g = ad.relu(ad.spmm(ops.a_norm, _apply_x(ops.x, p["gnn.0.weight"])) + p["gnn.0.bias"])
        else:
            g = gcn_layer(gin, ops.a_norm, p["gnn.0.weight"], "relu", p["gnn.0.bias"])
        g = ad.dropout(g, cfg.dropout_rate, rng, train_mode)
        g = gcn_layer(g, ops.a_norm, p["gnn.1.weight"], "none", p["gnn.1.bias"])
    else:
        lin = _apply_x(gin, p["gnn.lin.weight"]) if cfg.gnn_input == "raw" else gin @ p["gnn.lin.weight"]
        g = gpr_propagate(lin + p["gnn.lin.bias"], ops.a_norm, GammaWeights(p["gnn.gamma"]))
    parts["g"] = g
    return fuse(z, g, cfg.beta), parts


def head_logits(z_hat, p, cfg: ParaFormerConfig, train_mode=False, rng=None):
    z_hat = ad.dropout(z_hat, cfg.dropout_rate, rng, train_mode)
    hid = ad.relu(z_hat @ p["head.0.weight"] + p["head.0.bias"])
    return hid @ p["head.1.weight"] + p["head.1.bias"]


def node_forward(ops: GraphOperators, p, cfg: ParaFormerConfig, train_mode: bool = False,
                 rng: np.random.Generator | None = None):
    """Class probabilities P_hat (n x c) and the fused representation Z_hat."""
    z_hat, _ = encode(ops, p, cfg, train_mode, rng)
    return ad.softmax(head_logits(z_hat, p, cfg, train_mode, rng), axis=1), z_hat


def node_logits(ops: GraphOperators, p, cfg: ParaFormerConfig, train_mode=False, rng=None):
    z_hat, _ = encode(ops, p, cfg, train_mode, rng)
    return head_logits(z_hat, p, cfg, train_mode, rng)


def graph_pool(z_hat, mode: str = "mean"):
    """Column-wise pooling of an n x d matrix to 1 x d."""
    if z_hat.shape[0] < 1:
        raise ValueError("cannot pool an empty matrix")
    if mode == "mean":
        out = ad.mean(z_hat, axis=0)
    elif mode == "sum":
        out = ad.tsum(z_hat, axis=0)
    elif mode == "max":
        out = ad.tmax(z_hat, axis=0)
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return ad.reshape(out, (1, -1))


def graph_forward(ops: GraphOperators, p, cfg: ParaFormerConfig, pool: str = "mean",
                  train_mode=False, rng=None):
    """Graph-level class probabilities (1 x c)."""
    z_hat, _ = encode(ops, p, cfg, train_mode, rng)
    g = graph_pool(z_hat, pool)
    return ad.softmax(head_logits(g, p, cfg, train_mode, rng), axis=1)


def cross_entropy_loss(p_hat, labels, mask, floor: float = 1e-12):
    """Mean negative log-likelihood of the true class over ``mask``; log is floored at 1e-12."""
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise ValueError("cross-entropy over an empty mask")
    y = np.asarray(labels)[mask]
    if np.any(y < 0):
        raise ValueError("mask includes unlabeled nodes")
    picked = ad.index(p_hat, (mask, y))
    return -ad.mean(ad.log(picked, floor))


def cross_entropy_from_logits(logits, labels, mask):
    """Same loss evaluated through log-softmax (used for training)."""
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise ValueError("cross-entropy over an empty mask")
    y = np.asarray(labels)[mask]
    logp = ad.log_softmax(logits, axis=1)
    return -ad.mean(ad.index(logp, (mask, y)))


def accuracy(pred_scores, labels, idx) -> float:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        return float("nan")
    pred = np.argmax(ad.value(pred_scores)[idx], axis=1)
    return float(np.mean(pred == np.asarray(labels)[idx]))
