"""Reference architectures for the depth sweeps.

``VanillaConfig``: ``depth`` stacked softmax-attention blocks, independent
weights, no residual path, so repeated averaging is left unchecked.
``SGFormerLikeConfig``: one linear-attention layer blended with its input.

Both expose the same three hooks ``train`` uses for ParaFormer:
``init_params``, ``logits`` and ``representation``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import dense_attention
from .model import GraphOperators, ModelParams, _apply_x, _glorot, head_logits


def _head_params(rng, h, c):
    return {
        "head.0.weight": _glorot(rng, h, h),
        "head.0.bias": np.zeros(h),
        "head.1.weight": _glorot(rng, h, c),
        "head.1.bias": np.zeros(c),
    }


def _input(ops, p, dropout_rate, train_mode, rng):
    h = ad.relu(_apply_x(ops.x, p["input_proj.weight"]) + p["input_proj.bias"])
    return ad.dropout(h, dropout_rate, rng, train_mode)


@dataclass
class VanillaConfig:
    depth: int = 1
    d_hidden: int = 64
    dropout_rate: float = 0.5
    scale_mode: str = "inv_sqrt_d"
    kind = "vanilla"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    def init_params(self, d_in, c, seed=0) -> ModelParams:
        rng = np.random.default_rng(seed)
        h = self.d_hidden
        t = {"input_proj.weight": _glorot(rng, d_in, h), "input_proj.bias": np.zeros(h)}
        for layer in range(self.depth):
            for w in ("w_q", "w_k", "w_v"):
                t[f"layer{layer}.{w}"] = _glorot(rng, h, h)
        t.update(_head_params(rng, h, c))
        return ModelParams(t)

    def representation(self, ops: GraphOperators, p, train_mode=False, rng=None):
        h = _input(ops, p, self.dropout_rate, train_mode, rng)
        for layer in range(self.depth):
            q = h @ p[f"layer{layer}.w_q"]
            k = h @ p[f"layer{layer}.w_k"]
            v = h @ p[f"layer{layer}.w_v"]
            _, h = dense_attention(q, k, v, self.scale_mode)
        return h

    def logits(self, ops, p, train_mode=False, rng=None):
        return head_logits(self.representation(ops, p, train_mode, rng), p, self, train_mode, rng)


@dataclass
class SGFormerLikeConfig:
    """Single global layer: normalized linear attention plus an identity blend."""

    depth: int = 1  # accepted for sweep symmetry; the architecture has one layer
    d_hidden: int = 64
    dropout_rate: float = 0.5
    alpha: float = 0.5
    kind = "sgformer_like"

    def init_params(self, d_in, c, seed=0) -> ModelParams:
        rng = np.random.default_rng(seed)
        h = self.d_hidden
        t = {"input_proj.weight": _glorot(rng, d_in, h), "input_proj.bias": np.zeros(h)}
        for w in ("w_q", "w_k", "w_v"):
            t[f"attn.{w}"] = _glorot(rng, h, h)
        t.update(_head_params(rng, h, c))
        return ModelParams(t)

    def representation(self, ops: GraphOperators, p, train_mode=False, rng=None):
        h = _input(ops, p, self.dropout_rate, train_mode, rng)
        n = h.shape[0]
        q = h @ p["attn.w_q"]
        k = h @ p["attn.w_k"]
        v = h @ p["attn.w_v"]
        q = q / ad.sqrt((q * q).sum())
        k = k / ad.sqrt((k * k).sum())
        num = q @ (k.T @ v) + n * v
        den = q @ k.sum(axis=0, keepdims=True).T + n
        out = num / den
        return self.alpha * out + (1.0 - self.alpha) * h

    def logits(self, ops, p, train_mode=False, rng=None):
        return head_logits(self.representation(ops, p, train_mode, rng), p, self, train_mode, rng)


BASELINES = {"vanilla": VanillaConfig, "vanilla_transformer": VanillaConfig, "sgformer_like": SGFormerLikeConfig}
