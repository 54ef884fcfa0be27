"""Attention kernels: projections, dense softmax attention, the linear
factorization, and Generalized PageRank Attention (exact and scalable).

Every kernel is written against the ``@``/``*``/``+`` operators plus the
polymorphic helpers from :mod:`paraformer.autodiff`, so it accepts plain
ndarrays (for verification) as well as autodiff Tensors (for training).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

SCALE_MODES = ("inv_sqrt_d", "inv_sqrt_n", "none")


class NotStochasticError(ValueError):
    pass


@dataclass
class AttentionParams:
    w_q: object
    w_k: object
    w_v: object
    scale_mode: str = "inv_sqrt_d"

    def __post_init__(self):
        shapes = {tuple(w.shape) for w in (self.w_q, self.w_k, self.w_v)}
        if len(shapes) != 1:
            raise ValueError(f"W_Q, W_K, W_V must share one shape, got {sorted(shapes)}")
        if self.scale_mode not in SCALE_MODES:
            raise ValueError(f"unknown scale_mode {self.scale_mode!r}")
        for w in (self.w_q, self.w_k, self.w_v):
            if not np.all(np.isfinite(ad.value(w))):
                raise ValueError("attention weights must be finite")

    @property
    def d_in(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_hidden(self) -> int:
        return self.w_q.shape[1]

    @classmethod
    def init(cls, d_in: int, d_hidden: int, rng: np.random.Generator, scale_mode="inv_sqrt_d"):
        bound = 1.0 / math.sqrt(d_in)
        ws = [rng.uniform(-bound, bound, size=(d_in, d_hidden)) for _ in range(3)]
        return cls(*ws, scale_mode=scale_mode)


@dataclass
class GammaWeights:
    """GPR coefficients gamma_0..gamma_K and how they were initialized."""

    values: object
    learnable: bool = True
    init_policy: str = "ppr"

    @property
    def K(self) -> int:
        return self.values.shape[0] - 1

    def __getitem__(self, k):
        return self.values[k]

    def __len__(self):
        return self.values.shape[0]

    def numpy(self) -> np.ndarray:
        return np.array(ad.value(self.values), dtype=np.float64)

    @classmethod
    def ppr(cls, K: int, alpha: float = 0.1, learnable: bool = True) -> "GammaWeights":
        """alpha * (1 - alpha)^k, with the last weight taking the whole tail so the sum is 1."""
        if not 0.0 < alpha < 1.0:
            raise ValueError("damping factor must lie in (0, 1)")
        g = alpha * (1.0 - alpha) ** np.arange(K + 1, dtype=np.float64)
        g[-1] = (1.0 - alpha) ** K
        return cls(g, learnable, f"ppr({alpha})")

    @classmethod
    def uniform(cls, K: int, learnable: bool = True) -> "GammaWeights":
        return cls(np.full(K + 1, 1.0 / (K + 1)), learnable, "uniform")

    @classmethod
    def explicit(cls, values, learnable: bool = True) -> "GammaWeights":
        return cls(np.array(values, dtype=np.float64), learnable, "explicit")

    @classmethod
    def from_policy(cls, policy: str, K: int, learnable: bool = True) -> "GammaWeights":
        """Parse ``"ppr(0.1)"``, ``"ppr"``, ``"uniform"`` or ``"explicit(a,b,...)"``."""
        policy = policy.strip()
        if policy == "ppr":
            return cls.ppr(K, learnable=learnable)
        if policy.startswith("ppr(") and policy.endswith(")"):
            return cls.ppr(K, float(policy[4:-1]), learnable)
        if policy == "uniform":
            return cls.uniform(K, learnable)
        if policy.startswith("explicit(") and policy.endswith(")"):
            vals = [float(v) for v in policy[9:-1].split(",")]
            if len(vals) != K + 1:
                raise ValueError(f"explicit gamma needs {K + 1} values, got {len(vals)}")
            return cls.explicit(vals, learnable)
        raise ValueError(f"unknown gamma init policy {policy!r}")


@dataclass
class AttentionFactors:
    q_hat: object  # rows sum to one
    k_hat: object  # columns sum to one

    def materialize(self) -> np.ndarray:
        """The n x n matrix Q_hat K_hat^T (test and diagnostics only)."""
        return ad.value(self.q_hat) @ ad.value(self.k_hat).T


def _check_finite(*xs, what="input"):
    for x in xs:
        if not np.all(np.isfinite(ad.value(x))):
            raise FloatingPointError(f"non-finite {what}")


def project(h, p: AttentionParams):
    if h.shape[1] != p.d_in:
        raise ValueError(f"features have {h.shape[1]} columns, weights expect {p.d_in}")
    return h @ p.w_q, h @ p.w_k, h @ p.w_v


def _scale(scale_mode: str, n: int, d: int) -> float:
    if scale_mode == "inv_sqrt_d":
        return 1.0 / math.sqrt(d)
    if scale_mode == "inv_sqrt_n":
        return 1.0 / math.sqrt(n)
    if scale_mode == "none":
        return 1.0
    raise ValueError(f"unknown scale_mode {scale_mode!r}")


def attention_logits(q, k, scale_mode: str = "inv_sqrt_d"):
    if q.shape[1] != k.shape[1]:
        raise ValueError("Q and K need the same feature width")
    logits = (q @ k.T) * _scale(scale_mode, q.shape[0], q.shape[1])
    _check_finite(logits, what="attention logits")
    return logits


def dense_attention(q, k, v, scale_mode: str = "inv_sqrt_d"):
    """Row-softmax attention; returns (A_hat, A_hat @ V)."""
    if k.shape[0] != v.shape[0]:
        raise ValueError("K and V need the same number of rows")
    a = ad.softmax(attention_logits(q, k, scale_mode), axis=1)
    return a, a @ v


def linear_attention_factors(q, k) -> AttentionFactors:
    """Softmax Q over features (per row) and K over nodes (per column)."""
    if q.shape != k.shape:
        raise ValueError(f"Q and K shapes differ: {q.shape} vs {k.shape}")
    _check_finite(q, k)
    return AttentionFactors(q_hat=ad.softmax(q, axis=1), k_hat=ad.softmax(k, axis=0))


def check_row_stochastic(a, tol: float = 1e-8) -> None:
    av = ad.value(a)
    if av.ndim != 2 or av.shape[0] != av.shape[1]:
        raise NotStochasticError(f"expected a square matrix, got shape {av.shape}")
    dev = np.max(np.abs(av.sum(axis=1) - 1.0)) if av.size else 0.0
    if dev > tol or np.any(av < -tol):
        raise NotStochasticError(f"matrix is not row-stochastic (max row-sum deviation {dev:.3g})")


def gpa_exact(a, v, gamma: GammaWeights, check: bool = True, tol: float = 1e-8,
              materialize_powers: bool = True):
    """Z = sum_k gamma_k A^k V.

    With ``materialize_powers`` the powers A^k are formed explicitly by
    repeated n x n products (O(K n^3)); otherwise A is applied K times to V
    (O(K n^2 d), same result up to rounding). ``check=False`` admits
    arbitrary square matrices for spectral probes.
    """
    if check:
        check_row_stochastic(a, tol)
    if a.shape[1] != v.shape[0]:
        raise ValueError("A and V do not conform")
    z = gamma[0] * v
    if materialize_powers:
        power = None
        for k in range(1, gamma.K + 1):
            power = a if power is None else power @ a
            z = z + gamma[k] * (power @ v)
    else:
        u = v
        for k in range(1, gamma.K + 1):
            u = a @ u
            z = z + gamma[k] * u
    return z


def gpa_scalable(f: AttentionFactors, v, gamma: GammaWeights):
    """Scalable GPA: Z = gamma_0 V + sum_k gamma_k Q_hat (K_hat^T Q_hat)^(k-1) K_hat^T V.

    No n x n matrix is formed; cost is O(K n d^2).
    """
    q_hat, k_hat = f.q_hat, f.k_hat
    if k_hat.shape[0] != v.shape[0] or q_hat.shape[1] != k_hat.shape[1]:
        raise ValueError("factors and V do not conform")
    z = gamma[0] * v
    m = k_hat.T @ v
    kq = k_hat.T @ q_hat  # d x d, computed once
    for k in range(1, gamma.K + 1):
        z = z + gamma[k] * (q_hat @ m)
        m = kq @ m
    return z


def gpa_forward(h, p: AttentionParams, gamma: GammaWeights, mode: str = "scalable",
                materialize_powers: bool = True):
    """Project, build the attention operator for ``mode`` and run GPA."""
    q, k, v = project(h, p)
    if mode == "exact":
        a, _ = dense_attention(q, k, v, p.scale_mode)
        return gpa_exact(a, v, gamma, check=False, materialize_powers=materialize_powers)
    if mode == "scalable":
        return gpa_scalable(linear_attention_factors(q, k), v, gamma)
    raise ValueError(f"unknown attention mode {mode!r}")
