"""Slow, obviously-correct reference computations.

Nothing here imports the optimized kernels it is used to check, except
``scaling_benchmark`` which times them.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class OracleTolerance:
    rel_tol: float = 1e-10
    abs_floor: float = 1e-12

    def __post_init__(self):
        if self.rel_tol <= 0 or self.abs_floor <= 0:
            raise ValueError("tolerances must be positive")

    def close(self, got, want) -> bool:
        got, want = np.asarray(got, dtype=float), np.asarray(want, dtype=float)
        err = np.linalg.norm(got - want)
        return bool(err <= self.rel_tol * max(np.linalg.norm(want), self.abs_floor))


ALGEBRAIC = OracleTolerance(1e-10)
GRADIENT = OracleTolerance(1e-4)


def naive_matmul(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def naive_softmax_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for i, row in enumerate(x):
        e = [np.exp(v - max(row)) for v in row]
        total = sum(e)
        out[i] = [v / total for v in e]
    return out


def naive_gpa(a, v, gamma) -> np.ndarray:
    """sum_k gamma_k A^k V with every power formed by a full n x n product."""
    a, v = np.asarray(a, dtype=float), np.asarray(v, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    n = a.shape[0]
    powers = [np.eye(n)]
    for _ in range(1, len(gamma)):
        powers.append(powers[-1] @ a)
    z = np.zeros_like(v)
    for g, p in zip(gamma, powers):
        z += g * (p @ v)
    return z


def horner_gpa(a, v, gamma) -> np.ndarray:
    """Same polynomial by Horner's rule: ((g_K A + g_{K-1} I) A + ...) V."""
    a, v = np.asarray(a, dtype=float), np.asarray(v, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    n = a.shape[0]
    poly = gamma[-1] * np.eye(n)
    for g in gamma[-2::-1]:
        poly = poly @ a + g * np.eye(n)
    return poly @ v


def finite_diff_grad(loss_fn, params: dict, coords, step: float = 1e-4) -> np.ndarray:
    """Central differences (f(p + h e_i) - f(p - h e_i)) / 2h.

    ``coords`` is a sequence of ``(name, flat_index)`` pairs; ``params`` is
    perturbed in place and restored.
    """
    out = np.empty(len(coords))
    for i, (name, flat) in enumerate(coords):
        arr = params[name]
        view = arr.reshape(-1)
        orig = view[flat]
        view[flat] = orig + step
        f_plus = float(loss_fn(params))
        view[flat] = orig - step
        f_minus = float(loss_fn(params))
        view[flat] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError(f"non-finite loss while perturbing {name}[{flat}]")
        out[i] = (f_plus - f_minus) / (2.0 * step)
    return out


def dft_dc_oracle(h, imag_tol: float = 1e-10) -> np.ndarray:
    """DC part of each column via an explicit DFT matrix: keep bin 0, invert."""
    h = np.asarray(h, dtype=float)
    n = h.shape[0]
    idx = np.arange(n)
    f = np.exp(-2j * np.pi * np.outer(idx, idx) / n) / np.sqrt(n)
    spectrum = f @ h
    keep = np.zeros((n, 1))
    keep[0] = 1.0
    dc = f.conj().T @ (spectrum * keep)
    if np.max(np.abs(dc.imag), initial=0.0) > imag_tol:
        raise FloatingPointError("imaginary residue in inverse DFT")
    return dc.real


def _fit_slope(ns, seconds) -> float:
    x, y = np.log(np.asarray(ns, dtype=float)), np.log(np.asarray(seconds, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def scaling_benchmark(op: str, sizes, d: int = 64, K: int = 10, repeats: int = 5,
                      seed: int = 0, out_csv=None, single_thread: bool = True) -> dict:
    """Median wall-clock of one GPA evaluation per size and the log-log slope.

    ``op`` is ``gpa_scalable`` (factorized, never n x n) or
    ``gpa_exact_dense`` (softmax attention with explicit matrix powers).
    Timed region: attention/factor construction plus propagation, from
    ready Q, K, V. One warm-up run per size is discarded.
    """
    from threadpoolctl import threadpool_limits

    from .attention import GammaWeights, dense_attention, gpa_exact, gpa_scalable, linear_attention_factors

    sizes = [int(s) for s in sizes]
    if not sizes:
        raise ValueError("need at least one size")
    gamma = GammaWeights.ppr(K)
    rng = np.random.default_rng(seed)
    rows, medians = [], []

    def run(q, k, v):
        if op == "gpa_scalable":
            return gpa_scalable(linear_attention_factors(q, k), v, gamma)
        if op == "gpa_exact_dense":
            a, _ = dense_attention(q, k, v)
            return gpa_exact(a, v, gamma, check=False, materialize_powers=True)
        raise ValueError(f"unknown benchmark op {op!r}")

    limits = threadpool_limits(1) if single_thread else None
    try:
        for n in sizes:
            q, k, v = (rng.standard_normal((n, d)) for _ in range(3))
            run(q, k, v)
            times = []
            for r in range(repeats):
                t0 = time.perf_counter()
                run(q, k, v)
                times.append(time.perf_counter() - t0)
                rows.append({"op": op, "n": n, "d": d, "K": K, "repeat": r, "seconds": times[-1]})
            medians.append(statistics.median(times))
    finally:
        if limits is not None:
            limits.unregister()

    slope = _fit_slope(sizes, medians) if len(sizes) > 1 else float("nan")
    if out_csv is not None:
        path = Path(out_csv)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["op", "n", "d", "K", "repeat", "seconds"])
            w.writeheader()
            w.writerows(rows)
    return {"op": op, "sizes": sizes, "median_seconds": medians, "slope": slope, "rows": rows}
