"""Over-smoothing and spectral measurements, probes and the depth-sweep driver."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist

from . import autodiff as ad
from .attention import check_row_stochastic

UNDEFINED = math.inf  # marker for ratios whose denominator vanishes


def _as_matrix(h) -> np.ndarray:
    h = np.asarray(ad.value(h), dtype=np.float64)
    if h.ndim == 1:
        h = h[:, None]
    if h.ndim != 2:
        raise ValueError("expected an n x d matrix")
    return h


def pairwise_l2(h) -> float:
    """Mean L2 distance over ordered pairs i != j."""
    h = _as_matrix(h)
    if h.shape[0] < 2:
        raise ValueError("pairwise distance needs at least two rows")
    return float(np.mean(pdist(h, "euclidean")))


def cosine_sim(h, return_excluded: bool = False):
    """Mean cosine similarity over ordered pairs of nonzero rows.

    Zero rows are dropped (with a warning); their count is returned when
    ``return_excluded`` is set.
    """
    h = _as_matrix(h)
    nonzero = np.linalg.norm(h, axis=1) > 0
    excluded = int(np.sum(~nonzero))
    if excluded == h.shape[0]:
        raise ValueError("all rows are zero")
    if excluded:
        warnings.warn(f"cosine_sim: excluded {excluded} zero rows", RuntimeWarning, stacklevel=2)
    kept = h[nonzero]
    if kept.shape[0] < 2:
        raise ValueError("cosine similarity needs at least two nonzero rows")
    val = float(np.mean(1.0 - pdist(kept, "cosine")))
    return (val, excluded) if return_excluded else val


@dataclass
class SpectralSplit:
    dc: np.ndarray
    hc: np.ndarray

    def check(self, tol: float = 1e-10) -> None:
        if np.max(np.ptp(self.dc, axis=0), initial=0.0) > tol:
            raise AssertionError("dc columns are not constant")
        if np.max(np.abs(self.hc.sum(axis=0)), initial=0.0) > tol * max(1.0, np.abs(self.hc).max(initial=0.0)):
            raise AssertionError("hc columns do not sum to zero")


def spectral_split(h) -> SpectralSplit:
    """DC[H] = (1/n) 1 1^T H (column means) and HC[H] = H - DC[H]."""
    h = _as_matrix(h)
    if h.shape[0] < 1:
        raise ValueError("empty matrix")
    dc = np.broadcast_to(h.mean(axis=0, keepdims=True), h.shape).copy()
    return SpectralSplit(dc, h - dc)


def hc_energy_ratio(h_pre, h_post, rel_floor: float = 1e-12) -> float:
    """||HC[H_pre]||_F / ||HC[H_post]||_F.

    Returns UNDEFINED when the denominator is zero up to rounding, i.e. below
    ``rel_floor * ||H_post||_F``.
    """
    num = np.linalg.norm(spectral_split(h_pre).hc)
    den = np.linalg.norm(spectral_split(h_post).hc)
    if den <= rel_floor * np.linalg.norm(_as_matrix(h_post)):
        return UNDEFINED
    return float(num / den)


def smoothing_rate_closed_form(alpha_p: float, n: int, wv_norm: float) -> float:
    """sqrt((e^{2a} + n - 1) / (n e^{2a} ||W_V||_2)) with a = max |P_ij|."""
    if alpha_p < 0 or n < 1 or wv_norm <= 0:
        raise ValueError("need alpha_p >= 0, n >= 1, wv_norm > 0")
    e = math.exp(2.0 * alpha_p)
    return math.sqrt((e + n - 1) / (n * e * wv_norm))


def smoothing_rate_l1(p, wv_norm: float):
    """sqrt(||Softmax(P)||_1) * ||W_V||_2, with ||.||_1 the max absolute column sum.

    Returns ``(rate, c)`` where c = ||Softmax(P)||_1.
    """
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("logits must be finite")
    s = ad.softmax(p, axis=1)
    c = float(np.max(np.abs(s).sum(axis=0)))
    return math.sqrt(c) * wv_norm, c


def _l1_norm(m) -> float:
    return float(np.max(np.abs(m).sum(axis=0)))


def theorem2_probe(trials: int = 100, n: int = 8, seed: int = 0, scale: float = 1.0,
                   matrices=None, wv_norm: float = 1.0) -> dict:
    """Check ||g0 I - (1/c) Softmax(P)||_1 < c with g0 = (c-1)/2, g1 = -1/c.

    Logit matrices are ``scale * N(0,1)`` draws unless ``matrices`` is given.
    Instances with c <= 1 are skipped and counted.
    """
    rng = np.random.default_rng(seed)
    if matrices is None:
        matrices = (scale * rng.standard_normal((n, n)) for _ in range(trials))
    rows, passes, skipped = [], 0, 0
    for t, p in enumerate(matrices):
        s = ad.softmax(np.asarray(p, dtype=np.float64), axis=1)
        c = _l1_norm(s)
        if c <= 1.0 + 1e-12:
            skipped += 1
            rows.append({"trial": t, "c": c, "norm": math.nan, "margin": math.nan, "passed": "skipped"})
            continue
        g0, g1 = (c - 1.0) / 2.0, -1.0 / c
        norm = _l1_norm(g0 * np.eye(s.shape[0]) + g1 * s)
        ok = norm < c
        passes += ok
        rows.append({"trial": t, "c": c, "norm": norm, "margin": c - norm, "passed": bool(ok),
                     "lambda_before": math.sqrt(c) * wv_norm, "lambda_after": math.sqrt(norm) * wv_norm})
    margins = [r["margin"] for r in rows if r["passed"] != "skipped"]
    return {"trials": len(rows), "passes": int(passes), "skipped": skipped,
            "evaluated": len(rows) - skipped,
            "min_margin": min(margins) if margins else math.nan,
            "mean_margin": float(np.mean(margins)) if margins else math.nan, "rows": rows}


def highpass_probe(a_stochastic, a: float, k_max: int, h=None, seed: int = 0, d: int = 4) -> np.ndarray:
    """r(K) = ||DC[sum_{k<=K} (-a)^k A^k H]||_F / ||DC[H]||_F for K = 0..k_max."""
    A = np.asarray(a_stochastic, dtype=np.float64)
    n = A.shape[0]
    check_row_stochastic(A, 1e-10)
    if not 0.0 < a < 1.0 / n:
        raise ValueError(f"a must lie in (0, 1/n) = (0, {1.0 / n})")
    if h is None:
        h = np.random.default_rng(seed).standard_normal((n, d)) + 1.0
    h = _as_matrix(h)
    base = np.linalg.norm(spectral_split(h).dc)
    if base == 0.0:
        raise ValueError("H has no DC component")
    acc = h.copy()
    term = h.copy()
    out = [np.linalg.norm(spectral_split(acc).dc) / base]
    for _ in range(1, k_max + 1):
        term = -a * (A @ term)
        acc = acc + term
        out.append(np.linalg.norm(spectral_split(acc).dc) / base)
    return np.array(out)


def geometric_partial_sums(a: float, k_max: int) -> np.ndarray:
    """|sum_{k<=K} (-a)^k| for K = 0..k_max."""
    return np.abs(np.cumsum((-a) ** np.arange(k_max + 1)))


# ---------------------------------------------------------------- depth sweep

@dataclass
class DepthSweepResult:
    model: str
    depths: list = field(default_factory=list)
    test_acc: list = field(default_factory=list)
    d_l2: list = field(default_factory=list)
    s_cos: list = field(default_factory=list)

    def __post_init__(self):
        if not len(self.depths) == len(self.test_acc) == len(self.d_l2) == len(self.s_cos):
            raise ValueError("depth sweep columns differ in length")

    def rows(self):
        return [{"depth": d, "test_acc": a, "d_l2": l2, "s_cos": c}
                for d, a, l2, c in zip(self.depths, self.test_acc, self.d_l2, self.s_cos)]


def _representation(cfg, ops, params):
    from .model import encode

    feed = dict(params.frozen)
    feed.update(params.tensors)
    if hasattr(cfg, "representation"):
        return ad.value(cfg.representation(ops, feed))
    return ad.value(encode(ops, feed, cfg)[0])


def depth_sweep(dataset, model_kind: str, depths, tcfg, base=None, ops=None, log=None) -> DepthSweepResult:
    """Train one model per depth (K for ParaFormer) and measure its final representation."""
    from dataclasses import replace

    from .baselines import BASELINES
    from .model import GraphOperators, ParaFormerConfig
    from .training import train

    if ops is None:
        ops = GraphOperators.build(dataset.features, dataset.graph)
    res = DepthSweepResult(model_kind)
    for depth in depths:
        if model_kind == "paraformer":
            cfg = replace(base or ParaFormerConfig(), K=int(depth))
        elif model_kind in BASELINES:
            cfg = replace(base, depth=int(depth)) if base is not None else BASELINES[model_kind](depth=int(depth))
        else:
            raise ValueError(f"unknown model kind {model_kind!r}")
        params, rep = train(dataset, cfg, tcfg, ops=ops)
        z = _representation(cfg, ops, params)
        res.depths.append(int(depth))
        res.test_acc.append(rep.test_at_best)
        res.d_l2.append(pairwise_l2(z))
        res.s_cos.append(cosine_sim(z))
        if log is not None:
            log(res.rows()[-1])
    return res


def gamma_report(source) -> dict:
    """Final gamma, sign pattern and magnitudes; ``source`` is a TrainReport or an array."""
    if hasattr(source, "gamma"):
        if not source.gamma:
            raise ValueError("report has no gamma trace")
        g = np.asarray(source.gamma[source.best_epoch], dtype=np.float64)
    else:
        g = np.asarray(source, dtype=np.float64)
    return {"gamma": g.tolist(), "abs": np.abs(g).tolist(), "sign": np.sign(g).astype(int).tolist(),
            "has_negative": bool(np.any(g < 0)), "negative_indices": np.flatnonzero(g < 0).tolist()}


# ---------------------------------------------------------------- output

def write_probe(rows, probe: str, dataset: str, tag: str, out_dir, x: str | None = None,
                ys=(), svg: bool = True) -> Path:
    """{probe}_{dataset}_{tag}.csv and, optionally, a line chart of ``ys`` against ``x``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{probe}_{dataset}_{tag}"
    rows = list(rows)
    keys = list(rows[0]) if rows else []
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    if svg and x and ys and rows:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        plt.rcParams["svg.hashsalt"] = stem
        fig, axes = plt.subplots(1, len(ys), figsize=(4 * len(ys), 3), squeeze=False)
        xs = [r[x] for r in rows]
        for axis, y in zip(axes[0], ys):
            axis.plot(xs, [r[y] for r in rows], marker="o")
            axis.set_xlabel(x)
            axis.set_ylabel(y)
        fig.tight_layout()
        fig.savefig(out / f"{stem}.svg", format="svg", metadata={"Date": None})
        plt.close(fig)
    return out / f"{stem}.csv"
