"""Gradients, Adam, and the full-batch training loop with early stopping."""

from __future__ import annotations

import csv
import itertools
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .graph_io import Dataset
from .model import (
    GraphOperators,
    ModelParams,
    ParaFormerConfig,
    accuracy,
    cross_entropy_from_logits,
    node_logits,
)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class TrainConfig:
    lr: float = 0.01
    weight_decay: float = 5e-4
    max_epochs: int = 1000
    patience: int = 100
    seed: int = 0
    eval_metric: str = "accuracy"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.max_epochs < 0 or self.patience < 0:
            raise ValueError("max_epochs and patience must be non-negative")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")
        if self.eval_metric != "accuracy":
            raise ValueError("only eval_metric='accuracy' is supported")

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ModelParams, **hyper) -> "OptimizerState":
        return cls({k: np.zeros_like(a) for k, a in params.tensors.items()},
                   {k: np.zeros_like(a) for k, a in params.tensors.items()}, **hyper)


def adam_step(params: ModelParams, grads: dict, state: OptimizerState, lr: float,
              weight_decay: float = 0.0) -> ModelParams:
    """One Adam update with decoupled weight decay, applied in place.

    p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.tensors.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if weight_decay:
            update = update + weight_decay * p
        p -= lr * update
    return params


def _dump(params: ModelParams, grads: dict | None = None) -> dict:
    out = {}
    for name in params.names() + list(params.frozen):
        arr = params[name]
        finite = np.isfinite(arr)
        entry = {"shape": list(arr.shape), "non_finite": int(arr.size - np.count_nonzero(finite)),
                 "max_abs_finite": float(np.abs(arr[finite]).max()) if finite.any() else None}
        if grads is not None and name in grads:
            entry["grad_non_finite"] = int(grads[name].size - np.count_nonzero(np.isfinite(grads[name])))
        out[name] = entry
    return out


def init_params(cfg, d_in: int, c: int, seed: int) -> ModelParams:
    if hasattr(cfg, "init_params"):
        return cfg.init_params(d_in, c, seed)
    return ModelParams.init(cfg, d_in, c, seed)


def model_logits(cfg, ops, feed, train_mode=False, rng=None):
    """ParaFormer logits, or the baseline's own forward when ``cfg`` provides one."""
    if hasattr(cfg, "logits"):
        return cfg.logits(ops, feed, train_mode, rng)
    return node_logits(ops, feed, cfg, train_mode, rng)


def compute_gradients(params: ModelParams, ops: GraphOperators, labels, idx, cfg: ParaFormerConfig,
                      train_mode: bool = True, rng: np.random.Generator | None = None):
    """Training loss on ``idx`` and its gradient for every trainable tensor.

    Returns ``(loss, grads)``. Frozen tensors enter the forward as constants.
    """
    leaves = {name: ad.parameter(arr, name) for name, arr in params.tensors.items()}
    feed = dict(params.frozen)
    feed.update(leaves)
    logits = model_logits(cfg, ops, feed, train_mode, rng)
    loss = cross_entropy_from_logits(logits, labels, idx)
    loss_val = float(ad.value(loss))
    if not np.isfinite(loss_val):
        raise NonFiniteLossError(f"non-finite training loss {loss_val}", _dump(params))
    if isinstance(loss, ad.Tensor) and loss.requires_grad:
        loss.backward()
    grads = {}
    for name, leaf in leaves.items():
        grads[name] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
    return loss_val, grads


def evaluate_loss(params: ModelParams, ops, labels, idx, cfg) -> float:
    feed = dict(params.frozen)
    feed.update(params.tensors)
    return float(cross_entropy_from_logits(model_logits(cfg, ops, feed), labels, idx))


@dataclass
class TrainReport:
    loss: list = field(default_factory=list)
    acc_train: list = field(default_factory=list)
    acc_valid: list = field(default_factory=list)
    acc_test: list = field(default_factory=list)
    gamma: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    best_epoch: int = -1
    best_valid: float = float("nan")
    test_at_best: float = float("nan")

    @property
    def epochs(self) -> int:
        return len(self.loss)

    def validate(self) -> None:
        n = len(self.loss)
        lens = {len(x) for x in (self.acc_train, self.acc_valid, self.acc_test, self.gamma, self.epoch_seconds)}
        if lens != {n}:
            raise AssertionError("report curves have unequal lengths")
        if n and not 0 <= self.best_epoch < n:
            raise AssertionError("best epoch out of range")

    def write(self, directory, extra: dict | None = None) -> Path:
        """train_report.csv and summary.json (both timing-free), plus timing.json."""
        root = Path(directory)
        root.mkdir(parents=True, exist_ok=True)
        k1 = len(self.gamma[0]) if self.gamma else 0
        with open(root / "train_report.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "acc_train", "acc_valid", "acc_test"] + [f"gamma_{k}" for k in range(k1)])
            for e in range(self.epochs):
                row = [e, repr(self.loss[e]), repr(self.acc_train[e]), repr(self.acc_valid[e]), repr(self.acc_test[e])]
                w.writerow(row + [repr(float(g)) for g in self.gamma[e]])
        summary = {"epochs": self.epochs, "best_epoch": self.best_epoch,
                   "best_valid": self.best_valid, "test_at_best": self.test_at_best,
                   "final_gamma": [float(g) for g in self.gamma[self.best_epoch]] if self.gamma else []}
        if extra:
            summary.update(extra)
        (root / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        (root / "timing.json").write_text(json.dumps({"epoch_seconds": self.epoch_seconds}) + "\n")
        return root


def _gamma_of(params: ModelParams) -> np.ndarray:
    return params["gamma"].copy() if "gamma" in params else np.zeros(0)


def train(dataset: Dataset, cfg: ParaFormerConfig, tcfg: TrainConfig, ops: GraphOperators | None = None,
          params: ModelParams | None = None, log=None):
    """Full-batch training; returns the best-validation parameters and the report.

    Early stopping fires after ``patience`` epochs without a strict
    improvement in validation accuracy.
    """
    if ops is None:
        ops = GraphOperators.build(dataset.features, dataset.graph)
    labels = dataset.labels.labels
    split = dataset.splits
    split.check(dataset.n)
    seq = np.random.SeedSequence(tcfg.seed)
    init_seed, drop_seed = seq.spawn(2)
    if params is None:
        params = init_params(cfg, dataset.features.shape[1], dataset.labels.c,
                             int(init_seed.generate_state(1)[0]))
    drop_rng = np.random.default_rng(drop_seed)
    state = OptimizerState.zeros_like(params)
    report = TrainReport()
    best = params.copy()

    for epoch in range(tcfg.max_epochs):
        t0 = time.perf_counter()
        loss, grads = compute_gradients(params, ops, labels, split.train, cfg, True, drop_rng)
        adam_step(params, grads, state, tcfg.lr, tcfg.weight_decay)
        feed = dict(params.frozen)
        feed.update(params.tensors)
        scores = model_logits(cfg, ops, feed)
        accs = [accuracy(scores, labels, ix) for ix in (split.train, split.valid, split.test)]
        report.loss.append(loss)
        report.acc_train.append(accs[0])
        report.acc_valid.append(accs[1])
        report.acc_test.append(accs[2])
        report.gamma.append(_gamma_of(params))
        report.epoch_seconds.append(time.perf_counter() - t0)
        if report.best_epoch < 0 or accs[1] > report.best_valid:
            report.best_epoch, report.best_valid, report.test_at_best = epoch, accs[1], accs[2]
            best = params.copy()
        if log is not None:
            log(epoch, loss, accs)
        if epoch - report.best_epoch >= tcfg.patience:
            break

    report.validate()
    return best, report


def sweep(grid: dict, dataset: Dataset, base_model: ParaFormerConfig | None = None,
          base_train: TrainConfig | None = None, seeds=(0, 1, 2, 3, 4), out_csv=None, workers: int = 1):
    """Exhaustive product over ``grid`` (keys from either config), 5 seeds each.

    Rows come back sorted by mean validation accuracy, best first.
    """
    if not grid:
        raise ValueError("empty grid")
    base_model = base_model or ParaFormerConfig()
    base_train = base_train or TrainConfig()
    model_keys = set(asdict(base_model))
    train_keys = set(asdict(base_train))
    for key in grid:
        if key not in model_keys | train_keys:
            raise ValueError(f"unknown grid key {key!r}")
    keys = list(grid)
    combos = [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]
    jobs = []
    for combo in combos:
        mc = ParaFormerConfig.from_dict({**asdict(base_model), **{k: v for k, v in combo.items() if k in model_keys}})
        for seed in seeds:
            tc_raw = {**asdict(base_train), **{k: v for k, v in combo.items() if k in train_keys}, "seed": seed}
            jobs.append((mc, TrainConfig.from_dict(tc_raw)))

    ops = GraphOperators.build(dataset.features, dataset.graph)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_run_job, [(dataset, m, t) for m, t in jobs]))
    else:
        results = [_run_job((dataset, m, t), ops) for m, t in jobs]

    rows = []
    per = len(seeds)
    for i, combo in enumerate(combos):
        chunk = results[i * per:(i + 1) * per]
        va = np.array([r[0] for r in chunk])
        te = np.array([r[1] for r in chunk])
        rows.append({**{k: combo[k] for k in keys},
                     "valid_mean": float(va.mean()), "valid_std": float(va.std()),
                     "test_mean": float(te.mean()), "test_std": float(te.std()),
                     "test_per_seed": [float(x) for x in te]})
    rows.sort(key=lambda r: -r["valid_mean"])
    if out_csv is not None:
        path = Path(out_csv)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(keys + ["valid_mean", "valid_std", "test_mean", "test_std", "test_per_seed"])
            for r in rows:
                w.writerow([r[k] for k in keys] + [r["valid_mean"], r["valid_std"], r["test_mean"], r["test_std"],
                                                   " ".join(repr(x) for x in r["test_per_seed"])])
    return rows


def _run_job(job, ops=None):
    dataset, mcfg, tcfg = job
    _, rep = train(dataset, mcfg, tcfg, ops=ops)
    return rep.best_valid, rep.test_at_best
