"""Command-line entry point: ``paraformer <subcommand> ...``.

Exit codes: 0 success, 1 suite/assertion failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

log = logging.getLogger("paraformer")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _data_path(arg: str | None) -> Path:
    if arg:
        p = Path(arg)
        if not p.exists() and os.environ.get("PARAFORMER_DATA_DIR"):
            alt = Path(os.environ["PARAFORMER_DATA_DIR"]) / arg
            if alt.exists():
                return alt
        return p
    root = os.environ.get("PARAFORMER_DATA_DIR")
    if not root:
        raise UsageError("no --data given and PARAFORMER_DATA_DIR is unset")
    return Path(root) / "cora"


def _load_config(path: str | None):
    """Read a JSON config with optional "model" and "train" sections."""
    from .model import ParaFormerConfig
    from .training import TrainConfig

    raw = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"cannot parse config {p}: {exc}") from exc
    extra = set(raw) - {"model", "train"}
    if extra:
        raise UsageError(f"unknown config sections {sorted(extra)} in {path}")
    try:
        return ParaFormerConfig.from_dict(raw.get("model", {})), TrainConfig.from_dict(raw.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config {path}: {exc}") from exc


def _load_data(args):
    from .graph_io import DatasetError, load_dataset

    try:
        return load_dataset(_data_path(args.data))
    except DatasetError as exc:
        raise UsageError(str(exc)) from exc


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_int_list(text: str) -> list[int]:
    """'1,2,5' or '1..10' (inclusive)."""
    text = text.strip()
    if not text:
        return []
    vals = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..")
            vals.extend(range(int(lo), int(hi) + 1))
        else:
            vals.append(int(part))
    return vals


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    from .training import train

    mcfg, tcfg = _load_config(args.config)
    if args.seed is not None:
        tcfg.seed = args.seed
    ds = _load_data(args)
    out = _out(args, "runs/train")
    params, rep = train(ds, mcfg, tcfg)
    rep.write(out, extra={"test_accuracy": rep.test_at_best, "dataset": ds.name, "seed": tcfg.seed,
                          "model": asdict(mcfg), "train": asdict(tcfg)})
    params.save(out / "checkpoint", mcfg, extra={"train": asdict(tcfg)})
    print(f"test accuracy {rep.test_at_best:.4f} (best epoch {rep.best_epoch}, valid {rep.best_valid:.4f})")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .model import GraphOperators, ModelParams, accuracy, node_logits

    if not args.run:
        raise UsageError("eval needs --run pointing at a train output directory")
    ckpt = Path(args.run) / "checkpoint"
    if not (ckpt / "params.json").is_file():
        raise UsageError(f"no checkpoint at {ckpt}")
    params, cfg = ModelParams.load(ckpt)
    ds = _load_data(args)
    ops = GraphOperators.build(ds.features, ds.graph)
    feed = dict(params.frozen)
    feed.update(params.tensors)
    scores = node_logits(ops, feed, cfg)
    res = {k: accuracy(scores, ds.labels.labels, getattr(ds.splits, k)) for k in ("train", "valid", "test")}
    print(json.dumps(res, indent=2))
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .training import sweep

    mcfg, tcfg = _load_config(args.config)
    if not args.grid:
        raise UsageError("sweep needs --grid (JSON object of key -> list of values)")
    gp = Path(args.grid)
    try:
        grid = json.loads(gp.read_text()) if gp.is_file() else json.loads(args.grid)
    except json.JSONDecodeError as exc:
        raise UsageError(f"cannot parse grid: {exc}") from exc
    if not grid or not all(isinstance(v, list) and v for v in grid.values()):
        raise UsageError("grid must map keys to nonempty lists")
    ds = _load_data(args)
    out = _out(args, "runs/sweep")
    seeds = _parse_int_list(args.seeds)
    try:
        rows = sweep(grid, ds, mcfg, tcfg, seeds=seeds, out_csv=out / "sweep.csv", workers=args.workers)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    for r in rows:
        keys = {k: r[k] for k in grid}
        print(f"{keys}  valid {r['valid_mean']:.4f}  test {r['test_mean']:.4f} +- {r['test_std']:.4f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify

    suites = list(verify.SUITES) if args.suite == "all" else [args.suite]
    out = _out(args, "runs/verify")
    ok = True
    print(f"{'suite':<14}{'checked':>8}{'failed':>8}{'worst':>12}{'tol':>10}  result")
    for name in suites:
        kwargs = {"seed": args.seed or 0}
        if args.trials is not None:
            kwargs["trials"] = args.trials
        if name == "factorization" and args.inject_fault:
            from .attention import gpa_scalable

            kwargs["scalable_fn"] = lambda f, v, g: gpa_scalable(f, v, g) * (1.0 + 1e-6)
        res = verify.SUITES[name](**kwargs)
        status = "PASS" if res.passed else "FAIL"
        print(f"{name:<14}{res.checked:>8}{res.failed:>8}{res.worst:>12.3e}{res.tolerance:>10.1e}  {status}")
        if not res.passed:
            ok = False
            path = out / f"verify_{name}_failures.json"
            path.write_text(json.dumps({"suite": name, "failures": res.failures, "details": res.details},
                                       indent=2, default=float) + "\n")
            print(f"  failing instances written to {path}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_diagnose(args) -> int:
    from . import diagnostics as dg

    out = _out(args, "runs/diagnose")
    probe = args.probe
    if probe == "oversmoothing":
        from .training import TrainConfig

        mcfg, tcfg = _load_config(args.config)
        if args.max_epochs is not None:
            tcfg = TrainConfig(**{**asdict(tcfg), "max_epochs": args.max_epochs,
                                  "patience": min(tcfg.patience, args.max_epochs)})
        ds = _load_data(args)
        depths = _parse_int_list(args.depths)
        if not depths:
            raise UsageError("--depths is empty")
        curves = {}
        for kind in [m.strip() for m in args.models.split(",") if m.strip()]:
            res = dg.depth_sweep(ds, kind, depths, tcfg, base=mcfg if kind == "paraformer" else None,
                                 log=lambda row, k=kind: print(k, row))
            dg.write_probe(res.rows(), "oversmoothing", ds.name, kind, out, x="depth", ys=("d_l2", "s_cos", "test_acc"))
            curves[kind] = res
        _overlay(curves, out / f"oversmoothing_{ds.name}_all.svg")
        return EXIT_OK
    if probe == "filter":
        rng = np.random.default_rng(args.seed or 0)
        n = args.n
        a = args.a if args.a is not None else 0.5 / n
        if args.uniform:
            A = np.full((n, n), 1.0 / n)
        else:
            A = rng.random((n, n))
            A /= A.sum(axis=1, keepdims=True)
        try:
            curve = dg.highpass_probe(A, a, args.kmax, seed=args.seed or 0)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        rows = [{"K": k, "r": float(r)} for k, r in enumerate(curve)]
        dg.write_probe(rows, "filter", "synthetic", f"n{n}", out, x="K", ys=("r",))
        trend = curve[-1] < curve[min(2, args.kmax)] if args.kmax >= 2 else curve[-1] <= curve[0]
        print(f"r(0)={curve[0]:.6f} r({args.kmax})={curve[-1]:.6e}  decreasing trend: {bool(trend)}")
        return EXIT_OK if trend else EXIT_FAIL
    if probe == "gamma":
        if not args.run:
            raise UsageError("diagnose gamma needs --run")
        meta = Path(args.run) / "checkpoint" / "params.json"
        if not meta.is_file():
            raise UsageError(f"no checkpoint at {meta.parent}")
        gamma = json.loads(meta.read_text()).get("gamma")
        if gamma is None:
            raise UsageError("checkpoint has no gamma")
        rep = dg.gamma_report(gamma)
        rows = [{"k": k, "gamma": g, "abs": a, "sign": s}
                for k, (g, a, s) in enumerate(zip(rep["gamma"], rep["abs"], rep["sign"]))]
        dg.write_probe(rows, "gamma", Path(args.run).name, "final", out, x="k", ys=("gamma",))
        print(f"gamma: {np.round(rep['gamma'], 4).tolist()}  negative at {rep['negative_indices']}")
        return EXIT_OK
    if probe == "theorem2":
        trials = args.trials if args.trials is not None else 100
        res = dg.theorem2_probe(trials, n=args.n, seed=args.seed or 0)
        dg.write_probe(res["rows"], "theorem2", "synthetic", f"n{args.n}", out, x="trial", ys=("margin",))
        print(f"{res['passes']}/{res['evaluated']} satisfy the bound (skipped {res['skipped']}), "
              f"min margin {res['min_margin']:.4f}")
        return EXIT_OK if res["passes"] == res["evaluated"] else EXIT_FAIL
    raise UsageError(f"unknown probe {probe!r}")


def _overlay(curves: dict, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = path.stem
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for kind, res in curves.items():
        ax.plot(res.depths, res.d_l2, marker="o", label=kind)
    ax.set_xlabel("depth / K")
    ax.set_ylabel("mean pairwise L2 distance")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_bench(args) -> int:
    from .oracle import scaling_benchmark

    sizes = _parse_int_list(args.sizes or "")
    if not sizes:
        raise UsageError("--sizes must list at least one n")
    op = {"scalable": "gpa_scalable", "dense": "gpa_exact_dense"}.get(args.op, args.op)
    out = _out(args, "runs/bench")
    res = scaling_benchmark(op, sizes, d=args.d, K=args.K, repeats=args.repeats, seed=args.seed or 0,
                            out_csv=out / f"bench_{op}.csv")
    for n, t in zip(res["sizes"], res["median_seconds"]):
        print(f"n={n:<7d} median {t * 1e3:9.3f} ms")
    print(f"log-log slope {res['slope']:.3f}")
    (out / f"bench_{op}_summary.json").write_text(
        json.dumps({k: res[k] for k in ("op", "sizes", "median_seconds", "slope")}, indent=2) + "\n")
    return EXIT_OK


def cmd_prepare(args) -> int:
    from .graph_io import convert_linqs, edge_homophily, load_dataset

    if args.linqs:
        content, cites = args.linqs
        out = Path(args.out or "data/cora")
        ds = convert_linqs(content, cites, out, name=args.name, split_seed=args.seed or 0)
        print(f"wrote {out}")
    else:
        ds = load_dataset(_data_path(args.data))
    print(f"{ds.name}: n={ds.n} m={ds.graph.m} (raw {ds.graph.m_raw}) d={ds.features.shape[1]} c={ds.labels.c} "
          f"splits={len(ds.splits.train)}/{len(ds.splits.valid)}/{len(ds.splits.test)} "
          f"homophily={edge_homophily(ds.graph, ds.labels):.3f}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _common(suppress: bool) -> argparse.ArgumentParser:
    """Global flags; accepted before or after the subcommand."""
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=d(None))
    common.add_argument("--out", default=d(None), help="output directory (created if absent)")
    common.add_argument("--strict-deterministic", action="store_true", default=d(False),
                        help="pin BLAS to one thread so reruns are bitwise identical")
    common.add_argument("--workers", type=int, default=d(1))
    common.add_argument("--data", default=d(None), help="dataset directory (default: $PARAFORMER_DATA_DIR/cora)")
    common.add_argument("--config", default=d(None), help="JSON config with 'model' and 'train' sections")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="paraformer", parents=[_common(False)])
    common = _common(True)
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="train one model").set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--run", required=False)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="grid search, 5 seeds per cell")
    p.add_argument("--grid", help="JSON file or inline JSON object")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("verify", parents=[common], help="oracle equivalence suites")
    p.add_argument("--suite", default="all", choices=["all", "factorization", "rowsum", "gradients", "dc", "theorem2"])
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("diagnose", parents=[common], help="over-smoothing and spectral probes")
    p.add_argument("probe", choices=["oversmoothing", "filter", "gamma", "theorem2"])
    p.add_argument("--models", default="vanilla,paraformer")
    p.add_argument("--depths", default="1..10")
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--a", type=float, default=None)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--kmax", type=int, default=16)
    p.add_argument("--uniform", action="store_true")
    p.add_argument("--run", default=None)
    p.add_argument("--trials", type=int, default=None)
    p.set_defaults(fn=cmd_diagnose)

    p = sub.add_parser("bench", parents=[common], help="GPA timing and log-log slope")
    p.add_argument("--op", default="scalable", choices=["scalable", "dense", "gpa_scalable", "gpa_exact_dense"])
    p.add_argument("--sizes", default="")
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--K", type=int, default=10)
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("prepare", parents=[common], help="validate or convert a dataset")
    p.add_argument("--linqs", nargs=2, metavar=("CONTENT", "CITES"))
    p.add_argument("--name", default="cora")
    p.set_defaults(fn=cmd_prepare)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    limits = None
    if args.strict_deterministic:
        from threadpoolctl import threadpool_limits

        limits = threadpool_limits(1)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        dump = getattr(exc, "dump", None)
        if dump:
            print(json.dumps(dump, indent=2), file=sys.stderr)
        return EXIT_FAIL
    finally:
        if limits is not None:
            limits.unregister()


if __name__ == "__main__":
    sys.exit(main())
