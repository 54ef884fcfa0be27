"""Dataset loading, validation, construction and adjacency normalization.

A dataset lives in a directory holding ``manifest.json`` plus the files it
references::

    manifest.json  {"name", "n", "m", "d", "c", "directed",
                    "files": {"edges", "features", "labels", "splits"}}
    edges.txt      one "u v" pair per line (0-based node ids)
    features.csv   n rows of d comma-separated decimals
    labels.csv     n lines, one integer class id each (-1 = unlabeled)
    splits.json    {"train": [...], "valid": [...], "test": [...]}
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist


class DatasetError(Exception):
    """Base class for dataset problems; carries file (and line) context."""

    def __init__(self, message: str, path: str | os.PathLike | None = None, line: int | None = None):
        self.path = None if path is None else str(path)
        self.line = line
        where = ""
        if self.path is not None:
            where = self.path if line is None else f"{self.path}:{line}"
            where += ": "
        super().__init__(where + message)


class MissingFileError(DatasetError):
    pass


class ShapeMismatchError(DatasetError):
    pass


class NonFiniteFeatureError(DatasetError):
    pass


class LabelRangeError(DatasetError):
    pass


class EdgeRangeError(DatasetError):
    pass


class SplitError(DatasetError):
    pass


@dataclass(frozen=True)
class Graph:
    """Node/edge structure.

    ``edges`` is an (m, 2) int64 array. Undirected graphs store each pair
    once with ``u <= v``; directed graphs keep (source, target) order.
    ``m_raw`` is the number of pairs in the source file before
    canonicalization and deduplication.
    """

    n: int
    edges: np.ndarray
    directed: bool = False
    m_raw: int | None = None

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= self.n):
            raise EdgeRangeError(f"edge endpoint outside [0, {self.n})")
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        if self.m_raw is None:
            object.__setattr__(self, "m_raw", len(edges))

    @classmethod
    def from_pairs(cls, n: int, pairs, directed: bool = False) -> "Graph":
        """Canonicalize raw pairs: order undirected endpoints, drop duplicates and self-loops."""
        raw = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if raw.size and (raw.min() < 0 or raw.max() >= n):
            raise EdgeRangeError(f"edge endpoint outside [0, {n})")
        e = raw[raw[:, 0] != raw[:, 1]]
        if not directed:
            e = np.sort(e, axis=1)
        if len(e):
            e = np.unique(e, axis=0)
        return cls(n=n, edges=e, directed=directed, m_raw=len(raw))

    @property
    def m(self) -> int:
        return len(self.edges)

    def adjacency(self) -> sp.csr_matrix:
        """Binary adjacency A (symmetric for undirected graphs, no self-loops)."""
        u, v = self.edges[:, 0], self.edges[:, 1]
        if not self.directed:
            u, v = np.concatenate([u, v]), np.concatenate([v, u])
        data = np.ones(len(u), dtype=np.float64)
        return sp.csr_matrix((data, (u, v)), shape=(self.n, self.n))

    def degrees(self) -> np.ndarray:
        return np.asarray(self.adjacency().sum(axis=1)).ravel()

    def permute(self, perm) -> "Graph":
        """Relabel node ``i`` as ``perm[i]``."""
        perm = np.asarray(perm, dtype=np.int64)
        return Graph.from_pairs(self.n, perm[self.edges], directed=self.directed)


@dataclass(frozen=True)
class LabelVector:
    labels: np.ndarray  # int64, -1 marks unlabeled nodes
    c: int

    def __post_init__(self):
        y = np.asarray(self.labels, dtype=np.int64)
        if y.size and (y.min() < -1 or y.max() >= self.c):
            raise LabelRangeError(f"label outside [0, {self.c})")
        y.setflags(write=False)
        object.__setattr__(self, "labels", y)

    @property
    def labeled(self) -> np.ndarray:
        return self.labels >= 0

    def one_hot(self) -> np.ndarray:
        out = np.zeros((len(self.labels), self.c))
        idx = np.flatnonzero(self.labeled)
        out[idx, self.labels[idx]] = 1.0
        return out


@dataclass(frozen=True)
class SplitMask:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        for name in ("train", "valid", "test"):
            idx = np.asarray(getattr(self, name), dtype=np.int64)
            idx.setflags(write=False)
            object.__setattr__(self, name, idx)
        seen = np.concatenate([self.train, self.valid, self.test])
        if len(np.unique(seen)) != len(seen):
            raise SplitError("train/valid/test index sets overlap")

    def check(self, n: int, require_nonempty: bool = True) -> None:
        for name in ("train", "valid", "test"):
            idx = getattr(self, name)
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise SplitError(f"{name} split has index outside [0, {n})")
            if require_nonempty and idx.size == 0:
                raise SplitError(f"{name} split is empty")

    def to_json(self) -> dict:
        return {k: [int(i) for i in getattr(self, k)] for k in ("train", "valid", "test")}


@dataclass
class DatasetManifest:
    name: str
    n: int
    m: int
    d: int
    c: int
    directed: bool = False
    files: dict = field(default_factory=lambda: {
        "edges": "edges.txt",
        "features": "features.csv",
        "labels": "labels.csv",
        "splits": "splits.json",
    })

    @classmethod
    def read(cls, path: Path) -> "DatasetManifest":
        if not path.is_file():
            raise MissingFileError("manifest not found", path)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DatasetError(f"invalid JSON ({exc.msg})", path, exc.lineno) from exc
        missing = {"name", "n", "m", "d", "c", "files"} - set(raw)
        if missing:
            raise DatasetError(f"manifest lacks keys {sorted(missing)}", path)
        return cls(
            name=str(raw["name"]),
            n=int(raw["n"]),
            m=int(raw["m"]),
            d=int(raw["d"]),
            c=int(raw["c"]),
            directed=bool(raw.get("directed", False)),
            files=dict(raw["files"]),
        )

    def to_json(self) -> str:
        body = {
            "name": self.name,
            "n": self.n,
            "m": self.m,
            "d": self.d,
            "c": self.c,
            "directed": self.directed,
            "files": self.files,
        }
        return json.dumps(body, indent=2) + "\n"


@dataclass(frozen=True)
class Dataset:
    name: str
    graph: Graph
    features: np.ndarray
    labels: LabelVector
    splits: SplitMask

    @property
    def n(self) -> int:
        return self.graph.n


def _read_edges(path: Path, n: int) -> np.ndarray:
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 2:
                raise DatasetError(f"expected 'u v', got {line.strip()!r}", path, lineno)
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise DatasetError(f"non-integer node id in {line.strip()!r}", path, lineno) from exc
            if not (0 <= u < n and 0 <= v < n):
                raise EdgeRangeError(f"edge ({u}, {v}) outside [0, {n})", path, lineno)
            pairs.append((u, v))
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def _read_features(path: Path, n: int, d: int) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != d:
                raise ShapeMismatchError(f"expected {d} columns, found {len(cells)}", path, lineno)
            try:
                row = [float(x) for x in cells]
            except ValueError as exc:
                raise DatasetError(f"unparsable value ({exc})", path, lineno) from exc
            if not all(math.isfinite(x) for x in row):
                raise NonFiniteFeatureError("non-finite feature value", path, lineno)
            rows.append(row)
    if len(rows) != n:
        raise ShapeMismatchError(f"expected {n} feature rows, found {len(rows)}", path)
    return np.array(rows, dtype=np.float64).reshape(n, d)


def _read_labels(path: Path, n: int, c: int) -> np.ndarray:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                y = int(line)
            except ValueError as exc:
                raise DatasetError(f"non-integer label {line!r}", path, lineno) from exc
            if not (y == -1 or 0 <= y < c):
                raise LabelRangeError(f"label {y} outside [0, {c})", path, lineno)
            out.append(y)
    if len(out) != n:
        raise ShapeMismatchError(f"expected {n} labels, found {len(out)}", path)
    return np.array(out, dtype=np.int64)


def _read_splits(path: Path, n: int) -> SplitMask:
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"invalid JSON ({exc.msg})", path, exc.lineno) from exc
    try:
        splits = SplitMask(train=raw["train"], valid=raw["valid"], test=raw["test"])
        splits.check(n, require_nonempty=False)
    except KeyError as exc:
        raise SplitError(f"missing split {exc.args[0]!r}", path) from exc
    except SplitError as exc:
        raise SplitError(str(exc), path) from exc
    return splits


def load_dataset(directory: str | os.PathLike) -> Dataset:
    """Read and cross-validate a dataset directory."""
    root = Path(directory)
    man = DatasetManifest.read(root / "manifest.json")
    paths = {}
    for key in ("edges", "features", "labels", "splits"):
        if key not in man.files:
            raise DatasetError(f"manifest lacks files.{key}", root / "manifest.json")
        p = root / man.files[key]
        if not p.is_file():
            raise MissingFileError(f"{key} file not found", p)
        paths[key] = p

    pairs = _read_edges(paths["edges"], man.n)
    graph = Graph.from_pairs(man.n, pairs, directed=man.directed)
    if man.m not in (graph.m_raw, graph.m):
        raise ShapeMismatchError(
            f"manifest declares m={man.m} but edge file has {graph.m_raw} pairs "
            f"({graph.m} after deduplication)",
            paths["edges"],
        )
    x = _read_features(paths["features"], man.n, man.d)
    labels = LabelVector(_read_labels(paths["labels"], man.n, man.c), man.c)
    splits = _read_splits(paths["splits"], man.n)
    x.setflags(write=False)
    return Dataset(name=man.name, graph=graph, features=x, labels=labels, splits=splits)


def save_dataset(ds: Dataset, directory: str | os.PathLike) -> Path:
    """Write ``ds`` in the on-disk format; floats use shortest round-trip repr."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    man = DatasetManifest(
        name=ds.name,
        n=ds.graph.n,
        m=ds.graph.m,
        d=ds.features.shape[1],
        c=ds.labels.c,
        directed=ds.graph.directed,
    )
    (root / "manifest.json").write_text(man.to_json())
    with open(root / man.files["edges"], "w") as fh:
        fh.writelines(f"{u} {v}\n" for u, v in ds.graph.edges.tolist())
    with open(root / man.files["features"], "w") as fh:
        fh.writelines(",".join(repr(v) for v in row) + "\n" for row in ds.features.tolist())
    with open(root / man.files["labels"], "w") as fh:
        fh.writelines(f"{y}\n" for y in ds.labels.labels.tolist())
    (root / man.files["splits"]).write_text(json.dumps(ds.splits.to_json()) + "\n")
    return root


def normalize_adjacency(g: Graph, mode: str = "sym_selfloop", dense: bool = False):
    """Normalized adjacency.

    sym_selfloop: D^-1/2 (A + I) D^-1/2 with D the degree of A + I.
    rw: D^-1 A, zero-degree rows stay all-zero.
    none: A itself.
    """
    a = g.adjacency()
    if mode == "sym_selfloop":
        a = a + sp.identity(g.n, format="csr")
        deg = np.asarray(a.sum(axis=1)).ravel()
        dinv = sp.diags(1.0 / np.sqrt(deg))
        out = dinv @ a @ dinv
    elif mode == "rw":
        deg = np.asarray(a.sum(axis=1)).ravel()
        inv = np.zeros_like(deg)
        np.divide(1.0, deg, out=inv, where=deg > 0)
        out = sp.diags(inv) @ a
    elif mode == "none":
        out = a
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    out = sp.csr_matrix(out)
    return out.toarray() if dense else out


def knn_graph(x, k: int, metric: str = "euclidean") -> Graph:
    """Symmetrized (union) k-nearest-neighbor graph; ties go to the lower index."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if not 0 < k < n:
        raise ValueError(f"need 0 < k < n, got k={k}, n={n}")
    if metric == "euclidean":
        dist = cdist(x, x)
    elif metric == "cosine":
        norms = np.linalg.norm(x, axis=1)
        norms[norms == 0] = 1.0
        u = x / norms[:, None]
        dist = 1.0 - u @ u.T
    else:
        raise ValueError(f"unknown metric {metric!r}")
    np.fill_diagonal(dist, np.inf)
    # stable sort keeps the lower index first among equal distances
    nbrs = np.argsort(dist, axis=1, kind="stable")[:, :k]
    src = np.repeat(np.arange(n), k)
    return Graph.from_pairs(n, np.stack([src, nbrs.ravel()], axis=1), directed=False)


def random_split(n: int, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> SplitMask:
    """Random disjoint split; sizes floor(f * n) with the remainder going to test."""
    f_tr, f_va, f_te = fractions
    if min(fractions) <= 0 or sum(fractions) > 1 + 1e-12:
        raise ValueError(f"fractions must be positive and sum to <= 1, got {fractions}")
    n_tr, n_va = int(math.floor(f_tr * n)), int(math.floor(f_va * n))
    n_te = n - n_tr - n_va if abs(sum(fractions) - 1) < 1e-12 else int(math.floor(f_te * n))
    if min(n_tr, n_va, n_te) < 1:
        raise ValueError(f"n={n} too small to give every split at least one node")
    perm = np.random.default_rng(seed).permutation(n)
    return SplitMask(
        train=np.sort(perm[:n_tr]),
        valid=np.sort(perm[n_tr:n_tr + n_va]),
        test=np.sort(perm[n_tr + n_va:n_tr + n_va + n_te]),
    )


def convert_linqs(content_path, cites_path, out_dir, name: str = "cora", split_seed: int = 0) -> Dataset:
    """Convert a LINQS ``.content``/``.cites`` pair (e.g. Cora) to the on-disk format.

    Nodes keep the row order of the content file; classes are numbered in
    sorted order of their names. Every citation line is written as one edge,
    so the edge file preserves the raw count.
    """
    ids, feats, names = [], [], []
    with open(content_path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            ids.append(parts[0])
            feats.append([float(v) for v in parts[1:-1]])
            names.append(parts[-1])
    index = {pid: i for i, pid in enumerate(ids)}
    classes = sorted(set(names))
    y = np.array([classes.index(c) for c in names], dtype=np.int64)
    x = np.array(feats, dtype=np.float64)
    pairs = []
    with open(cites_path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            cited, citing = parts
            if cited not in index or citing not in index:
                raise DatasetError(f"unknown paper id in {line.strip()!r}", cites_path, lineno)
            pairs.append((index[citing], index[cited]))
    n = len(ids)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = random_split(n, (0.6, 0.2, 0.2), seed=split_seed)
    man = DatasetManifest(name=name, n=n, m=len(pairs), d=x.shape[1], c=len(classes))
    (out / "manifest.json").write_text(man.to_json())
    with open(out / "edges.txt", "w") as fh:
        fh.writelines(f"{u} {v}\n" for u, v in pairs)
    with open(out / "features.csv", "w") as fh:
        fh.writelines(",".join(repr(v) for v in row) + "\n" for row in x.tolist())
    with open(out / "labels.csv", "w") as fh:
        fh.writelines(f"{v}\n" for v in y.tolist())
    (out / "splits.json").write_text(json.dumps(splits.to_json()) + "\n")
    (out / "classes.txt").write_text("".join(c + "\n" for c in classes))
    return load_dataset(out)


def edge_homophily(g: Graph, labels: LabelVector) -> float:
    """Fraction of edges joining same-label endpoints (labeled pairs only)."""
    y = labels.labels
    u, v = g.edges[:, 0], g.edges[:, 1]
    ok = (y[u] >= 0) & (y[v] >= 0)
    if not ok.any():
        return float("nan")
    return float(np.mean(y[u[ok]] == y[v[ok]]))


def contextual_sbm(n: int = 600, c: int = 2, d: int = 16, avg_degree: float = 8.0, homophily: float = 0.1,
                   signal: float = 1.0, seed: int = 0, name: str = "csbm") -> Dataset:
    """Contextual stochastic block model: Gaussian class-mean features plus
    a planted graph whose edge homophily is approximately ``homophily``.

    Low ``homophily`` gives the heterophilic regime where neighbours mostly
    disagree in label.
    """
    if not 0.0 <= homophily <= 1.0 or c < 2 or n < 3 * c:
        raise ValueError("need 0 <= homophily <= 1, c >= 2 and n >= 3c")
    rng = np.random.default_rng(seed)
    y = np.arange(n) % c
    rng.shuffle(y)
    means = rng.standard_normal((c, d)) * signal / math.sqrt(d)
    x = means[y] + rng.standard_normal((n, d)) / math.sqrt(d)
    m = int(round(n * avg_degree / 2))
    by_class = [np.flatnonzero(y == k) for k in range(c)]
    src = rng.integers(0, n, m)
    same = rng.random(m) < homophily
    dst = np.empty(m, dtype=np.int64)
    for i in range(m):
        pool = by_class[y[src[i]]] if same[i] else np.flatnonzero(y != y[src[i]])
        dst[i] = pool[rng.integers(0, len(pool))]
    graph = Graph.from_pairs(n, np.stack([src, dst], axis=1))
    return Dataset(name, graph, x, LabelVector(y, c), random_split(n, (0.6, 0.2, 0.2), seed))
