"""Graph data model, file ingestion, homophily and label splits."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

EDGE_FILE = "edges.tsv"
FEATURE_FILE = "features.csv"
LABEL_FILE = "labels.csv"
MISSING = -1


class GraphFormatError(ValueError):
    pass


class ConsistencyError(ValueError):
    pass


class UndefinedRatioError(ValueError):
    pass


class SplitError(ValueError):
    pass


def canonical_edges(edges) -> tuple[np.ndarray, int, int]:
    """Sort each pair as (min, max), drop self-loops and duplicates.

    Returns ``(edges, n_self_loops, n_duplicates)`` with edges sorted
    lexicographically.
    """
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    loops = e[:, 0] == e[:, 1]
    e = np.sort(e[~loops], axis=1)
    uniq = np.unique(e, axis=0) if len(e) else e.reshape(0, 2)
    return uniq, int(loops.sum()), int(len(e) - len(uniq))


@dataclass(frozen=True, eq=False)
class GraphDataset:
    """Undirected graph with node features and partial labels.

    ``y`` holds ``-1`` for unlabeled nodes; ``edges`` is an ``(m, 2)`` array
    of unordered pairs stored as ``u < v``, sorted.
    """

    X: np.ndarray
    y: np.ndarray
    edges: np.ndarray
    C: int
    report: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "edges", edges)
        if X.ndim != 2 or X.shape[1] < 1:
            raise ConsistencyError(f"features must be n x d with d >= 1, got {X.shape}")
        n = X.shape[0]
        if y.shape != (n,):
            raise ConsistencyError(f"label vector has shape {y.shape}, expected ({n},)")
        if self.C < 2:
            raise ConsistencyError("need at least two classes")
        lab = y[y != MISSING]
        if len(lab) and (lab.min() < 0 or lab.max() >= self.C):
            raise ConsistencyError("labels out of range")
        if len(edges):
            if edges.min() < 0 or edges.max() >= n:
                raise ConsistencyError("edge endpoint out of range")
            if np.any(edges[:, 0] >= edges[:, 1]):
                raise ConsistencyError("edges must be stored as u < v (no self-loops)")
            if len(np.unique(edges, axis=0)) != len(edges):
                raise ConsistencyError("duplicate edges")
        if not np.isfinite(X).all():
            raise ConsistencyError("features contain NaN or Inf")

    @classmethod
    def from_raw(cls, X, y, edges, C: int | None = None) -> "GraphDataset":
        """Build a dataset from an arbitrary edge list, cleaning it first."""
        e, loops, dups = canonical_edges(edges)
        y = np.asarray(y, dtype=np.int64)
        if C is None:
            C = int(y.max()) + 1
        return cls(X, y, e, C, report={"self_loops": loops, "duplicates": dups})

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def m(self) -> int:
        return len(self.edges)

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.y != MISSING

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n)

    def edge_index(self) -> dict[tuple[int, int], int]:
        return {(int(u), int(v)): k for k, (u, v) in enumerate(self.edges)}

    def replace(self, **changes) -> "GraphDataset":
        kw = dict(X=self.X, y=self.y, edges=self.edges, C=self.C)
        kw.update(changes)
        return GraphDataset(**kw)

    def same_as(self, other: "GraphDataset") -> bool:
        return (
            self.C == other.C
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.edges, other.edges)
        )


@dataclass(frozen=True, eq=False)
class SignedAdjacency:
    """One state in {-1, 0, +1} per observed edge, aligned with ``edges``.

    Pairs outside the observed edge set are implicitly 0.
    """

    edges: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.int8)
        object.__setattr__(self, "states", states)
        if states.shape != (len(self.edges),):
            raise ConsistencyError("one state per observed edge required")
        if not np.isin(states, (-1, 0, 1)).all():
            raise ConsistencyError("states must lie in {-1, 0, +1}")

    def state(self, i: int, j: int) -> int:
        u, v = (i, j) if i < j else (j, i)
        idx = self._lookup().get((u, v))
        return 0 if idx is None else int(self.states[idx])

    def _lookup(self) -> dict:
        cache = self.__dict__.get("_cache")
        if cache is None:
            cache = {(int(u), int(v)): k for k, (u, v) in enumerate(self.edges)}
            object.__setattr__(self, "_cache", cache)
        return cache

    @classmethod
    def zeros(cls, g: GraphDataset) -> "SignedAdjacency":
        return cls(g.edges, np.zeros(g.m, dtype=np.int8))


@dataclass(frozen=True)
class LabelSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int


# -- ingestion ---------------------------------------------------------------


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def read_edge_file(path) -> list[tuple[int, int]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split("\t") if "\t" in s else s.split()
            if len(parts) != 2:
                raise GraphFormatError(f"{path}:{lineno}: expected 'u<TAB>v', got {s!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: non-integer node id in {s!r}") from None
            if u < 0 or v < 0:
                raise GraphFormatError(f"{path}:{lineno}: negative node id")
            out.append((u, v))
    return out


def read_feature_file(path) -> np.ndarray:
    """Read the feature CSV; empty or non-numeric cells become NaN (missing)."""
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        for lineno, rec in enumerate(reader, 1):
            if not rec:
                continue
            if lineno == 1 and not all(_is_number(c) for c in rec if c.strip()):
                continue  # header
            vals = []
            for c in rec:
                c = c.strip()
                if c == "":
                    vals.append(math.nan)
                    continue
                try:
                    vals.append(float(c))
                except ValueError:
                    raise GraphFormatError(f"{path}:{lineno}: bad feature value {c!r}") from None
            rows.append(vals)
    if not rows:
        raise GraphFormatError(f"{path}: no feature rows")
    width = len(rows[0])
    for k, r in enumerate(rows):
        if len(r) != width:
            raise GraphFormatError(f"{path}: row {k} has {len(r)} values, expected {width}")
    return np.array(rows, dtype=np.float64)


def read_label_file(path, n: int) -> np.ndarray:
    y = np.full(n, MISSING, dtype=np.int64)
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), 1):
            if not rec:
                continue
            if lineno == 1 and not _is_number(rec[0]):
                continue
            if len(rec) != 2:
                raise GraphFormatError(f"{path}:{lineno}: expected 'node_id,class_id'")
            try:
                i, c = int(rec[0]), int(rec[1])
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: non-integer entry") from None
            if not 0 <= i < n:
                raise ConsistencyError(f"{path}:{lineno}: node {i} outside 0..{n - 1}")
            y[i] = c
    return y


def load_dataset(path, n_classes: int | None = None) -> GraphDataset:
    """Load ``edges.tsv``, ``features.csv`` and optional ``labels.csv`` from a directory.

    Self-loops and duplicate edges are removed and counted in ``report``;
    edges touching nodes with missing features are dropped.
    """
    path = Path(path)
    X = read_feature_file(path / FEATURE_FILE)
    n = X.shape[0]
    raw = read_edge_file(path / EDGE_FILE)
    if raw and max(max(u, v) for u, v in raw) >= n:
        bad = max(max(u, v) for u, v in raw)
        raise ConsistencyError(f"edge references node {bad} but only {n} feature rows")
    label_path = path / LABEL_FILE
    y = read_label_file(label_path, n) if label_path.exists() else np.full(n, MISSING, dtype=np.int64)

    missing = ~np.isfinite(X).all(axis=1)
    edges, loops, dups = canonical_edges(raw)
    n_rejected = 0
    if missing.any():
        keep = ~(missing[edges[:, 0]] | missing[edges[:, 1]])
        n_rejected = int((~keep).sum())
        edges = edges[keep]
        X = np.where(np.isfinite(X), X, 0.0)
    C = n_classes if n_classes is not None else max(2, int(y.max()) + 1)
    report = {
        "self_loops": loops,
        "duplicates": dups,
        "rejected_missing_features": n_rejected,
        "nodes_missing_features": int(missing.sum()),
    }
    if loops or dups or n_rejected:
        log.info("cleaned %s: %s", path, report)
    return GraphDataset(X, y, edges, C, report=report)


def save_dataset(g: GraphDataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / EDGE_FILE, "w", encoding="utf-8") as fh:
        for u, v in g.edges:
            fh.write(f"{u}\t{v}\n")
    with open(path / FEATURE_FILE, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        for row in g.X:
            w.writerow([repr(float(x)) for x in row])
    with open(path / LABEL_FILE, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        for i in np.flatnonzero(g.labeled_mask):
            w.writerow([int(i), int(g.y[i])])
    return path


def convert_geom_gcn(node_file, edge_file, out_dir) -> GraphDataset:
    """Convert the common WebKB/Wikipedia benchmark text format.

    ``node_file`` has a header then ``id<TAB>f1,f2,...<TAB>label`` rows;
    ``edge_file`` has a header then ``u<TAB>v`` rows (directed).
    """
    feats, labels = {}, {}
    with open(node_file, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            i, f, c = line.rstrip("\n").split("\t")
            feats[int(i)] = [float(x) for x in f.split(",")]
            labels[int(i)] = int(c)
    n = len(feats)
    X = np.array([feats[i] for i in range(n)], dtype=np.float64)
    y = np.array([labels[i] for i in range(n)], dtype=np.int64)
    raw = []
    with open(edge_file, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            u, v = line.split()
            raw.append((int(u), int(v)))
    g = GraphDataset.from_raw(X, y, raw, C=int(y.max()) + 1)
    save_dataset(g, out_dir)
    return g


# -- measurements --------------------------------------------------------------


def homophily_ratio(g: GraphDataset) -> float:
    """Fraction of edges whose endpoints share a label.

    Edges with an unlabeled endpoint are skipped with a warning.
    """
    if g.m == 0:
        raise UndefinedRatioError("graph has no edges")
    yu, yv = g.y[g.edges[:, 0]], g.y[g.edges[:, 1]]
    ok = (yu != MISSING) & (yv != MISSING)
    if not ok.all():
        warnings.warn(f"{int((~ok).sum())} edges have an unlabeled endpoint and are ignored")
    if not ok.any():
        raise UndefinedRatioError("no edge has two labeled endpoints")
    return float(np.mean(yu[ok] == yv[ok]))


def neighbor_sets(g: GraphDataset, z: SignedAdjacency, i: int) -> tuple[set[int], set[int]]:
    """Return ``(N+_i, N-_i)`` under the signed states ``z``."""
    pos, neg = set(), set()
    touch = np.flatnonzero((g.edges[:, 0] == i) | (g.edges[:, 1] == i))
    for k in touch:
        u, v = g.edges[k]
        j = int(v if u == i else u)
        s = z.states[k]
        if s == 1:
            pos.add(j)
        elif s == -1:
            neg.add(j)
    return pos, neg


def make_split(g: GraphDataset, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> LabelSplit:
    """Per-class stratified split of the labeled nodes.

    Unlabeled nodes are appended to ``test`` so that the three parts cover
    every node; evaluation only scores labeled ones.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or (fr < 0).any() or abs(fr.sum() - 1.0) > 1e-9:
        raise SplitError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for c in range(g.C):
        idx = np.flatnonzero(g.y == c)
        if len(idx) == 0:
            continue
        idx = rng.permutation(idx)
        n_c = len(idx)
        n_tr = int(round(fr[0] * n_c))
        n_va = int(round(fr[1] * n_c))
        n_tr = min(n_tr, n_c)
        n_va = min(n_va, n_c - n_tr)
        counts = (n_tr, n_va, n_c - n_tr - n_va)
        for k in range(3):
            if fr[k] > 0 and counts[k] < 1:
                raise SplitError(f"class {c} has {n_c} nodes, too few for fractions {tuple(fr)}")
        parts[0].append(idx[:n_tr])
        parts[1].append(idx[n_tr:n_tr + n_va])
        parts[2].append(idx[n_tr + n_va:])
    parts[2].append(np.flatnonzero(~g.labeled_mask))
    out = [np.sort(np.concatenate(p)).astype(np.int64) if p else np.zeros(0, np.int64) for p in parts]
    return LabelSplit(out[0], out[1], out[2], seed)


def permute_nodes(g: GraphDataset, perm) -> GraphDataset:
    """Relabel node ``i`` as ``perm[i]``."""
    perm = np.asarray(perm, dtype=np.int64)
    inv = np.argsort(perm)
    X = g.X[inv]
    y = g.y[inv]
    return GraphDataset.from_raw(X, y, perm[g.edges], C=g.C)
