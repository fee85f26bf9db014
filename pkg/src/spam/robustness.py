"""Perturbation harness: random edge deletion, feature noise, greedy edge attack."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .graphcore import MISSING, GraphDataset

log = logging.getLogger(__name__)

KINDS = ("delete-edges", "feature-noise", "adversarial-flip")


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    magnitude: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not math.isfinite(self.magnitude) or self.magnitude < 0:
            raise ValueError("magnitude must be a finite non-negative number")
        if self.kind == "delete-edges" and self.magnitude > 1:
            raise ValueError("deletion fraction must lie in [0, 1]")

    def apply(self, g: GraphDataset) -> GraphDataset:
        if self.kind == "delete-edges":
            return delete_edges(g, self.magnitude, self.seed)
        if self.kind == "feature-noise":
            return add_feature_noise(g, self.magnitude, self.seed)
        return adversarial_flip(g, self.magnitude, seed=self.seed)


def delete_edges(g: GraphDataset, rho: float, seed: int = 0) -> GraphDataset:
    """Remove exactly ``round(rho * m)`` edges chosen uniformly at random."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    k = int(round(rho * g.m))
    if k == 0:
        return g.replace()
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.permutation(g.m)[k:])
    return g.replace(edges=g.edges[keep])


def add_feature_noise(g: GraphDataset, sigma: float, seed: int = 0) -> GraphDataset:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return g.replace()
    rng = np.random.default_rng(seed)
    return g.replace(X=g.X + sigma * rng.standard_normal(g.X.shape))


# -- greedy attack ------------------------------------------------------------


@dataclass
class AttackState:
    """Edge set and bookkeeping while the attack runs."""

    y: np.ndarray
    edges: set
    deg: np.ndarray
    cross: int

    @property
    def m(self) -> int:
        return len(self.edges)


def cross_fraction_gain(state: AttackState, move: tuple) -> float:
    """Increase in the fraction of labeled cross-class edges caused by ``move``."""
    kind, u, v = move
    m, c = state.m, state.cross
    before = c / m if m else 0.0
    is_cross = state.y[u] != state.y[v]
    if kind == "add":
        after = (c + is_cross) / (m + 1)
    else:
        after = (c - is_cross) / (m - 1) if m > 1 else 0.0
    return after - before


def _candidates(state: AttackState, labeled: np.ndarray, pool: int) -> list[tuple]:
    moves = [("delete", u, v) for (u, v) in state.edges if state.y[u] == state.y[v] and state.y[u] != MISSING]
    # additions restricted to the highest-degree labeled nodes
    order = labeled[np.lexsort((labeled, -state.deg[labeled]))][:pool]
    for a in range(len(order)):
        for b in range(a + 1, len(order)):
            u, v = int(min(order[a], order[b])), int(max(order[a], order[b]))
            if state.y[u] != state.y[v] and (u, v) not in state.edges:
                moves.append(("add", u, v))
    return moves


def adversarial_flip(
    g: GraphDataset,
    beta: float,
    scorer: Callable[[AttackState, tuple], float] = cross_fraction_gain,
    seed: int = 0,
    pool: int = 32,
) -> GraphDataset:
    """Greedy degree-weighted heterophily attack with budget ``round(beta * m)``.

    Each step applies the legal move (cross-class addition among the
    ``pool`` highest-degree labeled nodes, or deletion of a same-class edge)
    with the highest score; ties go to the pair with the larger degree sum,
    then to ``seed``-driven random order.  If moves run out early the
    result carries ``report["attack"]["partial"] = True``.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    budget = int(round(beta * g.m))
    labeled = np.flatnonzero(g.labeled_mask)
    state = AttackState(
        y=g.y,
        edges={(int(u), int(v)) for u, v in g.edges},
        deg=g.degrees().astype(np.int64),
        cross=int(np.sum((g.y[g.edges[:, 0]] != g.y[g.edges[:, 1]]) & (g.y[g.edges[:, 0]] != MISSING) & (g.y[g.edges[:, 1]] != MISSING))),
    )
    rng = np.random.default_rng(seed)
    applied = []
    for _ in range(budget):
        moves = _candidates(state, labeled, pool)
        if not moves:
            break
        scores = np.array([scorer(state, mv) for mv in moves])
        degsum = np.array([state.deg[u] + state.deg[v] for _, u, v in moves])
        jitter = rng.random(len(moves))
        best = np.lexsort((jitter, -degsum, -scores))[0]
        kind, u, v = moves[best]
        delta = 1 if kind == "add" else -1
        if kind == "add":
            state.edges.add((u, v))
        else:
            state.edges.remove((u, v))
        if state.y[u] != state.y[v]:
            state.cross += delta
        state.deg[u] += delta
        state.deg[v] += delta
        applied.append(moves[best])
    partial = len(applied) < budget
    if partial:
        log.warning("attack stopped after %d of %d moves: no legal move left", len(applied), budget)
    edges = np.array(sorted(state.edges), dtype=np.int64).reshape(-1, 2)
    report = dict(g.report)
    report["attack"] = {"budget": budget, "applied": len(applied), "partial": partial, "moves": applied}
    return GraphDataset(g.X, g.y, edges, g.C, report=report)


# -- curves -------------------------------------------------------------------


@dataclass
class CurveRow:
    magnitude: float
    mean_acc: float
    std_acc: float
    n_ok: int
    accs: list = field(default_factory=list)


def robustness_curve(
    g: GraphDataset,
    trainer: Callable[[GraphDataset, int], float],
    kind: str,
    grid,
    seeds,
) -> list[CurveRow]:
    """Train and evaluate per (magnitude, seed) on the perturbed graph.

    ``trainer(g, seed)`` returns a test accuracy.  A failed cell is logged
    and stored as NaN.
    """
    grid = [float(x) for x in grid]
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("grid must be sorted ascending")
    rows = []
    for mag in grid:
        accs = []
        for seed in seeds:
            try:
                pg = PerturbationSpec(kind, mag, seed).apply(g)
                accs.append(float(trainer(pg, seed)))
            except Exception as exc:  # a bad cell must not sink the whole curve
                log.error("cell %s=%g seed %s failed: %s", kind, mag, seed, exc)
                accs.append(math.nan)
        ok = [a for a in accs if not math.isnan(a)]
        mean = float(np.mean(ok)) if ok else math.nan
        std = float(np.std(ok, ddof=1)) if len(ok) > 1 else (0.0 if ok else math.nan)
        rows.append(CurveRow(mag, mean, std, len(ok), accs))
    return rows


def write_curve(path, rows: list[CurveRow], tag: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["tag", "magnitude", "mean_acc", "std_acc", "n_ok"])
        for r in rows:
            w.writerow([tag, repr(r.magnitude), repr(r.mean_acc), repr(r.std_acc), r.n_ok])
    return path
