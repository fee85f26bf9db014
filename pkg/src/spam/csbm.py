"""Contextual stochastic block model and statistical checks of the theory.

Same-class pairs carry a ``+1`` edge with probability ``p_in``, cross-class
pairs a ``-1`` edge with probability ``p_out``; features are the class mean
plus isotropic Gaussian noise of scale ``s``.  The observed graph is the
unsigned support of the signed adjacency.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .graphcore import GraphDataset, SignedAdjacency, make_split
from .sparsecode import LassoProblem, solve_lasso_cd


class PreconditionError(ValueError):
    pass


def orthogonal_means(C: int, d: int, scale: float = 1.0) -> np.ndarray:
    """Class means ``scale * e_c`` (requires ``d >= C``)."""
    if d < C:
        raise ValueError("orthogonal means need d >= C")
    M = np.zeros((C, d))
    M[np.arange(C), np.arange(C)] = scale
    return M


@dataclass
class CsbmConfig:
    n: int = 400
    C: int = 2
    p_in: float = 0.05
    p_out: float = 0.2
    means: np.ndarray = field(default_factory=lambda: orthogonal_means(2, 8))
    s: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        if self.means.shape[0] != self.C:
            raise ValueError(f"need {self.C} class means, got {self.means.shape[0]}")
        if self.n % self.C:
            raise ValueError("n must be divisible by C (balanced classes)")
        if not (0 <= self.p_in <= 1 and 0 <= self.p_out <= 1):
            raise ValueError("edge probabilities must lie in [0, 1]")
        if self.s < 0:
            raise ValueError("noise scale must be non-negative")

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def with_seed(self, seed: int) -> "CsbmConfig":
        return replace(self, seed=seed)


def generate(cfg: CsbmConfig) -> tuple[GraphDataset, SignedAdjacency]:
    rng = np.random.default_rng(cfg.seed)
    y = np.repeat(np.arange(cfg.C), cfg.n // cfg.C)
    iu, ju = np.triu_indices(cfg.n, k=1)
    same = y[iu] == y[ju]
    u = rng.random(len(iu))
    pos = same & (u < cfg.p_in)
    neg = ~same & (u < cfg.p_out)
    keep = pos | neg
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    states = np.where(pos[keep], 1, -1).astype(np.int8)
    X = cfg.means[y] + cfg.s * rng.standard_normal((cfg.n, cfg.d))
    g = GraphDataset(X, y, edges, cfg.C)
    return g, SignedAdjacency(edges, states)


def random_graph(n: int, m: int, d: int = 16, C: int = 2, seed: int = 0) -> GraphDataset:
    """Uniform random graph with exactly ``m`` edges and Gaussian features."""
    rng = np.random.default_rng(seed)
    total = n * (n - 1) // 2
    if m > total:
        raise ValueError("too many edges for n")
    chosen = set()
    while len(chosen) < m:
        a = rng.integers(0, n, size=2 * (m - len(chosen)))
        b = rng.integers(0, n, size=len(a))
        for i, j in zip(a, b):
            if i != j:
                chosen.add((min(i, j), max(i, j)))
            if len(chosen) == m:
                break
    edges = np.array(sorted(chosen), dtype=np.int64)
    y = np.arange(n) % C
    return GraphDataset(rng.standard_normal((n, d)), y, edges, C)


def adjacency_parts(g: GraphDataset, z: SignedAdjacency) -> tuple[np.ndarray, np.ndarray]:
    """Dense ``(Z+, Z-)`` indicator matrices."""
    Zp = np.zeros((g.n, g.n))
    Zn = np.zeros((g.n, g.n))
    u, v = g.edges[:, 0], g.edges[:, 1]
    p, q = z.states == 1, z.states == -1
    Zp[u[p], v[p]] = Zp[v[p], u[p]] = 1.0
    Zn[u[q], v[q]] = Zn[v[q], u[q]] = 1.0
    return Zp, Zn


def linear_signed_update(H, Zp, Zn, W_self, W_pos, W_neg) -> np.ndarray:
    return H @ W_self + Zp @ H @ W_pos - Zn @ H @ W_neg


def class_means(H: np.ndarray, y: np.ndarray, C: int) -> np.ndarray:
    return np.stack([H[y == c].mean(0) for c in range(C)])


def margin_growth_check(cfg: CsbmConfig, W_self, W_pos, W_neg, trials: int = 20) -> float:
    """Fraction of trials where every inter-class mean distance grows after one update."""
    W_neg = np.asarray(W_neg, dtype=np.float64)
    problems = []
    if cfg.p_out <= cfg.p_in:
        problems.append(f"need p_out > p_in, got p_out={cfg.p_out}, p_in={cfg.p_in}")
    sym = np.allclose(W_neg, W_neg.T, atol=1e-12)
    if not sym or np.linalg.eigvalsh(0.5 * (W_neg + W_neg.T)).min() < -1e-12:
        problems.append("W_neg must be symmetric positive semidefinite")
    if problems:
        raise PreconditionError("; ".join(problems))
    passed = 0
    for seed in trial_seeds(cfg.seed, trials):
        g, z = generate(cfg.with_seed(seed))
        Zp, Zn = adjacency_parts(g, z)
        H = g.X
        H2 = linear_signed_update(H, Zp, Zn, W_self, W_pos, W_neg)
        m0, m1 = class_means(H, g.y, cfg.C), class_means(H2, g.y, cfg.C)
        ok = all(
            np.linalg.norm(m1[a] - m1[b]) > np.linalg.norm(m0[a] - m0[b])
            for a in range(cfg.C)
            for b in range(a + 1, cfg.C)
        )
        passed += ok
    return passed / trials


def trial_seeds(master: int, trials: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(master).generate_state(trials, dtype=np.uint32)]


def support_recovery_rate(cfg: CsbmConfig, lam: float, trials: int = 20) -> tuple[float, float]:
    """Mean precision and recall of the exact LASSO support against same-class neighbors.

    Target ``t_i = x_i``, dictionary = features of all observed neighbors.
    Nodes with an empty support are left out of the precision average and
    nodes without same-class neighbors out of the recall average.
    """
    M = cfg.means
    gaps = [np.linalg.norm(M[a] - M[b]) for a in range(cfg.C) for b in range(a + 1, cfg.C)]
    if min(gaps) < 4 * cfg.s:
        raise PreconditionError(f"means too close: min gap {min(gaps):.4g} < 4 s = {4 * cfg.s:.4g}")
    precisions, recalls = [], []
    for seed in trial_seeds(cfg.seed, trials):
        g, _ = generate(cfg.with_seed(seed))
        nbrs = [[] for _ in range(g.n)]
        for u, v in g.edges:
            nbrs[u].append(v)
            nbrs[v].append(u)
        prec_t, rec_t = [], []
        for i in range(g.n):
            if not nbrs[i]:
                continue
            ids = np.array(nbrs[i])
            sol = solve_lasso_cd(LassoProblem(g.X[i], g.X[ids].T, lam), tol=1e-10)
            supp = ids[sol.alpha != 0]
            same = ids[g.y[ids] == g.y[i]]
            hit = np.isin(supp, same).sum()
            if len(supp):
                prec_t.append(hit / len(supp))
            if len(same):
                rec_t.append(hit / len(same))
        precisions.append(np.mean(prec_t) if prec_t else np.nan)
        recalls.append(np.mean(rec_t) if rec_t else 0.0)
    return float(np.nanmean(precisions)) if not np.all(np.isnan(precisions)) else float("nan"), float(np.mean(recalls))


def true_sign_distribution(g: GraphDataset, p_in: float, p_out: float, eps: float = 0.05) -> np.ndarray:
    """``p*(z_ij | A_ij = 1, y_i, y_j)`` per observed edge, columns ``(-1, 0, +1)``.

    Prior ``p(z | y)`` from the block model, likelihood from the flip channel.
    """
    same = g.y[g.edges[:, 0]] == g.y[g.edges[:, 1]]
    out = np.zeros((g.m, 3))
    out[same, 2] = p_in * (1 - eps)
    out[same, 1] = (1 - p_in) * eps
    out[~same, 0] = p_out * (1 - eps)
    out[~same, 1] = (1 - p_out) * eps
    return out / out.sum(1, keepdims=True)


def mean_edge_kl(truth: np.ndarray, q: np.ndarray) -> float:
    """Mean over edges of ``KL(truth || q)`` with ``0 log 0 = 0``."""
    q = np.clip(q, 1e-300, None)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(truth > 0, truth * (np.log(truth) - np.log(q)), 0.0)
    return float(terms.sum(1).mean())


def posterior_consistency_trend(
    cfg: CsbmConfig,
    fractions,
    train_cfg=None,
    seeds=(0,),
    val_fraction: float = 0.1,
) -> list[float]:
    """Mean edge-wise KL between the learned and the true sign distribution per labeled fraction."""
    from .training import TrainConfig, train  # deferred: training imports the model stack

    fractions = list(fractions)
    if any(b <= a for a, b in zip(fractions, fractions[1:])):
        raise ValueError("fractions must be increasing")
    train_cfg = train_cfg or TrainConfig()
    out = []
    for f in fractions:
        kls = []
        for seed in seeds:
            g, _ = generate(cfg.with_seed(seed))
            val = min(val_fraction, 1.0 - f)
            split = make_split(g, (f, val, max(0.0, 1.0 - f - val)), seed=seed)
            res = train(g, split, replace(train_cfg, seed=seed))
            q = learned_edge_probs(res)
            kls.append(mean_edge_kl(true_sign_distribution(g, cfg.p_in, cfg.p_out, train_cfg.eps), q))
        out.append(float(np.mean(kls)))
    return out


def learned_edge_probs(res) -> np.ndarray:
    import torch

    res.model.eval()
    with torch.no_grad():
        ep = res.model.posterior(res.ctx.gt, res.ctx.Xin)
    return ep.probs.numpy()
