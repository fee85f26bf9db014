"""Local LASSO over a neighbor dictionary.

Objective, exactly as used throughout the package (no 1/2 factor)::

    ||t - V a||^2 + lam * ||a||_1

``solve_lasso_cd`` is the exact reference solver (cyclic coordinate
descent, KKT-certified).  ``ista`` / ``batched_ista`` are the unrolled,
differentiable approximations used inside training.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .diffmath import DTYPE

POWER_ITERS = 10


@dataclass
class LassoProblem:
    t: np.ndarray
    V: np.ndarray
    lam: float

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        self.V = np.asarray(self.V, dtype=np.float64).reshape(len(self.t), -1)
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if not np.isfinite(self.V).all() or not np.isfinite(self.t).all():
            raise ValueError("dictionary and target must be finite")

    @property
    def k(self) -> int:
        return self.V.shape[1]


@dataclass
class SparseCode:
    neighbor_ids: np.ndarray
    alpha: np.ndarray
    lam: float
    converged: bool = True
    n_iter: int = 0
    frozen: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.neighbor_ids) != len(self.alpha):
            raise ValueError("alpha must align with neighbor_ids")

    def support(self, atol: float = 0.0) -> np.ndarray:
        return np.asarray(self.neighbor_ids)[np.abs(self.alpha) > atol]


def soft_threshold(x, tau):
    """sign(x) * max(|x| - tau, 0); works on scalars, arrays and tensors."""
    if isinstance(x, torch.Tensor):
        return torch.sign(x) * torch.clamp(torch.abs(x) - tau, min=0.0)
    if np.any(np.asarray(tau) < 0):
        raise ValueError("threshold must be non-negative")
    r = np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)
    return float(r) if np.ndim(r) == 0 else r


def lasso_objective(p: LassoProblem, alpha) -> float:
    r = p.t - p.V @ np.asarray(alpha, dtype=np.float64)
    return float(r @ r + p.lam * np.abs(alpha).sum())


def solve_lasso_cd(
    p: LassoProblem,
    tol: float = 1e-12,
    max_iter: int = 100_000,
    neighbor_ids=None,
) -> SparseCode:
    """Cyclic coordinate descent; stops when no coordinate moves more than ``tol``.

    Sweeps alternate between the current nonzero set and the full set;
    convergence is only declared after a full sweep.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    k = p.k
    ids = np.arange(k) if neighbor_ids is None else np.asarray(neighbor_ids)
    alpha = np.zeros(k)
    if k == 0:
        return SparseCode(ids, alpha, p.lam)
    G = p.V.T @ p.V
    b = p.V.T @ p.t
    norms = np.diag(G).copy()
    frozen = [j for j in range(k) if norms[j] == 0.0]
    if frozen:
        warnings.warn(f"zero-norm dictionary columns {frozen} frozen at 0")
    live = [j for j in range(k) if norms[j] != 0.0]
    half = p.lam / 2.0
    # c = V^T r, kept in sync with alpha
    c = b.copy()

    def sweep(coords) -> float:
        delta = 0.0
        for j in coords:
            old = alpha[j]
            rho = c[j] + norms[j] * old
            new = soft_threshold(rho, half) / norms[j]
            if new != old:
                c[:] -= G[:, j] * (new - old)
                alpha[j] = new
                delta = max(delta, abs(new - old))
        return delta

    converged = False
    it = 0
    while it < max_iter:
        it += 1
        if sweep(live) < tol:
            converged = True
            break
        active = [j for j in live if alpha[j] != 0.0]
        while it < max_iter:
            it += 1
            if sweep(active) < tol:
                break
    if not converged:
        warnings.warn(f"coordinate descent hit max_iter={max_iter} without converging")
    return SparseCode(ids, alpha, p.lam, converged=converged, n_iter=it, frozen=frozen)


def kkt_residual(p: LassoProblem, alpha) -> float:
    """Largest violation of the subgradient optimality conditions."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if p.k == 0:
        return 0.0
    g = 2.0 * p.V.T @ (p.V @ alpha - p.t)
    nz = alpha != 0
    res = np.where(nz, np.abs(g + p.lam * np.sign(alpha)), np.maximum(0.0, np.abs(g) - p.lam))
    return float(res.max())


# -- differentiable approximation ----------------------------------------------


def power_iteration(V: torch.Tensor, iters: int = POWER_ITERS) -> torch.Tensor:
    """Largest eigenvalue estimate of ``V^T V`` (Rayleigh quotient)."""
    k = V.shape[1]
    u = torch.full((k,), 1.0 / np.sqrt(max(k, 1)), dtype=DTYPE)
    for _ in range(iters):
        w = V.T @ (V @ u)
        u = w / torch.clamp(torch.linalg.vector_norm(w), min=1e-300)
    Vu = V @ u
    return (Vu @ Vu) / torch.clamp(u @ u, min=1e-300)


def default_step(V) -> float:
    """Step ``1 / (2 L)`` with ``L`` the power-iteration estimate of ``max eig(V^T V)``.

    ``2 L`` is the Lipschitz constant of the gradient of the unhalved
    squared error.
    """
    V = torch.as_tensor(np.asarray(V, dtype=np.float64))
    L = float(power_iteration(V))
    return 1.0 / (2.0 * L) if L > 0 else 1.0


def ista(t: torch.Tensor, V: torch.Tensor, lam, steps: int, eta) -> torch.Tensor:
    """``steps`` unrolled proximal-gradient updates from zero."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    eta = torch.as_tensor(eta, dtype=DTYPE)
    if (eta <= 0).any():
        raise ValueError("step size must be positive")
    alpha = torch.zeros(V.shape[1], dtype=DTYPE)
    for _ in range(steps):
        grad = V.T @ (t - V @ alpha)
        alpha = soft_threshold(alpha + 2.0 * eta * grad, eta * lam)
    return alpha


def approx_sparse_code(p: LassoProblem, steps: int = 3, step_size: float | None = None, neighbor_ids=None) -> SparseCode:
    ids = np.arange(p.k) if neighbor_ids is None else np.asarray(neighbor_ids)
    if p.k == 0:
        return SparseCode(ids, np.zeros(0), p.lam)
    eta = default_step(p.V) if step_size is None else step_size
    if eta <= 0:
        raise ValueError("step size must be positive")
    with torch.no_grad():
        a = ista(torch.as_tensor(p.t), torch.as_tensor(p.V), p.lam, steps, eta)
    return SparseCode(ids, a.numpy().copy(), p.lam, converged=False, n_iter=steps)


def _segment_sum(values: torch.Tensor, owner: torch.Tensor, n: int) -> torch.Tensor:
    out = torch.zeros((n,) + tuple(values.shape[1:]), dtype=values.dtype)
    return out.index_add(0, owner, values)


@dataclass
class PaddedLayout:
    """Slot of every directed edge inside its owner's padded dictionary block."""

    owner: torch.Tensor
    slot: torch.Tensor
    n: int
    kmax: int

    @classmethod
    def build(cls, owner: torch.Tensor, n: int) -> "PaddedLayout":
        cnt = torch.bincount(owner, minlength=n)
        order = torch.argsort(owner, stable=True)
        start = torch.cumsum(cnt, 0) - cnt
        slot = torch.empty_like(owner)
        slot[order] = torch.arange(len(owner)) - start[owner[order]]
        return cls(owner, slot, n, int(cnt.max()) if len(owner) else 0)

    def pack(self, cols: torch.Tensor) -> torch.Tensor:
        """``(n, kmax, d)`` blocks; row ``slot[e]`` of block ``owner[e]`` is ``cols[e]``."""
        P = torch.zeros((self.n, self.kmax, cols.shape[1]), dtype=cols.dtype)
        return P.index_put((self.owner, self.slot), cols)

    def unpack(self, A: torch.Tensor) -> torch.Tensor:
        return A[self.owner, self.slot]


def block_lipschitz(P: torch.Tensor, iters: int = POWER_ITERS) -> torch.Tensor:
    """Power-iteration estimate of ``max eig(V_i^T V_i)`` for padded blocks.

    Iterates on whichever Gram matrix (``k x k`` or ``d x d``) is smaller;
    both share their nonzero spectrum.
    """
    G = P @ P.transpose(1, 2) if P.shape[1] <= P.shape[2] else P.transpose(1, 2) @ P
    u = torch.full((G.shape[0], G.shape[1], 1), 1.0 / np.sqrt(max(G.shape[1], 1)), dtype=P.dtype)
    for _ in range(iters):
        w = G @ u
        u = w / torch.clamp(torch.linalg.vector_norm(w, dim=1, keepdim=True), min=1e-200)
    num = (u.transpose(1, 2) @ G @ u).reshape(-1)
    return num / torch.clamp((u * u).sum((1, 2)), min=1e-150)


def node_lipschitz(cols: torch.Tensor, owner: torch.Tensor, n: int, iters: int = POWER_ITERS) -> torch.Tensor:
    """Power-iteration estimate of ``max eig(V_i^T V_i)`` for every node."""
    if len(owner) == 0:
        return torch.zeros(n, dtype=DTYPE)
    lay = PaddedLayout.build(owner, n)
    return block_lipschitz(lay.pack(cols), iters)


def batched_ista(
    t: torch.Tensor,
    cols: torch.Tensor,
    owner: torch.Tensor,
    lam: float,
    steps: int,
    step_scale: torch.Tensor | float = 1.0,
    power_iters: int = POWER_ITERS,
    differentiable_step: bool = False,
    layout: PaddedLayout | None = None,
) -> torch.Tensor:
    """Unrolled ISTA for every node's local problem at once.

    ``cols[e]`` is the dictionary column contributed by directed edge ``e``
    to the problem of node ``owner[e]`` whose target is ``t[owner[e]]``.
    The per-node step is ``step_scale / (2 L_i)`` with ``L_i`` estimated by
    power iteration on that node's dictionary.  By default ``L_i`` is a
    constant for autograd; ``differentiable_step`` backpropagates through
    the power iteration too.  Returns one coefficient per directed edge.
    """
    n = t.shape[0]
    if cols.shape[0] == 0:
        return torch.zeros(0, dtype=DTYPE)
    lay = layout or PaddedLayout.build(owner, n)
    P = lay.pack(cols)
    if differentiable_step:
        L = block_lipschitz(P, power_iters)
    else:
        with torch.no_grad():
            L = block_lipschitz(P.detach(), power_iters)
    eta = (step_scale / (2.0 * torch.clamp(L, min=1e-12)))[:, None]
    tcol = t[:, :, None]
    alpha = torch.zeros((n, lay.kmax), dtype=DTYPE)
    for _ in range(steps):
        resid = tcol - P.transpose(1, 2) @ alpha[:, :, None]
        grad = (P @ resid).squeeze(2)
        alpha = soft_threshold(alpha + 2.0 * eta * grad, eta * lam)
    return lay.unpack(alpha)
