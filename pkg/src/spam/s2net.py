"""Sparse signed message passing layers, the stacked network and MC prediction."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .diffmath import DTYPE, dropout, layernorm_rows
from .graphcore import GraphDataset, SignedAdjacency
from .posterior import NEG, POS, EdgePosterior, GraphTensors, onehot_states, sample_signed
from .sparsecode import LassoProblem, SparseCode, batched_ista, soft_threshold, solve_lasso_cd

CODERS = ("ista", "exact", "mlp")


def signed_aggregate(V_i, alpha, signs, gamma: float = 1.0):
    """``sum_{+} a_j v_j - gamma * sum_{-} |a_j| v_j`` for columns ``v_j`` of ``V_i``."""
    V_i = np.asarray(V_i, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    signs = np.asarray(signs)
    if not np.isin(signs, (-1, 1)).all():
        raise ValueError("signs must be -1 or +1")
    w = np.where(signs > 0, alpha, -gamma * np.abs(alpha))
    return V_i @ w


class MLPCoder(nn.Module):
    """Learned per-neighbor coefficient scorer on ``[t_i || v_j]``."""

    def __init__(self, d_val: int, hidden: int = 32):
        super().__init__()
        self.lin1 = nn.Linear(2 * d_val, hidden, dtype=DTYPE)
        self.lin2 = nn.Linear(hidden, 1, dtype=DTYPE)

    def forward(self, t_e: torch.Tensor, cols: torch.Tensor, lam: float) -> torch.Tensor:
        raw = self.lin2(torch.relu(self.lin1(torch.cat([t_e, cols], 1)))).squeeze(1)
        return soft_threshold(raw, lam / 2.0)


class S2Layer(nn.Module):
    """One sparse signed layer.

    Per node: values ``v_j = W_v h_j`` of signed neighbors form the local
    dictionary, ``t_i = W_t h_i`` is the target, the local LASSO gives
    ``alpha_i`` and the update is
    ``W_self h_i + W_o(sum_+ a v - gamma sum_- |a| v) + b``.
    """

    def __init__(
        self,
        d_in: int,
        d_out: int,
        d_val: int = 64,
        lam: float = 0.1,
        gamma: float = 1.0,
        steps: int = 3,
        residual: bool = True,
        coder: str = "ista",
    ):
        super().__init__()
        if coder not in CODERS:
            raise ValueError(f"coder must be one of {CODERS}")
        if lam <= 0 or gamma < 0 or steps < 1:
            raise ValueError("need lam > 0, gamma >= 0, steps >= 1")
        self.W_v = nn.Linear(d_in, d_val, bias=False, dtype=DTYPE)
        self.W_t = nn.Linear(d_in, d_val, bias=False, dtype=DTYPE)
        self.W_o = nn.Linear(d_val, d_out, bias=True, dtype=DTYPE)
        self.W_self = nn.Linear(d_in, d_out, bias=False, dtype=DTYPE)
        # learnable multiplier on the per-node 1/(2L) step
        self.log_step = nn.Parameter(torch.zeros((), dtype=DTYPE))
        self.mlp = MLPCoder(d_val) if coder == "mlp" else None
        self.lam = lam
        self.gamma = gamma
        self.steps = steps
        self.residual = residual
        self.coder = coder
        self.differentiable_step = False

    def forward(self, gt: GraphTensors, H: torch.Tensor, zsoft: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(H', alpha)`` with one coefficient per directed edge."""
        V = self.W_v(H)
        t = self.W_t(H)
        pos = zsoft[gt.eid, POS]
        neg = zsoft[gt.eid, NEG]
        member = pos + neg
        Vn = V[gt.nbr]
        cols = Vn * member[:, None]
        if self.coder == "ista":
            alpha = batched_ista(
                t, cols, gt.owner, self.lam, self.steps, torch.exp(self.log_step),
                differentiable_step=self.differentiable_step, layout=gt.layout,
            )
        elif self.coder == "mlp":
            alpha = self.mlp(t[gt.owner], cols, self.lam) * member
        else:
            alpha = self.exact_codes(gt, t.detach(), cols.detach())
        w = pos * alpha - self.gamma * neg * torch.abs(alpha)
        agg = torch.zeros_like(V).index_add(0, gt.owner, w[:, None] * Vn)
        out = self.W_o(agg)
        if self.residual:
            out = out + self.W_self(H)
        return out, alpha

    def exact_codes(self, gt: GraphTensors, t: torch.Tensor, cols: torch.Tensor) -> torch.Tensor:
        owner = gt.owner.numpy()
        tn, cn = t.numpy(), cols.numpy()
        alpha = np.zeros(len(owner))
        order = np.argsort(owner, kind="stable")
        bounds = np.searchsorted(owner[order], np.arange(gt.n + 1))
        for i in range(gt.n):
            es = order[bounds[i]:bounds[i + 1]]
            if len(es) == 0:
                continue
            keep = es[np.abs(cn[es]).sum(1) > 0]
            if len(keep) == 0:
                continue
            sol = solve_lasso_cd(LassoProblem(tn[i], cn[keep].T, self.lam), tol=1e-12)
            alpha[keep] = sol.alpha
        return torch.as_tensor(alpha, dtype=DTYPE)


class SpaMNet(nn.Module):
    """Stack of ``S2Layer`` with ReLU after each layer and layernorm/dropout between them."""

    def __init__(
        self,
        d_in: int,
        n_classes: int,
        hidden: int = 64,
        d_val: int = 64,
        n_layers: int = 2,
        lam: float = 0.1,
        gamma: float = 1.0,
        steps: int = 3,
        dropout: float = 0.5,
        residual: bool = True,
        coder: str = "ista",
    ):
        super().__init__()
        if n_layers < 1:
            raise ValueError("need at least one layer")
        dims = [d_in] + [hidden] * n_layers
        self.layers = nn.ModuleList(
            S2Layer(dims[k], dims[k + 1], d_val, lam, gamma, steps, residual, coder) for k in range(n_layers)
        )
        self.classifier = nn.Linear(hidden, n_classes, dtype=DTYPE)
        self.dropout = dropout

    def embed(self, gt: GraphTensors, zsoft: torch.Tensor, training: bool = False, generator=None):
        H = gt.X
        alphas = []
        L = len(self.layers)
        for k, layer in enumerate(self.layers):
            H, a = layer(gt, H, zsoft)
            alphas.append(a)
            H = torch.relu(H)
            if k < L - 1:
                H = layernorm_rows(H)
                H = dropout(H, self.dropout, generator, training)
        return H, alphas

    def forward(self, gt: GraphTensors, zsoft: torch.Tensor, training: bool = False, generator=None):
        """Class probabilities ``(n, C)`` and per-layer edge coefficients."""
        H, alphas = self.embed(gt, zsoft, training, generator)
        return torch.softmax(self.classifier(H), dim=1), alphas


def node_l1(alpha: torch.Tensor, gt: GraphTensors) -> torch.Tensor:
    """``||alpha_i||_1`` per node."""
    return torch.zeros(gt.n, dtype=DTYPE).index_add(0, gt.owner, torch.abs(alpha))


@dataclass
class Prediction:
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if not np.allclose(self.probs.sum(1), 1.0, atol=1e-9):
            raise ValueError("prediction rows must sum to 1")

    def argmax(self) -> np.ndarray:
        return self.probs.argmax(1)


def _tensors(g) -> GraphTensors:
    return g if isinstance(g, GraphTensors) else GraphTensors(g)


def s2_layer(g, H, z: SignedAdjacency, layer: S2Layer, exact: bool = False) -> tuple[torch.Tensor, list[SparseCode]]:
    """Apply one layer for a fixed signed adjacency; also return per-node codes."""
    gt = _tensors(g)
    H = torch.as_tensor(np.asarray(H, dtype=np.float64)) if not isinstance(H, torch.Tensor) else H
    zs = onehot_states(z)
    saved = layer.coder
    if exact:
        layer.coder = "exact"
    try:
        out, alpha = layer(gt, H, zs)
    finally:
        layer.coder = saved
    return out, codes_from_alpha(gt, z, alpha, layer.lam)


def codes_from_alpha(gt: GraphTensors, z: SignedAdjacency, alpha: torch.Tensor, lam: float) -> list[SparseCode]:
    states = z.states[gt.eid.numpy()]
    owner, nbr = gt.owner.numpy(), gt.nbr.numpy()
    a = alpha.detach().numpy()
    codes = []
    for i in range(gt.n):
        sel = np.flatnonzero((owner == i) & (states != 0))
        codes.append(SparseCode(nbr[sel], a[sel], lam))
    return codes


def forward(g, z: SignedAdjacency, net: SpaMNet, seed: int | None = None, training: bool = False) -> Prediction:
    gt = _tensors(g)
    gen = torch.Generator().manual_seed(int(seed)) if seed is not None else None
    with torch.no_grad():
        probs, _ = net(gt, onehot_states(z), training=training, generator=gen)
    return Prediction(probs.numpy())


def sample_seeds(seed: int, K: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(K, dtype=np.uint32)]


def draw_states(ep: EdgePosterior, K: int, seed: int) -> np.ndarray:
    """K hard signed adjacencies as a (K, m) array of states."""
    out = np.empty((K, len(ep.edges)), dtype=np.int8)
    for k, s in enumerate(sample_seeds(seed, K)):
        out[k] = sample_signed(ep.detach(), 1.0, generator=torch.Generator().manual_seed(s)).z.states
    return out


def predict_mc(g, ep: EdgePosterior, net: SpaMNet, K: int = 8, seed: int = 0) -> Prediction:
    """Average of K evaluation-mode forwards on independently sampled signed graphs.

    Repeated samples are evaluated once and weighted by multiplicity.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    gt = _tensors(g)
    states = draw_states(ep, K, seed)
    uniq, counts = np.unique(states, axis=0, return_counts=True) if states.shape[1] else (states[:1], np.array([K]))
    total = np.zeros((gt.n, net.classifier.out_features))
    with torch.no_grad():
        for row, c in zip(uniq, counts):
            probs, _ = net(gt, onehot_states(SignedAdjacency(ep.edges, row)))
            total += c * probs.numpy()
    return Prediction(total / K)


def exact_marginal(g, ep: EdgePosterior, net: SpaMNet) -> Prediction:
    """Posterior-weighted average over all 3^m signed states (small graphs only)."""
    gt = _tensors(g)
    m = len(ep.edges)
    if m > 10:
        raise ValueError("exact enumeration limited to 10 edges")
    P = ep.probs.detach().numpy()
    total = np.zeros((gt.n, net.classifier.out_features))
    with torch.no_grad():
        for combo in itertools.product(range(3), repeat=m):
            w = float(np.prod(P[np.arange(m), list(combo)])) if m else 1.0
            z = SignedAdjacency(ep.edges, np.array(combo, dtype=np.int8) - 1)
            probs, _ = net(gt, onehot_states(z))
            total += w * probs.numpy()
    return Prediction(total)


def joint_predictive(g, joint: dict, net: SpaMNet) -> np.ndarray:
    """``sum_Z q(Z) p(y | X, Z)`` for an explicit joint ``{states tuple: prob}``."""
    gt = _tensors(g)
    total = np.zeros((gt.n, net.classifier.out_features))
    with torch.no_grad():
        for states, w in joint.items():
            z = SignedAdjacency(gt.g.edges, np.asarray(states, dtype=np.int8))
            probs, _ = net(gt, onehot_states(z))
            total += w * probs.numpy()
    return total


def clamped_ce(probs: np.ndarray, y: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """Per-node ``-log max(p(y), floor)``; Lipschitz ``1/floor`` in ``p(y)``."""
    return -np.log(np.maximum(probs[np.arange(len(y)), y], floor))


def mean_pairwise_cosine(H: torch.Tensor) -> float:
    Hn = H / torch.clamp(torch.linalg.vector_norm(H, dim=1, keepdim=True), min=1e-12)
    S = Hn @ Hn.T
    n = H.shape[0]
    return float((S.sum() - S.diagonal().sum()) / (n * (n - 1)))


__all__ = [
    "S2Layer",
    "SpaMNet",
    "Prediction",
    "signed_aggregate",
    "s2_layer",
    "forward",
    "predict_mc",
    "exact_marginal",
    "joint_predictive",
    "clamped_ce",
    "node_l1",
]
