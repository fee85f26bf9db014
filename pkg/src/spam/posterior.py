"""Structural posterior over signed edges.

A two-layer GCN encodes ``[X || onehot(Y_train)]``; a pairwise MLP turns
each observed edge into three logits ordered ``(-1, 0, +1)``.  Samples are
drawn with the straight-through Gumbel-softmax estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .diffmath import DTYPE
from .graphcore import GraphDataset, SignedAdjacency
from .sparsecode import PaddedLayout

SIGN_VALUES = np.array([-1, 0, 1], dtype=np.int8)
NEG, ZERO, POS = 0, 1, 2


class GraphTensors:
    """Torch views of a ``GraphDataset`` shared by every model component.

    Directed edge ``e < m`` runs ``u -> v`` for undirected edge ``e``;
    ``e + m`` runs ``v -> u``.  ``owner`` is the receiving node, ``nbr`` the
    sending one, ``eid`` the undirected edge id.
    """

    def __init__(self, g: GraphDataset):
        self.g = g
        self.n = g.n
        self.m = g.m
        self.X = torch.as_tensor(g.X, dtype=DTYPE)
        e = torch.as_tensor(g.edges, dtype=torch.long).reshape(-1, 2)
        self.edges = e
        self.owner = torch.cat([e[:, 0], e[:, 1]])
        self.nbr = torch.cat([e[:, 1], e[:, 0]])
        self.eid = torch.cat([torch.arange(self.m), torch.arange(self.m)])
        deg = torch.bincount(self.owner, minlength=self.n).to(DTYPE) + 1.0
        dinv = deg.rsqrt()
        self.self_weight = dinv * dinv
        self.edge_weight = dinv[self.owner] * dinv[self.nbr]
        self.layout = PaddedLayout.build(self.owner, self.n)

    def propagate(self, H: torch.Tensor) -> torch.Tensor:
        """``D^-1/2 (A + I) D^-1/2 H``."""
        out = self.self_weight[:, None] * H
        return out.index_add(0, self.owner, self.edge_weight[:, None] * H[self.nbr])


def encoder_input(g: GraphDataset, train_idx) -> np.ndarray:
    """Features with one-hot training labels appended; other rows get zeros."""
    onehot = np.zeros((g.n, g.C))
    train_idx = np.asarray(train_idx, dtype=np.int64)
    onehot[train_idx, g.y[train_idx]] = 1.0
    return np.hstack([g.X, onehot])


class GCNEncoder(nn.Module):
    def __init__(self, d_in: int, hidden: int = 64, d_out: int = 64):
        super().__init__()
        self.lin1 = nn.Linear(d_in, hidden, bias=False, dtype=DTYPE)
        self.lin2 = nn.Linear(hidden, d_out, bias=False, dtype=DTYPE)

    def forward(self, gt: GraphTensors, Xin: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.lin1(gt.propagate(Xin)))
        return self.lin2(gt.propagate(h))


class EdgeDecoder(nn.Module):
    """Two-layer perceptron on ``[h_i || h_j]``, averaged over both orders."""

    def __init__(self, d_emb: int, hidden: int = 64):
        super().__init__()
        self.lin1 = nn.Linear(2 * d_emb, hidden, dtype=DTYPE)
        self.lin2 = nn.Linear(hidden, 3, dtype=DTYPE)

    def forward(self, H: torch.Tensor, edges: torch.Tensor) -> torch.Tensor:
        hi, hj = H[edges[:, 0]], H[edges[:, 1]]
        a = self.lin2(torch.relu(self.lin1(torch.cat([hi, hj], 1))))
        b = self.lin2(torch.relu(self.lin1(torch.cat([hj, hi], 1))))
        return 0.5 * (a + b)


@dataclass
class EdgePosterior:
    """Per-edge categorical over ``(-1, 0, +1)``."""

    edges: np.ndarray
    logits: torch.Tensor

    def __post_init__(self):
        if self.logits.shape != (len(self.edges), 3):
            raise ValueError(f"logits must be (m, 3), got {tuple(self.logits.shape)}")

    @property
    def log_probs(self) -> torch.Tensor:
        return torch.log_softmax(self.logits, dim=1)

    @property
    def probs(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=1)

    @classmethod
    def from_probs(cls, edges, probs) -> "EdgePosterior":
        p = torch.as_tensor(np.asarray(probs, dtype=np.float64))
        with np.errstate(divide="ignore"):
            logits = torch.log(p)
        logits = torch.where(torch.isfinite(logits), logits, torch.full_like(logits, -1e30))
        return cls(np.asarray(edges).reshape(-1, 2), logits)

    def detach(self) -> "EdgePosterior":
        return EdgePosterior(self.edges, self.logits.detach())

    def mode(self) -> SignedAdjacency:
        return SignedAdjacency(self.edges, SIGN_VALUES[self.logits.argmax(1).numpy()])


class StructuralPosterior(nn.Module):
    def __init__(self, d_in: int, hidden: int = 64, emb: int = 64, dec_hidden: int = 64):
        super().__init__()
        self.encoder = GCNEncoder(d_in, hidden, emb)
        self.decoder = EdgeDecoder(emb, dec_hidden)

    def forward(self, gt: GraphTensors, Xin: torch.Tensor) -> EdgePosterior:
        return edge_posterior(self.encoder(gt, Xin), gt.edges, self.decoder, gt.g.edges)


def edge_posterior(H: torch.Tensor, edges: torch.Tensor, decoder: EdgeDecoder, edges_np=None) -> EdgePosterior:
    logits = decoder(H, edges)
    return EdgePosterior(edges.numpy() if edges_np is None else edges_np, logits)


@dataclass
class SignedSample:
    """A hard signed adjacency plus the relaxed simplex carrying gradients.

    ``soft`` is the straight-through tensor (value one-hot, gradient of the
    tempered softmax) unless the sample was drawn with ``hard=False``.
    """

    z: SignedAdjacency
    soft: torch.Tensor
    noise: torch.Tensor


def gumbel_noise(m: int, generator: torch.Generator) -> torch.Tensor:
    u = torch.rand((m, 3), generator=generator, dtype=DTYPE)
    u = torch.clamp(u, min=1e-300)
    return -torch.log(-torch.log(u))


def sample_signed(
    ep: EdgePosterior,
    tau: float,
    seed: int | None = None,
    generator: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
    hard: bool = True,
) -> SignedSample:
    if tau <= 0:
        raise ValueError("temperature must be positive")
    m = len(ep.edges)
    if noise is None:
        if generator is None:
            generator = torch.Generator().manual_seed(0 if seed is None else int(seed))
        noise = gumbel_noise(m, generator)
    y_soft = torch.softmax((ep.log_probs + noise) / tau, dim=1)
    idx = (ep.log_probs.detach() + noise).argmax(1)
    z = SignedAdjacency(ep.edges, SIGN_VALUES[idx.numpy()])
    if hard:
        y_hard = torch.zeros_like(y_soft).scatter_(1, idx[:, None], 1.0)
        y = y_hard + (y_soft - y_soft.detach())
    else:
        y = y_soft
    return SignedSample(z, y, noise)


def onehot_states(z: SignedAdjacency) -> torch.Tensor:
    """Fixed signed adjacency as a (m, 3) one-hot tensor."""
    idx = torch.as_tensor(z.states.astype(np.int64) + 1)
    return torch.zeros((len(idx), 3), dtype=DTYPE).scatter_(1, idx[:, None], 1.0)


def kl_to_prior(ep: EdgePosterior, prior=(1 / 3, 1 / 3, 1 / 3)) -> torch.Tensor:
    """Sum over edges of KL(q_ij || prior), with 0 log 0 = 0."""
    prior = torch.as_tensor(np.asarray(prior, dtype=np.float64))
    if (prior <= 0).any() or abs(float(prior.sum()) - 1.0) > 1e-9:
        raise ValueError("prior must be strictly positive and sum to 1")
    p = ep.probs
    logp = ep.log_probs
    terms = torch.where(p > 0, p * (logp - torch.log(prior)), torch.zeros_like(p))
    return terms.sum()


def recon_loglik(z_soft: torch.Tensor, eps: float = 0.05) -> torch.Tensor:
    """Expected log-likelihood of the observed edges under a flip channel.

    ``P(A_ij = 1 | z != 0) = 1 - eps`` and ``P(A_ij = 1 | z = 0) = eps``.
    """
    if not 0.0 < eps < 0.5:
        raise ValueError("flip rate must lie in (0, 0.5)")
    present = z_soft[:, NEG] + z_soft[:, POS]
    return (present * math.log1p(-eps) + z_soft[:, ZERO] * math.log(eps)).sum()


@dataclass
class TemperatureSchedule:
    start: float = 1.0
    end: float = 0.1
    decay: float = 0.98

    def __post_init__(self):
        if not (self.start > 0 and self.end > 0 and 0 < self.decay <= 1):
            raise ValueError("temperatures must be positive and decay in (0, 1]")

    def __call__(self, epoch: int) -> float:
        return max(self.end, self.start * self.decay ** epoch)
