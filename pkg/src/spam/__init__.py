"""Sparse signed message passing with a learned structural posterior."""

from .graphcore import GraphDataset, LabelSplit, SignedAdjacency, homophily_ratio, load_dataset, make_split
from .posterior import EdgePosterior, StructuralPosterior, sample_signed
from .s2net import S2Layer, SpaMNet, exact_marginal, predict_mc
from .sparsecode import LassoProblem, SparseCode, solve_lasso_cd
from .training import GCN, SpaM, TrainConfig, gcn_train, train

__version__ = "0.1.0"

__all__ = [
    "GraphDataset",
    "LabelSplit",
    "SignedAdjacency",
    "homophily_ratio",
    "load_dataset",
    "make_split",
    "EdgePosterior",
    "StructuralPosterior",
    "sample_signed",
    "S2Layer",
    "SpaMNet",
    "exact_marginal",
    "predict_mc",
    "LassoProblem",
    "SparseCode",
    "solve_lasso_cd",
    "GCN",
    "SpaM",
    "TrainConfig",
    "gcn_train",
    "train",
]
