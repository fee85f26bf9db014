"""Joint training of the structural posterior and the sparse signed network.

Also holds the plain GCN reference model and checkpoint I/O.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .diffmath import DTYPE, dropout
from .graphcore import MISSING, GraphDataset, LabelSplit
from .posterior import (
    GraphTensors,
    StructuralPosterior,
    TemperatureSchedule,
    encoder_input,
    kl_to_prior,
    recon_loglik,
    sample_signed,
)
from .s2net import SpaMNet, predict_mc

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
CHECKPOINT_FORMAT = "spam-checkpoint/1"


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, dump: dict):
        super().__init__(f"loss became non-finite at epoch {epoch}: {dump}")
        self.epoch = epoch
        self.dump = dump


class CheckpointCorrupt(ValueError):
    pass


@dataclass
class TrainConfig:
    n_layers: int = 2
    K: int = 5
    K_eval: int = 8
    lam: float = 0.1
    lam_sp: float = 0.01
    lam_st: float = 0.1
    lr: float = 0.01
    lr_decay: float = 0.5
    lr_decay_every: int = 200
    weight_decay: float = 5e-4
    max_epochs: int = 300
    patience: int = 100
    dropout: float = 0.5
    seed: int = 0
    gamma: float = 1.0
    tau_start: float = 1.0
    tau_end: float = 0.1
    tau_decay: float = 0.98
    eps: float = 0.05
    prior: tuple = (1 / 3, 1 / 3, 1 / 3)
    hidden: int = 64
    d_val: int = 64
    steps: int = 3
    grad_clip: float | None = 5.0
    residual: bool = True
    coder: str = "ista"
    enc_hidden: int = 64
    dec_hidden: int = 64
    struct_reduction: str = "mean"

    def __post_init__(self):
        self.prior = tuple(float(p) for p in self.prior)
        if self.lam_sp < 0 or self.lam_st < 0:
            raise ConfigError("lam_sp and lam_st must be non-negative")
        if self.K < 1 or self.K_eval < 1:
            raise ConfigError("K must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.struct_reduction not in ("mean", "sum"):
            raise ConfigError("struct_reduction must be 'mean' or 'sum'")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config field(s): {sorted(unknown)}")
        return cls(**d)

    def schedule(self) -> TemperatureSchedule:
        return TemperatureSchedule(self.tau_start, self.tau_end, self.tau_decay)


class SpaM(nn.Module):
    """Structural posterior plus sparse signed classifier."""

    def __init__(self, d: int, n_classes: int, cfg: TrainConfig):
        super().__init__()
        self.posterior = StructuralPosterior(d + n_classes, cfg.enc_hidden, cfg.enc_hidden, cfg.dec_hidden)
        self.net = SpaMNet(
            d,
            n_classes,
            hidden=cfg.hidden,
            d_val=cfg.d_val,
            n_layers=cfg.n_layers,
            lam=cfg.lam,
            gamma=cfg.gamma,
            steps=cfg.steps,
            dropout=cfg.dropout,
            residual=cfg.residual,
            coder=cfg.coder,
        )


class GCN(nn.Module):
    """Two-layer symmetric-normalized graph convolution classifier."""

    def __init__(self, d: int, n_classes: int, hidden: int = 64, p_drop: float = 0.5, n_layers: int = 2):
        super().__init__()
        dims = [d] + [hidden] * (n_layers - 1) + [n_classes]
        self.lins = nn.ModuleList(nn.Linear(dims[k], dims[k + 1], dtype=DTYPE) for k in range(n_layers))
        self.p_drop = p_drop

    def forward(self, gt: GraphTensors, training: bool = False, generator=None) -> torch.Tensor:
        H = gt.X
        for k, lin in enumerate(self.lins):
            H = dropout(H, self.p_drop, generator, training)
            H = gt.propagate(lin(H))
            if k < len(self.lins) - 1:
                H = torch.relu(H)
        return torch.softmax(H, dim=1)


@dataclass
class TrainContext:
    """Tensors fixed for one (graph, split) pair."""

    g: GraphDataset
    split: LabelSplit
    gt: GraphTensors = field(init=False)
    Xin: torch.Tensor = field(init=False)
    train_idx: torch.Tensor = field(init=False)
    y_train: torch.Tensor = field(init=False)

    def __post_init__(self):
        train = np.asarray(self.split.train, dtype=np.int64)
        train = train[self.g.y[train] != MISSING]
        if len(train) == 0:
            raise ConfigError("no labeled training nodes")
        self.gt = GraphTensors(self.g)
        self.Xin = torch.as_tensor(encoder_input(self.g, train), dtype=DTYPE)
        self.train_idx = torch.as_tensor(train)
        self.y_train = torch.as_tensor(self.g.y[train])


@dataclass
class LossParts:
    total: torch.Tensor
    cls: torch.Tensor
    sparse: torch.Tensor
    struct: torch.Tensor

    def floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("cls", "sparse", "struct", "total")}


def loss_total(
    model: SpaM,
    ctx: TrainContext,
    cfg: TrainConfig,
    generator: torch.Generator | None = None,
    tau: float = 1.0,
    noise: list | None = None,
    hard: bool = True,
    training: bool = True,
) -> LossParts:
    """MC classification loss + sparsity penalty + negative ELBO of the posterior.

    ``noise`` freezes the K Gumbel draws (one ``(m, 3)`` tensor each);
    ``hard=False`` feeds the relaxed simplex forward instead of the
    straight-through one-hot sample.
    """
    gt = ctx.gt
    ep = model.posterior(gt, ctx.Xin)
    K = cfg.K if noise is None else len(noise)
    p_true = torch.zeros(len(ctx.train_idx), dtype=DTYPE)
    l1 = torch.zeros((), dtype=DTYPE)
    for k in range(K):
        s = sample_signed(ep, tau, generator=generator, noise=None if noise is None else noise[k], hard=hard)
        probs, alphas = model.net(gt, s.soft, training=training, generator=generator)
        p_true = p_true + probs[ctx.train_idx, ctx.y_train]
        for a in alphas:
            l1 = l1 + torch.abs(a).sum()
    cls = -torch.log(torch.clamp(p_true / K, min=PROB_FLOOR)).mean()
    sparse = l1 / (gt.n * K)
    struct = kl_to_prior(ep, cfg.prior) - recon_loglik(ep.probs, cfg.eps)
    if cfg.struct_reduction == "mean":
        # per-edge average keeps the structural term on the scale of the classification loss
        struct = struct / max(gt.m, 1)
    total = cls + cfg.lam_sp * sparse + cfg.lam_st * struct
    return LossParts(total, cls, sparse, struct)


def accuracy(probs: np.ndarray, y: np.ndarray, idx) -> float:
    idx = np.asarray(idx, dtype=np.int64)
    idx = idx[y[idx] != MISSING]
    if len(idx) == 0:
        raise ValueError("no labeled nodes to evaluate")
    # np.argmax resolves ties toward the lowest class index
    return float(np.mean(probs[idx].argmax(1) == y[idx]))


def spam_predict(model: SpaM, ctx: TrainContext, K: int, seed: int) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        ep = model.posterior(ctx.gt, ctx.Xin).detach()
    return predict_mc(ctx.gt, ep, model.net, K=K, seed=seed).probs


def evaluate(model: SpaM, ctx: TrainContext, idx, K: int = 8, seed: int = 0) -> float:
    return accuracy(spam_predict(model, ctx, K, seed), ctx.g.y, idx)


@dataclass
class TrainResult:
    model: nn.Module
    history: list
    best_epoch: int
    best_val: float
    ctx: TrainContext
    cfg: TrainConfig

    def evaluate(self, idx, K: int | None = None, seed: int | None = None) -> float:
        if isinstance(self.model, GCN):
            return gcn_evaluate(self.model, self.ctx, idx)
        return evaluate(self.model, self.ctx, idx, K or self.cfg.K_eval, eval_seed(self.cfg) if seed is None else seed)


def eval_seed(cfg: TrainConfig) -> int:
    return cfg.seed + 7919


def _optimizer(model: nn.Module, cfg: TrainConfig):
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.lr_decay_every, gamma=cfg.lr_decay)
    return opt, sched


def _fit(model, ctx, cfg, step_fn, val_fn) -> TrainResult:
    """Shared epoch loop with early stopping on validation accuracy."""
    opt, sched = _optimizer(model, cfg)
    has_val = len(ctx.split.val) > 0 and (ctx.g.y[ctx.split.val] != MISSING).any()
    history = []
    best_val, best_epoch, best_state, wait = -math.inf, -1, None, 0
    for epoch in range(cfg.max_epochs):
        model.train()
        parts = step_fn(epoch)
        vals = parts.floats()
        if not all(math.isfinite(v) for v in vals.values()):
            raise TrainingDiverged(epoch, {"losses": vals, "lr": opt.param_groups[0]["lr"]})
        opt.zero_grad()
        parts.total.backward()
        if cfg.grad_clip:
            nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        sched.step()
        val_acc = val_fn() if has_val else math.nan
        history.append(
            {
                "epoch": epoch,
                "cls_loss": vals["cls"],
                "sparse_loss": vals["sparse"],
                "struct_loss": vals["struct"],
                "total_loss": vals["total"],
                "val_acc": val_acc,
            }
        )
        if not has_val:
            continue
        if val_acc > best_val:
            best_val, best_epoch, wait = val_acc, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        best_epoch = len(history) - 1
    model.eval()
    return TrainResult(model, history, best_epoch, best_val if has_val else math.nan, ctx, cfg)


def train(g: GraphDataset, split: LabelSplit, cfg: TrainConfig) -> TrainResult:
    """Optimize posterior and network jointly; one Adam step per epoch."""
    ctx = TrainContext(g, split)
    torch.manual_seed(cfg.seed)
    model = SpaM(g.d, g.C, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    schedule = cfg.schedule()

    def step(epoch):
        return loss_total(model, ctx, cfg, generator=gen, tau=schedule(epoch))

    def val():
        return evaluate(model, ctx, split.val, cfg.K_eval, eval_seed(cfg))

    return _fit(model, ctx, cfg, step, val)


def gcn_train(g: GraphDataset, split: LabelSplit, cfg: TrainConfig) -> TrainResult:
    ctx = TrainContext(g, split)
    torch.manual_seed(cfg.seed)
    model = GCN(g.d, g.C, cfg.hidden, cfg.dropout, n_layers=cfg.n_layers)
    gen = torch.Generator().manual_seed(cfg.seed)
    zero = torch.zeros((), dtype=DTYPE)

    def step(epoch):
        probs = model(ctx.gt, training=True, generator=gen)
        p = probs[ctx.train_idx, ctx.y_train]
        cls = -torch.log(torch.clamp(p, min=PROB_FLOOR)).mean()
        return LossParts(cls, cls, zero, zero)

    def val():
        return gcn_evaluate(model, ctx, split.val)

    return _fit(model, ctx, cfg, step, val)


def gcn_evaluate(model: GCN, ctx: TrainContext, idx) -> float:
    model.eval()
    with torch.no_grad():
        probs = model(ctx.gt).numpy()
    return accuracy(probs, ctx.g.y, idx)


# -- checkpoints ------------------------------------------------------------------


@dataclass
class Checkpoint:
    manifest: dict
    tensors: dict


def build_model(kind: str, d: int, n_classes: int, cfg: TrainConfig) -> nn.Module:
    if kind == "spam":
        return SpaM(d, n_classes, cfg)
    if kind == "gcn":
        return GCN(d, n_classes, cfg.hidden, cfg.dropout, n_layers=cfg.n_layers)
    raise ConfigError(f"unknown model kind {kind!r}")


def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".json", ".bin") else path
    return base.with_suffix(".json"), base.with_suffix(".bin")


def save_checkpoint(path, model: nn.Module, cfg: TrainConfig, epoch: int = -1, metric: float = math.nan) -> Path:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float64 payload)."""
    mpath, bpath = _paths(path)
    mpath.parent.mkdir(parents=True, exist_ok=True)
    kind = "gcn" if isinstance(model, GCN) else "spam"
    if kind == "spam":
        d, C = model.net.layers[0].W_v.in_features, model.net.classifier.out_features
    else:
        d, C = model.lins[0].in_features, model.lins[-1].out_features
    state = model.state_dict()
    entries, chunks = [], []
    for name, t in state.items():
        entries.append({"name": name, "shape": list(t.shape)})
        chunks.append(t.detach().cpu().numpy().astype("<f8").ravel())
    payload = np.concatenate(chunks) if chunks else np.zeros(0, "<f8")
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "model": {"kind": kind, "d": d, "n_classes": C},
        "config": asdict(cfg),
        "epoch": epoch,
        "metric": None if metric is None or (isinstance(metric, float) and math.isnan(metric)) else metric,
        "tensors": entries,
        "n_values": int(payload.size),
        "payload": bpath.name,
    }
    bpath.write_bytes(payload.astype("<f8").tobytes())
    mpath.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return mpath


def load_checkpoint(path) -> Checkpoint:
    mpath, _ = _paths(path)
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointCorrupt(f"cannot read manifest {mpath}: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointCorrupt(f"unexpected checkpoint format {manifest.get('format')!r}")
    bpath = mpath.parent / manifest["payload"]
    raw = bpath.read_bytes()
    if len(raw) % 8:
        raise CheckpointCorrupt("payload length is not a multiple of 8 bytes")
    flat = np.frombuffer(raw, dtype="<f8")
    expected = sum(int(np.prod(e["shape"])) for e in manifest["tensors"])
    if flat.size != manifest["n_values"] or flat.size != expected:
        raise CheckpointCorrupt(f"payload has {flat.size} values, manifest expects {expected}")
    tensors, off = {}, 0
    for e in manifest["tensors"]:
        k = int(np.prod(e["shape"]))
        tensors[e["name"]] = flat[off:off + k].reshape(e["shape"]).astype(np.float64)
        off += k
    return Checkpoint(manifest, tensors)


def restore_model(ckpt: Checkpoint) -> tuple[nn.Module, TrainConfig]:
    cfg = TrainConfig.from_dict(ckpt.manifest["config"])
    info = ckpt.manifest["model"]
    model = build_model(info["kind"], info["d"], info["n_classes"], cfg)
    state = model.state_dict()
    if set(state) != set(ckpt.tensors):
        raise CheckpointCorrupt("tensor names do not match the model")
    for name, t in state.items():
        if tuple(t.shape) != ckpt.tensors[name].shape:
            raise CheckpointCorrupt(f"shape mismatch for {name}")
    model.load_state_dict({k: torch.as_tensor(v, dtype=DTYPE) for k, v in ckpt.tensors.items()})
    model.eval()
    return model, cfg
