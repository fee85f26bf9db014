"""Float64 tensor arithmetic with reverse-mode gradients.

Thin layer over ``torch`` that pins the dtype to float64, validates shapes
and finiteness, and adds a finite-difference gradient checker used to
certify the training path.
"""

from __future__ import annotations

import logging
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

log = logging.getLogger(__name__)

DTYPE = torch.float64
Tensor = torch.Tensor

UNARY_OPS = ("relu", "softmax", "layernorm", "abs", "sign")
LAYERNORM_EPS = 1e-12


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class NonDeterministicError(RuntimeError):
    """Raised when a function under gradient check is not reproducible."""


def tensor(data, requires_grad: bool = False) -> Tensor:
    t = torch.as_tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE).clone()
    t.requires_grad_(requires_grad)
    return t


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return x


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() != 2 or b.dim() != 2:
        raise DimensionError(f"matmul expects rank-2 operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def layernorm_rows(x: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    xc = x - mu
    var = (xc * xc).mean(dim=-1, keepdim=True)
    return xc / torch.sqrt(var + eps)


def apply_unary(x: Tensor, f: str) -> Tensor:
    """Apply a named elementwise or row-wise map.

    ``softmax`` and ``layernorm`` act on the rows of a rank-2 tensor.
    """
    if f not in UNARY_OPS:
        raise ValueError(f"unknown unary op {f!r}; expected one of {UNARY_OPS}")
    if f in ("softmax", "layernorm") and x.dim() != 2:
        raise DimensionError(f"{f} expects a rank-2 tensor, got shape {tuple(x.shape)}")
    check_finite(x, f"input to {f}")
    if f == "relu":
        out = torch.relu(x)
    elif f == "softmax":
        out = torch.softmax(x, dim=1)
    elif f == "layernorm":
        out = layernorm_rows(x)
    elif f == "abs":
        out = torch.abs(x)
    else:
        out = torch.sign(x)
    return check_finite(out, f"output of {f}")


def dropout(x: Tensor, rate: float, generator: torch.Generator | None, training: bool) -> Tensor:
    """Inverted dropout with a seeded Bernoulli mask; identity at evaluation."""
    if not training or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    keep = torch.rand(x.shape, generator=generator, dtype=DTYPE) >= rate
    return x * keep.to(DTYPE) / (1.0 - rate)


def backward(loss: Tensor, params: Iterable[Tensor] = (), debug: bool = False) -> None:
    """Populate ``.grad`` of every parameter reachable from ``loss``.

    Parameters not connected to ``loss`` end with a zero gradient; in debug
    mode they are reported.
    """
    if loss.numel() != 1:
        raise DimensionError(f"backward expects a scalar loss, got shape {tuple(loss.shape)}")
    params = list(params)
    if loss.requires_grad:
        loss.backward()
    elif debug:
        log.warning("backward called on a loss with no recorded computation")
    for i, p in enumerate(params):
        if p.grad is None:
            if debug:
                log.warning("parameter %d (shape %s) is disconnected from the loss", i, tuple(p.shape))
            p.grad = torch.zeros_like(p)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    The error for one entry is ``|analytic - numeric| / max(1, |numeric|)``.
    ``f`` is called repeatedly with the parameters perturbed in place and
    must be a deterministic function of them.  With ``max_entries`` set,
    a seeded random subset of entries per parameter is checked.
    """
    if not 1e-8 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-8, 1e-4]")
    params = list(params)

    with torch.no_grad():
        a0 = f().item()
        a1 = f().item()
    if a0 != a1:
        raise NonDeterministicError(f"f is not deterministic: {a0!r} != {a1!r}")

    for p in params:
        p.grad = None
    loss = f()
    grads = torch.autograd.grad(loss, params, allow_unused=True)

    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            analytic = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = np.sort(rng.choice(flat.numel(), size=max_entries, replace=False))
            for k in idx:
                orig = flat[k].item()
                flat[k] = orig + h
                fp = f().item()
                flat[k] = orig - h
                fm = f().item()
                flat[k] = orig
                numeric = (fp - fm) / (2.0 * h)
                err = abs(analytic.view(-1)[k].item() - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    return worst
