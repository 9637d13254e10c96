"""Tensor primitives, gradient collection, Adam and finite-difference checking.

Tensors are ``torch.Tensor``; reverse-mode differentiation is torch autograd.
A parameter store is a plain ``dict`` mapping canonical names (as produced by
``nn.Module.named_parameters``) to tensors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

LN_EPS = 1e-5


class NumericalError(RuntimeError):
    pass


# ---------------------------------------------------------------- primitives


def softplus(x: torch.Tensor) -> torch.Tensor:
    return torch.clamp(x, min=0) + torch.log1p(torch.exp(-torch.abs(x)))


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def softmax(x: torch.Tensor, dim: int = -1, allowed: torch.Tensor | None = None) -> torch.Tensor:
    """Softmax along ``dim``; entries where ``allowed`` is False get weight exactly 0."""
    if allowed is None:
        return torch.softmax(x, dim=dim)
    if not bool(allowed.any(dim=dim).all()):
        raise NumericalError("attention row with every position denied")
    x = x.masked_fill(~allowed, float("-inf"))
    return torch.softmax(x, dim=dim)


def layer_norm(x: torch.Tensor, gain: torch.Tensor | None = None, bias: torch.Tensor | None = None, eps: float = LN_EPS):
    return F.layer_norm(x, x.shape[-1:], gain, bias, eps)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ValueError(f"shape mismatch {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def mean(x: torch.Tensor, dim: int) -> torch.Tensor:
    return x.mean(dim=dim)


def concat(xs, dim: int = -1) -> torch.Tensor:
    return torch.cat(list(xs), dim=dim)


# ------------------------------------------------------------------ gradients


def param_store(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return dict(module.named_parameters())


def backward(loss: torch.Tensor, params: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradients of a scalar loss for every named parameter (zeros when unused)."""
    if loss.dim() != 0:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    names = list(params)
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    return {
        n: (g.detach() if g is not None else torch.zeros_like(p))
        for n, p, g in zip(names, tensors, grads)
    }


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: AdamState) -> AdamState:
    """Bias-corrected Adam, updating ``params`` in place."""
    if set(params) != set(grads):
        raise ValueError("parameter and gradient stores are not aligned")
    bad = [n for n, g in grads.items() if not torch.isfinite(g).all()]
    if bad:
        raise NumericalError(f"non-finite gradient in {bad[:5]}; step aborted")
    state.step += 1
    c1 = 1 - state.beta1**state.step
    c2 = 1 - state.beta2**state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
        p.sub_(state.lr * (m / c1) / (torch.sqrt(v / c2) + state.eps))
    return state


# --------------------------------------------------------- finite differences


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_coords: int
    worst: tuple[str, int] | None
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def finite_difference_check(
    closure: Callable[[], torch.Tensor],
    params: dict[str, torch.Tensor],
    h: float = 1e-5,
    tolerance: float = 1e-4,
    n_coords: int = 200,
    seed: int = 0,
    abs_floor: float = 1e-8,
) -> GradCheckReport:
    """Compare autograd against central differences on sampled coordinates.

    Coordinates are spread across every tensor (at least one each). Pairs
    whose combined magnitude is below ``abs_floor`` are compared absolutely.
    """
    names = list(params)
    loss = closure()
    analytic = backward(loss, params)

    rng = np.random.default_rng(seed)
    picks: list[tuple[str, int]] = [(n, int(rng.integers(params[n].numel()))) for n in names]
    sizes = np.array([params[n].numel() for n in names], dtype=np.float64)
    while len(picks) < n_coords:
        n = names[int(rng.choice(len(names), p=sizes / sizes.sum()))]
        picks.append((n, int(rng.integers(params[n].numel()))))

    worst, worst_err = None, 0.0
    with torch.no_grad():
        for name, flat in picks:
            p = params[name].view(-1)
            orig = p[flat].item()
            p[flat] = orig + h
            f_plus = closure().item()
            p[flat] = orig - h
            f_minus = closure().item()
            p[flat] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            a = analytic[name].view(-1)[flat].item()
            scale = abs(a) + abs(numeric)
            err = abs(a - numeric) if scale < abs_floor else abs(a - numeric) / scale
            if not math.isfinite(err):
                err = math.inf
            if err > worst_err or worst is None:
                worst, worst_err = (name, flat), err
    return GradCheckReport(worst_err, len(picks), worst, tolerance)
