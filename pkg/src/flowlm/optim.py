"""Gradient checks, clipping and the Adam update used by both training phases."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from flowlm.errors import NonFiniteGradient

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8
MAX_GRAD_NORM = 1.0


@dataclass
class AdamState:
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


def backward(loss: torch.Tensor, model: nn.Module, max_norm: float | None = MAX_GRAD_NORM) -> float:
    """Populate ``.grad`` on every parameter, validate, clip; returns the pre-clip norm."""
    model.zero_grad(set_to_none=False)
    loss.backward()
    for name, p in model.named_parameters():
        if p.grad is None:
            p.grad = torch.zeros_like(p)
        elif not torch.isfinite(p.grad).all():
            raise NonFiniteGradient(name)
    grads = [p.grad for p in model.parameters()]
    norm = torch.sqrt(sum((g.double() ** 2).sum() for g in grads))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (float(norm) + 1e-6)
        for g in grads:
            g.mul_(scale)
    return float(norm)


@torch.no_grad()
def parameter_update(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (BETA1, BETA2),
    eps: float = EPS,
) -> AdamState:
    """One bias-corrected Adam step, applied to ``params`` in place."""
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = torch.zeros_like(p)
            state.exp_avg_sq[name] = torch.zeros_like(p)
        v = state.exp_avg_sq[name]
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


def adam_step(model: nn.Module, state: AdamState, lr: float) -> AdamState:
    params = dict(model.named_parameters())
    return parameter_update(params, {k: p.grad for k, p in params.items()}, state, lr)
