"""Optimizers and the per-task learning-rate schedule."""

from __future__ import annotations

import math

import torch
from torch.optim import SGD, Optimizer


class LARS(Optimizer):
    """Layer-wise adaptive rate scaling with momentum.

    One-dimensional parameters (biases, norm scales) are excluded from both
    weight decay and the trust-ratio scaling, following the convention of the
    large-batch SSL recipes this mirrors.
    """

    def __init__(self, params, lr, weight_decay=0.0, momentum=0.9, eta=0.001):
        if lr <= 0:
            raise ValueError("lr must be > 0")
        defaults = dict(lr=lr, weight_decay=weight_decay, momentum=momentum, eta=eta)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                dp = p.grad
                if p.ndim != 1:
                    dp = dp.add(p, alpha=group["weight_decay"])
                    param_norm = torch.norm(p)
                    update_norm = torch.norm(dp)
                    one = torch.ones_like(param_norm)
                    trust = torch.where(
                        param_norm > 0.0,
                        torch.where(update_norm > 0.0,
                                    group["eta"] * param_norm / update_norm, one),
                        one)
                    dp = dp.mul(trust)
                state = self.state[p]
                if "mu" not in state:
                    state["mu"] = torch.zeros_like(p)
                mu = state["mu"]
                mu.mul_(group["momentum"]).add_(dp)
                p.add_(mu, alpha=-group["lr"])
        return loss


def build_optimizer(params, kind: str, lr: float, weight_decay: float,
                    momentum: float = 0.9) -> Optimizer:
    if kind == "sgd":
        return SGD(params, lr=lr, weight_decay=weight_decay, momentum=momentum)
    if kind == "lars":
        return LARS(params, lr=lr, weight_decay=weight_decay, momentum=momentum)
    raise ValueError(f"unknown optimizer kind {kind!r}")


def warmup_cosine_lr(step: int, total_steps: int, base_lr: float,
                     warmup_steps: int = 0, min_lr: float = 0.0) -> float:
    """Linear warmup then cosine decay to min_lr; restarted per task."""
    if total_steps <= 0:
        return base_lr
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    frac = min(max((step - warmup_steps) / span, 0.0), 1.0)
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * frac))


def set_lr(optimizer: Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr
