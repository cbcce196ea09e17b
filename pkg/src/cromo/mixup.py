"""Convex image mixing between a current batch and a partner batch.

A mix batch pairs every current sample i with a partner sample j drawn
uniformly with replacement, draws one Beta(alpha, alpha) coefficient per
pair, and blends both augmented views with the same coefficient and the same
pairing so the two mixed views stay a coherent positive pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class MixBatch:
    """Two mixed views plus the coefficients and pairing that produced them."""

    view1: torch.Tensor           # [B, C, H, W]
    view2: torch.Tensor
    lam: torch.Tensor             # [B] in [0, 1]
    pairing: torch.Tensor         # [B] indices into the partner batch
    source_views: tuple[torch.Tensor, torch.Tensor]
    partner_views: tuple[torch.Tensor, torch.Tensor]


def sample_lambda(alpha: float, n: int, rng: torch.Generator) -> torch.Tensor:
    """n i.i.d. Beta(alpha, alpha) draws via two gamma variates."""
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    if n < 1:
        raise ValueError("n must be >= 1")
    conc = torch.full((2, n), float(alpha), dtype=torch.float64)
    # torch lacks a generator-seeded Beta sampler; Gamma(a,1)/(Gamma(a,1)+Gamma(a,1))
    # is Beta(a, a). _standard_gamma honors the passed generator.
    g = torch._standard_gamma(conc, generator=rng)
    lam = g[0] / (g[0] + g[1])
    return lam.clamp(0.0, 1.0)


def mix(x_current: torch.Tensor, x_partner: torch.Tensor,
        lam: torch.Tensor) -> torch.Tensor:
    """Elementwise convex combination lam * x_current + (1 - lam) * x_partner."""
    if x_current.shape != x_partner.shape:
        raise ValueError(f"shape mismatch: {tuple(x_current.shape)} vs "
                         f"{tuple(x_partner.shape)}")
    if lam.ndim != 1 or lam.shape[0] != x_current.shape[0]:
        raise ValueError("lam must be a [B] vector matching the batch")
    if ((lam < 0) | (lam > 1)).any():
        raise ValueError("lam outside [0, 1]")
    shape = (-1,) + (1,) * (x_current.ndim - 1)
    lam_b = lam.reshape(shape).to(x_current.dtype)
    return lam_b * x_current + (1.0 - lam_b) * x_partner


def build_mix_batch(current_views: tuple[torch.Tensor, torch.Tensor],
                    partner_views: tuple[torch.Tensor, torch.Tensor],
                    alpha: float, rng: torch.Generator) -> MixBatch:
    """Mix both views of the current batch with sampled partner entries.

    One coefficient per (i, j) pair, reused across views; the pairing indexes
    the partner batch uniformly with replacement.
    """
    x1, x2 = current_views
    p1, p2 = partner_views
    if x1.shape[0] == 0:
        raise ValueError("current batch is empty")
    if p1.shape[0] == 0:
        raise ValueError("partner batch is empty; mixing needs a populated "
                         "memory buffer (first task has none)")
    if x1.shape != x2.shape or p1.shape != p2.shape:
        raise ValueError("the two views of a batch must share a shape")

    b = x1.shape[0]
    lam = sample_lambda(alpha, b, rng).to(x1.dtype)
    pairing = torch.randint(0, p1.shape[0], (b,), generator=rng)
    return MixBatch(
        view1=mix(x1, p1[pairing], lam),
        view2=mix(x2, p2[pairing], lam),
        lam=lam,
        pairing=pairing,
        source_views=(x1, x2),
        partner_views=(p1, p2),
    )
