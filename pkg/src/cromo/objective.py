"""Composite continual-learning objectives built from the SSL losses.

The full objective for one training step is

    total = task + zeta * distill + mixup_term(view 1) + mixup_term(view 2)

where the task term is the plain two-view SSL loss on the current batch, the
distillation term matches current embeddings (through a learned predictor)
against frozen old-model embeddings of the same views, and each mixup term is
a convex combination of two SSL losses tying a mixed sample's embedding to
the current-task sample (weight lam) and to the partner sample's old-model
embedding (weight 1 - lam).

Strategy variants turn these terms on or off:

    finetune     task only
    er           task loss over current + replayed buffer views (one batch)
    cassle       task + zeta * distill
    cassle_plus  er task loss + zeta * distill
    cromo_star   task + both mixup terms (zeta = 0)
    cromo        all terms
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .losses import (CorInfoMaxState, SslLossSpec, barlow_twins, byol_mse_per_pair,
                     corinfomax, info_nce_per_pair, ssl_loss)

STRATEGIES = ("finetune", "er", "cassle", "cassle_plus", "cromo_star", "cromo")

# streams that keep their own corinfomax covariance state
CORINFOMAX_STREAMS = ("task", "distill_v1", "distill_v2",
                      "mix_v1_current", "mix_v1_old",
                      "mix_v2_current", "mix_v2_old")


class StrategyError(ValueError):
    """A strategy was asked to run without the inputs it needs."""


@dataclass
class LossBundle:
    """Per-step loss terms; terms a strategy does not use are exactly zero."""

    task_loss: torch.Tensor
    distill_loss: torch.Tensor
    cromo_loss_v1: torch.Tensor
    cromo_loss_v2: torch.Tensor
    total: torch.Tensor
    zeta: float
    lam: torch.Tensor | None
    strategy: str

    def to_record(self) -> dict:
        rec = {
            "strategy": self.strategy,
            "task_loss": float(self.task_loss.detach()),
            "distill_loss": float(self.distill_loss.detach()),
            "cromo_loss_v1": float(self.cromo_loss_v1.detach()),
            "cromo_loss_v2": float(self.cromo_loss_v2.detach()),
            "total": float(self.total.detach()),
            "zeta": self.zeta,
        }
        rec["lambda_mean"] = float(self.lam.mean()) if self.lam is not None else None
        return rec


def cromo_loss(spec: SslLossSpec, z_mix: torch.Tensor, z_t: torch.Tensor,
               z_old: torch.Tensor, lam: torch.Tensor, *,
               states: tuple[CorInfoMaxState, CorInfoMaxState] | None = None,
               ) -> tuple[torch.Tensor, tuple | None]:
    """Mixed-sample objective: lam-weighted pull toward the current-task
    embedding plus (1 - lam)-weighted pull toward the old-model embedding.

    Pairwise losses weight per sample before averaging; batch-statistic
    losses weight two whole-batch values by the batch-mean coefficient. For
    InfoNCE each term's negative pool is the union of all three embedding
    groups. Returns (loss, updated corinfomax states or None).
    """
    if lam.ndim != 1 or lam.shape[0] != z_mix.shape[0]:
        raise ValueError("lam must be one coefficient per mixed sample")
    if ((lam < 0) | (lam > 1)).any():
        raise ValueError("lam outside [0, 1]")

    if spec.kind == "simclr":
        l_cur = info_nce_per_pair(z_mix, z_t, spec.temperature,
                                  extra_negatives=z_old)
        l_old = info_nce_per_pair(z_mix, z_old, spec.temperature,
                                  extra_negatives=z_t)
        return (lam * l_cur + (1.0 - lam) * l_old).mean(), None

    if spec.kind == "byol":
        l_cur = byol_mse_per_pair(z_mix, z_t)
        l_old = byol_mse_per_pair(z_mix, z_old)
        return (lam * l_cur + (1.0 - lam) * l_old).mean(), None

    lam_bar = lam.mean()
    if spec.kind == "barlow_twins":
        l_cur = barlow_twins(z_mix, z_t, spec.lambda_bt, spec.bt_eps)
        l_old = barlow_twins(z_mix, z_old, spec.lambda_bt, spec.bt_eps)
        return lam_bar * l_cur + (1.0 - lam_bar) * l_old, None

    if spec.kind == "corinfomax":
        if states is None:
            raise ValueError("corinfomax mixup term needs two covariance states")
        st_cur, st_old = states
        l_cur, st_cur = corinfomax(z_mix, z_t, spec, st_cur)
        l_old, st_old = corinfomax(z_mix, z_old, spec, st_old)
        return lam_bar * l_cur + (1.0 - lam_bar) * l_old, (st_cur, st_old)

    raise ValueError(f"unknown ssl loss kind {spec.kind!r}")


def distill_loss(spec: SslLossSpec, z_old_v1: torch.Tensor, z_v1: torch.Tensor,
                 z_old_v2: torch.Tensor, z_v2: torch.Tensor, predictor, *,
                 states: tuple[CorInfoMaxState, CorInfoMaxState] | None = None,
                 ) -> tuple[torch.Tensor, tuple | None]:
    """Match predicted current embeddings to frozen old-model embeddings.

    loss = L_SSL(old_v1, predictor(v1)) + L_SSL(old_v2, predictor(v2)); the
    old-model terms are detached so no gradient reaches their producer.
    """
    if predictor is None:
        raise StrategyError("distillation requires the distill predictor head")
    z_old_v1 = z_old_v1.detach()
    z_old_v2 = z_old_v2.detach()
    p1, p2 = predictor(z_v1), predictor(z_v2)

    if spec.kind == "corinfomax":
        if states is None:
            raise ValueError("corinfomax distillation needs two covariance states")
        s1, s2 = states
        l1, s1 = corinfomax(z_old_v1, p1, spec, s1)
        l2, s2 = corinfomax(z_old_v2, p2, spec, s2)
        return l1 + l2, (s1, s2)

    if spec.kind == "byol":
        l1 = byol_mse_per_pair(p1, z_old_v1).mean()
        l2 = byol_mse_per_pair(p2, z_old_v2).mean()
        return l1 + l2, None

    l1, _ = ssl_loss(spec, z_old_v1, p1)
    l2, _ = ssl_loss(spec, z_old_v2, p2)
    return l1 + l2, None


@dataclass
class StepEmbeddings:
    """Everything total_loss may need for one step; unused fields stay None.

    z1/z2            current-model embeddings of the two task views (already
                     enlarged with replayed rows for er/cassle_plus; for byol
                     z2 is the EMA-target embedding of view 2)
    z1_raw/z2_raw    overrides for the distillation/mixup partner side when it
                     must differ from z1/z2; byol sets z2_raw to the online
                     projector output of view 2 (z2 itself being the target)
    old_z1/old_z2    frozen old-model embeddings of the task views
    mix_z1/mix_z2    current-model embeddings of the two mixed views (byol:
                     already passed through the predictor)
    partner_old_z1/2 embeddings of the mix partners, from the frozen model
                     (or the current model in the same-model ablation)
    """

    z1: torch.Tensor
    z2: torch.Tensor
    z1_raw: torch.Tensor | None = None
    z2_raw: torch.Tensor | None = None
    old_z1: torch.Tensor | None = None
    old_z2: torch.Tensor | None = None
    mix_z1: torch.Tensor | None = None
    mix_z2: torch.Tensor | None = None
    partner_old_z1: torch.Tensor | None = None
    partner_old_z2: torch.Tensor | None = None


def strategy_uses_mixup(strategy: str) -> bool:
    return strategy in ("cromo_star", "cromo")


def strategy_distills(strategy: str, zeta: float) -> bool:
    return strategy in ("cassle", "cassle_plus", "cromo") and zeta != 0.0


def total_loss(strategy: str, spec: SslLossSpec, emb: StepEmbeddings, *,
               lam: torch.Tensor | None = None, zeta: float = 1.0,
               distill_predictor=None, byol_predictor=None,
               states: dict[str, CorInfoMaxState] | None = None,
               first_task: bool = False,
               ) -> tuple[LossBundle, dict[str, CorInfoMaxState]]:
    """Assemble the per-step objective for a strategy.

    On the first task every strategy degenerates to the plain task loss.
    ``states`` maps stream names to corinfomax covariance states and is
    returned updated (unchanged for stateless kinds).
    """
    if strategy not in STRATEGIES:
        raise StrategyError(f"unknown strategy {strategy!r}")
    states = dict(states or {})
    zero = torch.zeros((), dtype=emb.z1.dtype, device=emb.z1.device)

    task, st = ssl_loss(spec, emb.z1, emb.z2, predictor=byol_predictor,
                        state=states.get("task"))
    if st is not None:
        states["task"] = st

    distill = zero
    if not first_task and strategy_distills(strategy, zeta):
        if emb.old_z1 is None or emb.old_z2 is None:
            raise StrategyError(f"strategy {strategy!r} needs old-model "
                                "embeddings after the first task")
        z_v1 = emb.z1_raw if emb.z1_raw is not None else emb.z1
        z_v2 = emb.z2_raw if emb.z2_raw is not None else emb.z2
        pair = (states.get("distill_v1"), states.get("distill_v2")) \
            if spec.kind == "corinfomax" else None
        distill, new_pair = distill_loss(spec, emb.old_z1, z_v1, emb.old_z2,
                                         z_v2, distill_predictor, states=pair)
        if new_pair is not None:
            states["distill_v1"], states["distill_v2"] = new_pair

    mix_v1 = zero
    mix_v2 = zero
    if not first_task and strategy_uses_mixup(strategy):
        needed = (emb.mix_z1, emb.mix_z2, emb.partner_old_z1, emb.partner_old_z2)
        if lam is None or any(v is None for v in needed):
            raise StrategyError(f"strategy {strategy!r} needs mixed-batch "
                                "embeddings after the first task")
        z_v1 = emb.z1_raw if emb.z1_raw is not None else emb.z1
        z_v2 = emb.z2_raw if emb.z2_raw is not None else emb.z2
        pair1 = (states.get("mix_v1_current"), states.get("mix_v1_old")) \
            if spec.kind == "corinfomax" else None
        mix_v1, new1 = cromo_loss(spec, emb.mix_z1, z_v1, emb.partner_old_z1,
                                  lam, states=pair1)
        if new1 is not None:
            states["mix_v1_current"], states["mix_v1_old"] = new1
        pair2 = (states.get("mix_v2_current"), states.get("mix_v2_old")) \
            if spec.kind == "corinfomax" else None
        mix_v2, new2 = cromo_loss(spec, emb.mix_z2, z_v2, emb.partner_old_z2,
                                  lam, states=pair2)
        if new2 is not None:
            states["mix_v2_current"], states["mix_v2_old"] = new2

    total = task + zeta * distill + mix_v1 + mix_v2
    bundle = LossBundle(task_loss=task, distill_loss=distill,
                        cromo_loss_v1=mix_v1, cromo_loss_v2=mix_v2,
                        total=total, zeta=zeta,
                        lam=lam if strategy_uses_mixup(strategy) and not first_task else None,
                        strategy=strategy)
    return bundle, states


def ssl_task_loss(spec: SslLossSpec, z1: torch.Tensor, z2: torch.Tensor, *,
                  byol_predictor=None, state: CorInfoMaxState | None = None):
    """Plain two-view task loss; the single code path shared by the continual
    trainer and the schedule-confusion harness."""
    return ssl_loss(spec, z1, z2, predictor=byol_predictor, state=state)
