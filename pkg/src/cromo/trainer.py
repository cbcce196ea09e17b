"""The continual training loop: per-task epochs, snapshots, buffer updates.

One run walks a task sequence in order. Within a task every step draws a
current batch, augments two views, and (depending on the strategy) replays
buffer samples, builds a mixed batch, and forwards the frozen previous-task
model. Task boundaries snapshot the model, stock the memory buffer, and reset
the optimizer, schedule, and any covariance state.

All randomness is derived from (seed, task index, role), so a run is
reproducible end to end and resuming from a task boundary replays exactly
what an uninterrupted run would have done.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import buffer as buffer_mod
from . import mixup
from .data import AugmentationPolicy, LabeledDataset, TaskSequence, two_views
from .losses import SslLossSpec, init_corinfomax_state
from .models import (EmaTarget, FrozenModel, ModelConfig, TriNet, ema_momentum,
                     ema_update, load_checkpoint, save_checkpoint, snapshot)
from .objective import (CORINFOMAX_STREAMS, STRATEGIES, StepEmbeddings,
                        StrategyError, strategy_uses_mixup, total_loss)
from .optim import build_optimizer, set_lr, warmup_cosine_lr

_ROLE_IDS = {"order": 0, "augment": 1, "mix": 2, "replay": 3, "buffer": 4, "init": 5}


@dataclass
class OptimizerConfig:
    kind: str = "sgd"
    lr: float = 0.1
    weight_decay: float = 1e-4
    momentum: float = 0.9


@dataclass
class TrainConfig:
    strategy: str = "cromo"
    ssl_kind: str = "simclr"
    model: ModelConfig = field(default_factory=ModelConfig)
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy.cifar)
    epochs_per_task: int | list[int] = 1
    batch_size: int = 256
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    warmup_epochs: int = 10
    buffer_budget: int = 100
    replay_batch_size: int = 64
    alpha: float = 1.0
    zeta: float = 1.0
    seed: int = 0
    temperature: float = 0.5
    lambda_bt: float = 5e-3
    corinfomax_eps: float = 0.1
    lambda_cov: float = 0.01
    invariance_weight: float = 1.0
    ema_momentum: float = 0.99
    mix_source: str = "buffer"     # "buffer" (cross-task) | "current" (within-task)
    mix_embed: str = "frozen"      # "frozen" (cross-model) | "current" (same-model)
    config_hash: str = ""

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.optimizer.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if self.mix_source not in ("buffer", "current"):
            raise ValueError("mix_source must be 'buffer' or 'current'")
        if self.mix_embed not in ("frozen", "current"):
            raise ValueError("mix_embed must be 'frozen' or 'current'")

    def epochs_for(self, task_index: int) -> int:
        if isinstance(self.epochs_per_task, int):
            return self.epochs_per_task
        return self.epochs_per_task[task_index]

    def loss_spec(self) -> SslLossSpec:
        return SslLossSpec(kind=self.ssl_kind, temperature=self.temperature,
                           lambda_bt=self.lambda_bt, eps=self.corinfomax_eps,
                           lambda_cov=self.lambda_cov,
                           invariance_weight=self.invariance_weight)


@dataclass
class RunState:
    net: TriNet
    buffer: buffer_mod.MemoryBuffer
    frozen: FrozenModel | None = None
    ema: EmaTarget | None = None
    task_index: int = 0
    step: int = 0
    loss_states: dict = field(default_factory=dict)

    def check(self) -> None:
        if (self.frozen is None) != (self.task_index == 0):
            raise StrategyError("frozen model must exist exactly from task 2 on")


def task_seed(seed: int, task_index: int, role: str) -> int:
    ss = np.random.SeedSequence([seed, task_index, _ROLE_IDS[role]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] % (2**63 - 1))


def init_run_state(cfg: TrainConfig) -> RunState:
    torch.manual_seed(task_seed(cfg.seed, 0, "init"))
    net = TriNet(cfg.model)
    ema = EmaTarget(net) if cfg.ssl_kind == "byol" else None
    buf = buffer_mod.MemoryBuffer(samples_per_task=cfg.buffer_budget)
    return RunState(net=net, buffer=buf, ema=ema)


def _reset_loss_states(state: RunState, cfg: TrainConfig) -> None:
    state.loss_states = {}
    if cfg.ssl_kind == "corinfomax":
        d = cfg.model.projector_dim
        for stream in CORINFOMAX_STREAMS:
            state.loss_states[stream] = init_corinfomax_state(d, cfg.corinfomax_eps)


def _split(z: torch.Tensor, sizes: list[int]) -> list[torch.Tensor]:
    return list(torch.split(z, sizes, dim=0))


def _training_step(state: RunState, cfg: TrainConfig, spec: SslLossSpec,
                   batch_images: np.ndarray, gens: dict):
    """One optimizer-step worth of forwards and the assembled loss bundle."""
    net = state.net
    first_task = state.task_index == 0
    strategy = cfg.strategy
    x1, x2 = two_views(batch_images, cfg.policy, gens["augment"])

    replaying = (not first_task and strategy in ("er", "cassle_plus")
                 and not state.buffer.is_empty)
    mixing = not first_task and strategy_uses_mixup(strategy)

    mix_batch = None
    partner_x1 = partner_x2 = None
    if mixing:
        if cfg.mix_source == "buffer":
            if state.buffer.is_empty:
                raise StrategyError("mixup strategies need a populated buffer "
                                    "after the first task")
            raw, _, _ = buffer_mod.sample_batch(state.buffer,
                                                cfg.replay_batch_size,
                                                gens["replay"])
            partner_x1, partner_x2 = two_views(raw, cfg.policy, gens["augment"])
        else:                      # within-task ablation: partner = own batch
            partner_x1, partner_x2 = x1, x2
        mix_batch = mixup.build_mix_batch((x1, x2), (partner_x1, partner_x2),
                                          cfg.alpha, gens["mix"])

    replay_x1 = replay_x2 = None
    if replaying:
        raw, _, _ = buffer_mod.sample_batch(state.buffer, cfg.replay_batch_size,
                                            gens["replay"])
        replay_x1, replay_x2 = two_views(raw, cfg.policy, gens["augment"])

    # --- current-model forwards (concatenated so BN statistics are shared)
    groups1: list[torch.Tensor] = [x1]
    groups2: list[torch.Tensor] = [x2]
    if replaying:
        groups1.append(replay_x1)
        groups2.append(replay_x2)
    if mixing:
        groups1.append(mix_batch.view1)
        groups2.append(mix_batch.view2)
        if cfg.mix_embed == "current" and cfg.mix_source == "buffer":
            groups1.append(partner_x1)
            groups2.append(partner_x2)
    sizes1 = [g.shape[0] for g in groups1]
    _, zcat1 = net(torch.cat(groups1))
    _, zcat2 = net(torch.cat(groups2))
    if not torch.isfinite(zcat1).all() or not torch.isfinite(zcat2).all():
        raise FloatingPointError(f"non-finite embeddings at step {state.step} "
                                 f"of task {state.task_index}")
    parts1 = _split(zcat1, sizes1)
    parts2 = _split(zcat2, sizes1)

    z1_cur, z2_cur = parts1.pop(0), parts2.pop(0)
    if replaying:
        z1_rep, z2_rep = parts1.pop(0), parts2.pop(0)
        z1_task = torch.cat([z1_cur, z1_rep])
        z2_task = torch.cat([z2_cur, z2_rep])
    else:
        z1_task, z2_task = z1_cur, z2_cur
    mix_z1 = mix_z2 = None
    partner_z1_cur = partner_z2_cur = None
    if mixing:
        mix_z1, mix_z2 = parts1.pop(0), parts2.pop(0)
        if cfg.mix_embed == "current":
            if cfg.mix_source == "buffer":
                partner_z1_cur, partner_z2_cur = parts1.pop(0), parts2.pop(0)
            else:
                partner_z1_cur, partner_z2_cur = z1_cur, z2_cur

    # --- byol target / predictor routing
    z2_for_task = z2_task
    z2_raw = None
    if cfg.ssl_kind == "byol":
        views2_in = torch.cat([x2, replay_x2]) if replaying else x2
        _, z2_for_task = state.ema(views2_in)
        z2_raw = z2_task
        if mixing:
            mix_z1 = net.predictor(mix_z1)
            mix_z2 = net.predictor(mix_z2)

    # --- frozen-model forwards
    old_z1 = old_z2 = None
    partner_old_z1 = partner_old_z2 = None
    if not first_task:
        if cfg.strategy in ("cassle", "cassle_plus") or \
                (cfg.strategy == "cromo" and cfg.zeta != 0.0):
            fin1 = torch.cat([x1, replay_x1]) if replaying else x1
            fin2 = torch.cat([x2, replay_x2]) if replaying else x2
            _, old_z1 = state.frozen(fin1)
            _, old_z2 = state.frozen(fin2)
        if mixing:
            if cfg.mix_embed == "frozen":
                _, pz1 = state.frozen(partner_x1)
                _, pz2 = state.frozen(partner_x2)
            else:
                pz1, pz2 = partner_z1_cur, partner_z2_cur
            partner_old_z1 = pz1[mix_batch.pairing]
            partner_old_z2 = pz2[mix_batch.pairing]

    emb = StepEmbeddings(z1=z1_task, z2=z2_for_task, z2_raw=z2_raw,
                         old_z1=old_z1, old_z2=old_z2,
                         mix_z1=mix_z1, mix_z2=mix_z2,
                         partner_old_z1=partner_old_z1,
                         partner_old_z2=partner_old_z2)
    bundle, state.loss_states = total_loss(
        strategy, spec, emb,
        lam=mix_batch.lam if mixing else None,
        zeta=cfg.zeta,
        distill_predictor=net.distill_predictor,
        byol_predictor=net.predictor,
        states=state.loss_states,
        first_task=first_task)
    return bundle


def train_task(state: RunState, task: LabeledDataset, cfg: TrainConfig,
               log=None) -> RunState:
    """Run the configured number of epochs on one task's data."""
    state.check()
    spec = cfg.loss_spec()
    _reset_loss_states(state, cfg)
    t = state.task_index
    epochs = cfg.epochs_for(t)
    n = len(task)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch

    order_rng = np.random.default_rng(task_seed(cfg.seed, t, "order"))
    gens = {role: torch.Generator().manual_seed(task_seed(cfg.seed, t, role))
            for role in ("augment", "mix")}
    gens["replay"] = np.random.default_rng(task_seed(cfg.seed, t, "replay"))

    params = [p for p in state.net.parameters() if p.requires_grad]
    opt = build_optimizer(params, cfg.optimizer.kind, cfg.optimizer.lr,
                          cfg.optimizer.weight_decay, cfg.optimizer.momentum)

    state.net.train()
    step_in_task = 0
    for epoch in range(epochs):
        perm = order_rng.permutation(n)
        for s in range(steps_per_epoch):
            idx = perm[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            lr = warmup_cosine_lr(step_in_task, total_steps, cfg.optimizer.lr,
                                  warmup_steps)
            set_lr(opt, lr)
            opt.zero_grad()
            bundle = _training_step(state, cfg, spec, task.images[idx], gens)
            if not torch.isfinite(bundle.total):
                raise FloatingPointError(
                    f"non-finite loss at task {t} epoch {epoch} step {s}: "
                    f"{bundle.to_record()}")
            bundle.total.backward()
            opt.step()
            if state.ema is not None:
                m = ema_momentum(cfg.ema_momentum, step_in_task, total_steps)
                ema_update(state.ema, state.net, m)
            if log is not None:
                rec = {"step": state.step, "task": t, "epoch": epoch, "lr": lr}
                rec.update(bundle.to_record())
                log(rec)
            state.step += 1
            step_in_task += 1
    return state


def end_task(state: RunState, task: LabeledDataset, cfg: TrainConfig) -> RunState:
    """Task-boundary bookkeeping: snapshot, buffer update, state resets."""
    state.frozen = snapshot(state.net)
    if cfg.buffer_budget > 0:
        rng = np.random.default_rng(task_seed(cfg.seed, state.task_index, "buffer"))
        state.buffer = buffer_mod.update_after_task(
            state.buffer, task.images, task.labels, state.task_index, rng)
    _reset_loss_states(state, cfg)
    state.task_index += 1
    return state


class RunLog:
    """Line-delimited JSON writer for per-step records."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._fh = open(self.path, "a")

    def __call__(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        self._fh.flush()
        self._fh.close()


class ResumeMismatch(RuntimeError):
    pass


def _checkpoint_path(run_dir: Path, task_index: int) -> Path:
    return run_dir / "checkpoints" / f"task_{task_index}.ckpt"


def run_continual(cfg: TrainConfig, seq: TaskSequence, run_dir: str | Path,
                  resume: bool = False) -> RunState:
    """Train the full task sequence, persisting artifacts under run_dir.

    Artifacts: manifest.json (the split), metrics.log (one JSON record per
    step), checkpoints/task_k.ckpt at every boundary, buffer.snapshot.
    With resume=True, training picks up after the last completed task;
    the stored config hash must match.
    """
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    seq.save_manifest(run_dir / "manifest.json")

    start_task = 0
    state: RunState | None = None
    if resume:
        done = sorted(run_dir.glob("checkpoints/task_*.ckpt"))
        if done:
            last = max(int(p.stem.split("_")[1]) for p in done)
            net, ema, meta = load_checkpoint(_checkpoint_path(run_dir, last))
            if cfg.config_hash and meta.get("config_hash") \
                    and meta["config_hash"] != cfg.config_hash:
                raise ResumeMismatch(
                    f"checkpoint config hash {meta['config_hash']} does not "
                    f"match the requested config {cfg.config_hash}")
            buf = buffer_mod.load_buffer(run_dir / "buffer.snapshot")
            state = RunState(net=net, buffer=buf, frozen=snapshot(net),
                             ema=ema, task_index=last + 1,
                             step=int(meta.get("step", 0)))
            start_task = last + 1
            _trim_log(run_dir / "metrics.log", start_task)
    if state is None:
        state = init_run_state(cfg)
        (run_dir / "metrics.log").unlink(missing_ok=True)

    log = RunLog(run_dir / "metrics.log")
    try:
        for t in range(start_task, len(seq.tasks)):
            task_ds = seq.tasks[t].dataset
            train_task(state, task_ds, cfg, log=log)
            end_task(state, task_ds, cfg)
            save_checkpoint(_checkpoint_path(run_dir, t), state.net,
                            meta={"task_index": t, "step": state.step,
                                  "config_hash": cfg.config_hash,
                                  "ssl_kind": cfg.ssl_kind,
                                  "strategy": cfg.strategy},
                            ema=state.ema)
            buffer_mod.save_buffer(run_dir / "buffer.snapshot", state.buffer)
    finally:
        log.close()
    return state


def _trim_log(path: Path, keep_below_task: int) -> None:
    if not path.exists():
        return
    kept = [line for line in path.read_text().splitlines()
            if json.loads(line)["task"] < keep_below_task]
    path.write_text("".join(line + "\n" for line in kept))
