"""Schedule-level task-confusion study at desk scale.

Trains one learner (an SSL objective or a supervised control) under one of
three mini-batch schedules -- class-incremental round-robin, data-incremental
round-robin, or a single uniform pool -- and tracks TRAIN-set accuracy
decomposition (la/wp/tp) against a fixed class-to-task partition. Class
separation failures across tasks show up as a tp drop with wp intact.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn

from .data import (AugmentationPolicy, LabeledDataset, make_minibatch_schedule,
                   split_class_incremental, split_data_incremental, two_views)
from .evaluation import (ProbeConfig, TaskClassMap, classification_report,
                         extract_features, fit_probe_on_features)
from .losses import init_corinfomax_state
from .models import EmaTarget, ModelConfig, TriNet, ema_momentum, ema_update
from .objective import ssl_task_loss
from .optim import build_optimizer, set_lr, warmup_cosine_lr
from .trainer import TrainConfig

SCHEDULE_MODES = ("cil_minibatch", "dil_minibatch", "single_pool")
LEARNERS = ("simclr", "barlow_twins", "byol", "corinfomax", "supervised")


@dataclass
class ConfusionExperiment:
    dataset: LabeledDataset
    learner: str = "simclr"
    schedule_mode: str = "cil_minibatch"
    num_tasks: int = 2
    iterations: int = 400
    probe_cadence: int = 100
    batch_size: int = 64
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=lambda: ProbeConfig(epochs=40, lr=0.3,
                                                                   batch_size=128))

    def __post_init__(self) -> None:
        if self.schedule_mode not in SCHEDULE_MODES:
            raise ValueError(f"unknown schedule mode {self.schedule_mode!r}")
        if self.learner not in LEARNERS:
            raise ValueError(f"unknown learner {self.learner!r}")
        if self.dataset.class_count % self.num_tasks:
            raise ValueError("class count must divide evenly into tasks")


class _SupervisedLearner(nn.Module):
    def __init__(self, model_cfg: ModelConfig, n_classes: int):
        super().__init__()
        self.net = TriNet(model_cfg)
        self.head = nn.Linear(self.net.feature_dim, n_classes)
        self.loss_fn = nn.CrossEntropyLoss()

    @property
    def encoder(self):
        return self.net.encoder

    def loss(self, x1, x2, labels):
        # both views contribute, mirroring the two-view budget of the SSL runs
        logits = self.head(self.net.encoder(torch.cat([x1, x2])))
        return self.loss_fn(logits, torch.cat([labels, labels]))


def _probe_metrics(encoder, ds: LabeledDataset, policy: AugmentationPolicy,
                   class_map: TaskClassMap, probe_cfg: ProbeConfig):
    feats = extract_features(encoder, ds, policy)
    probe = fit_probe_on_features(feats, ds.labels, ds.class_count, probe_cfg)
    with torch.no_grad():
        preds = probe(feats).argmax(dim=1).numpy()
    return classification_report(ds.labels, preds, class_map,
                                 n_classes=ds.class_count)


def run_confusion_experiment(exp: ConfusionExperiment) -> list[dict]:
    """Train under the configured schedule, probing train-set la/wp/tp.

    Returns one record per probe point:
    {learner, mode, iteration, la, wp, tp}.
    """
    ds = exp.dataset
    cfg = exp.train
    torch.manual_seed(exp.seed)

    # the class partition used for metrics is shared by every schedule mode
    cil_seq = split_class_incremental(ds, exp.num_tasks, exp.seed)
    class_map = TaskClassMap.from_sequence(cil_seq)

    if exp.schedule_mode == "cil_minibatch":
        sched_seq = cil_seq
        sched = make_minibatch_schedule(sched_seq, exp.batch_size,
                                        exp.iterations, "round_robin", exp.seed)
    elif exp.schedule_mode == "dil_minibatch":
        sched_seq = split_data_incremental(ds, exp.num_tasks, exp.seed)
        sched = make_minibatch_schedule(sched_seq, exp.batch_size,
                                        exp.iterations, "round_robin", exp.seed)
    else:
        sched_seq = cil_seq
        sched = make_minibatch_schedule(sched_seq, exp.batch_size,
                                        exp.iterations, "single_pool", exp.seed)
    pooled = sched_seq.pooled()

    supervised = exp.learner == "supervised"
    if supervised:
        learner = _SupervisedLearner(cfg.model, ds.class_count)
        params = learner.parameters()
        encoder = learner.encoder
    else:
        spec = cfg.loss_spec()
        net = TriNet(cfg.model)
        ema = EmaTarget(net) if exp.learner == "byol" else None
        state = init_corinfomax_state(cfg.model.projector_dim, cfg.corinfomax_eps) \
            if exp.learner == "corinfomax" else None
        params = net.parameters()
        learner = net
        encoder = net.encoder

    opt = build_optimizer([p for p in params if p.requires_grad],
                          cfg.optimizer.kind, cfg.optimizer.lr,
                          cfg.optimizer.weight_decay, cfg.optimizer.momentum)
    gen = torch.Generator().manual_seed(exp.seed + 1)

    records: list[dict] = []

    def probe_now(iteration: int) -> None:
        learner.eval()
        rep = _probe_metrics(encoder, pooled, cfg.policy, class_map, exp.probe)
        learner.train()
        records.append({"learner": exp.learner, "mode": exp.schedule_mode,
                        "iteration": iteration, "la": rep.la, "wp": rep.wp,
                        "tp": rep.tp})

    learner.train()
    for k, (task_id, idx) in enumerate(sched.batches):
        src = pooled if task_id < 0 else sched_seq.tasks[task_id].dataset
        images = src.images[idx]
        labels = torch.from_numpy(src.labels[idx])
        set_lr(opt, warmup_cosine_lr(k, exp.iterations, cfg.optimizer.lr,
                                     warmup_steps=min(50, exp.iterations // 10)))
        opt.zero_grad()
        x1, x2 = two_views(images, cfg.policy, gen)
        if supervised:
            loss = learner.loss(x1, x2, labels)
        else:
            _, z1 = net(x1)
            if exp.learner == "byol":
                _, z2 = ema(x2)
            else:
                _, z2 = net(x2)
            loss, state = ssl_task_loss(spec, z1, z2,
                                        byol_predictor=net.predictor,
                                        state=state)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at iteration {k}")
        loss.backward()
        opt.step()
        if exp.learner == "byol":
            ema_update(ema, net, ema_momentum(cfg.ema_momentum, k, exp.iterations))
        if (k + 1) % exp.probe_cadence == 0 or k + 1 == exp.iterations:
            probe_now(k + 1)
    return records


def emit_curves(records: list[dict], out: str | Path) -> dict[str, Path]:
    """Write curves.csv plus one plot per metric; fails before writing
    anything when the record list is empty."""
    if not records:
        raise ValueError("no records to emit")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)

    series: dict[str, list[tuple[int, float]]] = {}
    for rec in records:
        for metric in ("la", "tp", "wp"):
            key = f"{rec['learner']}/{rec['mode']}/{metric}"
            series.setdefault(key, []).append((rec["iteration"], rec[metric]))

    csv_path = out / "curves.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["series", "iteration", "value"])
        for key in sorted(series):
            for it, v in series[key]:
                writer.writerow([key, it, v])

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = {"csv": csv_path}
    for metric in ("la", "tp", "wp"):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for key in sorted(series):
            if key.endswith("/" + metric):
                pts = series[key]
                ax.plot([p[0] for p in pts], [p[1] for p in pts],
                        marker="o", label=key.rsplit("/", 1)[0])
        ax.set_xlabel("iteration")
        ax.set_ylabel(metric)
        ax.set_ylim(0, 1.02)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out / f"{metric}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths[metric] = path
    return paths
