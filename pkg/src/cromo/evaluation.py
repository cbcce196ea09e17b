"""Frozen-encoder evaluation: linear probe, accuracy decomposition, KNN.

The headline metric splits classification accuracy into task-id prediction
and within-task prediction:

    la = class-correct / total        (full class accuracy)
    tp = task-correct / total         (predicted class lies in the right task)
    wp = class-correct / task-correct (accuracy given the right task)

so la == wp * tp exactly whenever any prediction lands in the right task.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .data import AugmentationPolicy, LabeledDataset, TaskSequence, eval_view
from .optim import warmup_cosine_lr


@dataclass
class TaskClassMap:
    """Total, disjoint assignment of class ids to task ids."""

    task_of_class: dict[int, int]
    class_sets: dict[int, frozenset[int]]

    @staticmethod
    def from_sequence(seq: TaskSequence) -> "TaskClassMap":
        mapping = seq.task_of_class()
        sets = {t.task_id: t.class_set for t in seq.tasks}
        return TaskClassMap(mapping, sets)

    def __post_init__(self) -> None:
        seen: set[int] = set()
        for tid, cs in self.class_sets.items():
            if seen & cs:
                raise ValueError("class sets overlap across tasks")
            seen |= cs
        if seen != set(self.task_of_class):
            raise ValueError("class map and class sets disagree")

    def task_array(self, n_classes: int) -> np.ndarray:
        arr = np.full(n_classes, -1, dtype=np.int64)
        for c, t in self.task_of_class.items():
            arr[c] = t
        if (arr < 0).any():
            raise ValueError("class map does not cover all classes")
        return arr


@dataclass
class MetricsReport:
    n_total: int
    n_class_correct: int
    n_task_correct: int
    la: float
    tp: float
    wp: float
    wp_defined: bool
    per_task_accuracy: dict[int, float]
    confusion: np.ndarray
    knn_accuracy: float | None = None

    def to_dict(self) -> dict:
        return {
            "n_total": self.n_total,
            "n_class_correct": self.n_class_correct,
            "n_task_correct": self.n_task_correct,
            "la": self.la, "tp": self.tp, "wp": self.wp,
            "wp_defined": self.wp_defined,
            "per_task_accuracy": {str(k): v for k, v in
                                  sorted(self.per_task_accuracy.items())},
            "knn_accuracy": self.knn_accuracy,
        }

    def save_confusion_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["true\\pred"] + list(range(self.confusion.shape[1])))
            for c, row in enumerate(self.confusion):
                writer.writerow([c] + row.tolist())

    def format_table(self) -> str:
        lines = [f"{'metric':<12}{'value':>10}",
                 f"{'LA':<12}{self.la:>10.4f}",
                 f"{'WP':<12}{self.wp:>10.4f}" + ("" if self.wp_defined else "  (undefined)"),
                 f"{'TP':<12}{self.tp:>10.4f}"]
        if self.knn_accuracy is not None:
            lines.append(f"{'KNN':<12}{self.knn_accuracy:>10.4f}")
        for t, acc in sorted(self.per_task_accuracy.items()):
            lines.append(f"{f'task {t} acc':<12}{acc:>10.4f}")
        return "\n".join(lines)


def classification_report(y_true: np.ndarray, y_pred: np.ndarray,
                          class_map: TaskClassMap,
                          n_classes: int | None = None) -> MetricsReport:
    """Accuracy decomposition from raw predictions; the core of every eval."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError("prediction/label shape mismatch")
    if n_classes is None:
        n_classes = max(class_map.task_of_class) + 1
    tasks = class_map.task_array(n_classes)
    unmapped = np.setdiff1d(np.unique(y_true), np.fromiter(class_map.task_of_class, dtype=np.int64))
    if unmapped.size:
        raise ValueError(f"labels {unmapped.tolist()} missing from the task map")

    n_total = len(y_true)
    task_correct = tasks[y_true] == tasks[y_pred]
    class_correct = y_true == y_pred
    n_task = int(task_correct.sum())
    n_class = int(class_correct.sum())

    wp_defined = n_task > 0
    report = MetricsReport(
        n_total=n_total,
        n_class_correct=n_class,
        n_task_correct=n_task,
        la=n_class / n_total,
        tp=n_task / n_total,
        wp=(n_class / n_task) if wp_defined else 0.0,
        wp_defined=wp_defined,
        per_task_accuracy={
            int(t): float(class_correct[tasks[y_true] == t].mean())
            for t in np.unique(tasks[y_true])},
        confusion=_confusion_matrix(y_true, y_pred, n_classes),
    )
    return report


def _confusion_matrix(y_true, y_pred, n_classes) -> np.ndarray:
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (y_true, y_pred), 1)
    return m


# ---------------------------------------------------------------------------
# feature extraction and the linear probe

def extract_features(encoder: nn.Module, ds: LabeledDataset,
                     policy: AugmentationPolicy, batch_size: int = 512,
                     ) -> torch.Tensor:
    """Encoder features under the deterministic eval view; no grad, eval mode.

    Accepts a bare encoder module (returning a feature tensor) or a network
    returning (features, embeddings).
    """
    was_training = getattr(encoder, "training", False)
    encoder.eval()
    feats = []
    with torch.no_grad():
        for start in range(0, len(ds), batch_size):
            x = eval_view(ds.images[start:start + batch_size], policy)
            out = encoder(x)
            h = out[0] if isinstance(out, tuple) else out
            if not torch.isfinite(h).all():
                raise FloatingPointError("non-finite features during evaluation")
            feats.append(h)
    if was_training:
        encoder.train()
    return torch.cat(feats)


@dataclass
class ProbeConfig:
    epochs: int = 100
    lr: float = 0.2
    momentum: float = 0.9
    batch_size: int = 256
    seed: int = 0


class LinearProbe(nn.Module):
    def __init__(self, in_dim: int, n_classes: int):
        super().__init__()
        self.linear = nn.Linear(in_dim, n_classes)

    def forward(self, x):
        return self.linear(x)


def fit_probe_on_features(features: torch.Tensor, labels: np.ndarray,
                          n_classes: int, cfg: ProbeConfig) -> LinearProbe:
    """SGD + cosine decay on precomputed features."""
    gen = torch.Generator().manual_seed(cfg.seed)
    probe = LinearProbe(features.shape[1], n_classes)
    with torch.no_grad():
        for p in probe.parameters():
            if p.ndim > 1:
                nn.init.normal_(p, std=0.01, generator=gen)
            else:
                p.zero_()
    opt = torch.optim.SGD(probe.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    y = torch.from_numpy(np.ascontiguousarray(labels))
    n = len(y)
    steps_per_epoch = max(1, n // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    step = 0
    loss_fn = nn.CrossEntropyLoss()
    for _ in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        for s in range(steps_per_epoch):
            idx = perm[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            for g in opt.param_groups:
                g["lr"] = warmup_cosine_lr(step, total, cfg.lr)
            opt.zero_grad()
            loss = loss_fn(probe(features[idx]), y[idx])
            loss.backward()
            opt.step()
            step += 1
    probe.eval()
    return probe


def fit_linear_probe(encoder: nn.Module, train: LabeledDataset,
                     policy: AugmentationPolicy, n_classes: int,
                     cfg: ProbeConfig | None = None) -> LinearProbe:
    """Freeze the encoder, train a single linear layer on its features."""
    cfg = cfg or ProbeConfig()
    features = extract_features(encoder, train, policy)
    return fit_probe_on_features(features, train.labels, n_classes, cfg)


def probe_predictions(probe: LinearProbe, encoder: nn.Module,
                      ds: LabeledDataset, policy: AugmentationPolicy) -> np.ndarray:
    features = extract_features(encoder, ds, policy)
    with torch.no_grad():
        return probe(features).argmax(dim=1).numpy()


def compute_la_wp_tp(probe: LinearProbe, encoder: nn.Module,
                     test: LabeledDataset, policy: AugmentationPolicy,
                     class_map: TaskClassMap) -> MetricsReport:
    """Full-test accuracy decomposition of a fitted probe."""
    preds = probe_predictions(probe, encoder, test, policy)
    return classification_report(test.labels, preds, class_map,
                                 n_classes=test.class_count)


# ---------------------------------------------------------------------------
# KNN evaluation

def knn_predict(bank: torch.Tensor, bank_labels: np.ndarray,
                queries: torch.Tensor, k: int, n_classes: int) -> np.ndarray:
    """Cosine-similarity KNN with similarity-weighted votes."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > bank.shape[0]:
        raise ValueError(f"k={k} exceeds the feature bank size {bank.shape[0]}")
    bank_n = torch.nn.functional.normalize(bank, dim=1)
    out = np.empty(queries.shape[0], dtype=np.int64)
    labels_t = torch.from_numpy(np.ascontiguousarray(bank_labels))
    for start in range(0, queries.shape[0], 512):
        q = torch.nn.functional.normalize(queries[start:start + 512], dim=1)
        sim = q @ bank_n.T
        topv, topi = sim.topk(k, dim=1)
        votes = torch.zeros(q.shape[0], n_classes)
        votes.scatter_add_(1, labels_t[topi], topv.clamp(min=0))
        out[start:start + q.shape[0]] = votes.argmax(dim=1).numpy()
    return out


def knn_eval(encoder: nn.Module, train: LabeledDataset, test: LabeledDataset,
             policy: AugmentationPolicy, k: int = 200) -> float:
    bank = extract_features(encoder, train, policy)
    queries = extract_features(encoder, test, policy)
    preds = knn_predict(bank, train.labels, queries, min(k, bank.shape[0]),
                        train.class_count)
    return float((preds == test.labels).mean())


def per_task_knn_matrix(encoders: list[nn.Module], seq_test: list[LabeledDataset],
                        train_banks: list[LabeledDataset],
                        policy: AugmentationPolicy, k: int = 200) -> np.ndarray:
    """matrix[i, j] = task-j accuracy of the checkpoint saved after task i.

    Entries with j > i (task not yet seen) are NaN. The feature bank for task
    j is that task's training split.
    """
    n = len(encoders)
    if len(seq_test) != n or len(train_banks) != n:
        raise ValueError("need one checkpoint, test split, and bank per task")
    m = np.full((n, n), np.nan)
    for i, enc in enumerate(encoders):
        for j in range(i + 1):
            m[i, j] = knn_eval(enc, train_banks[j], seq_test[j], policy, k)
    return m


def forgetting_per_task(matrix: np.ndarray) -> np.ndarray:
    """Column-wise peak-minus-final accuracy over a per-task matrix."""
    with np.errstate(invalid="ignore"):
        peak = np.nanmax(matrix, axis=0)
    return peak - matrix[-1, :]
