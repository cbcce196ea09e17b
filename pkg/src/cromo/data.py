"""Dataset ingestion, task splitting, iteration schedules, and augmentation.

Datasets are immutable arrays of uint8 images [N, H, W, C] with integer
labels. Task splits come in two flavors: class-incremental (disjoint class
sets per task) and data-incremental (disjoint sample shards, every class in
every task). All randomness is a function of explicit seeds so splits and
schedules can be rebuilt byte-identically from a manifest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

CIFAR10_STATS = ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616))
CIFAR100_STATS = ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762))


class DatasetError(RuntimeError):
    """Unknown dataset name or unreadable/corrupt source files."""


@dataclass
class LabeledDataset:
    images: np.ndarray      # [N, H, W, C] uint8
    labels: np.ndarray      # [N] int64 in [0, class_count)
    name: str
    class_count: int

    def __post_init__(self) -> None:
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"{self.name}: images must be [N, H, W, C]")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{self.name}: images/labels length mismatch")
        if len(self.labels) and (self.labels.min() < 0 or
                                 self.labels.max() >= self.class_count):
            raise DatasetError(f"{self.name}: labels outside [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: np.ndarray, name: str | None = None) -> "LabeledDataset":
        return LabeledDataset(self.images[indices], self.labels[indices],
                              name or self.name, self.class_count)


@dataclass
class Task:
    task_id: int
    dataset: LabeledDataset
    class_set: frozenset[int]
    source_indices: np.ndarray    # positions in the source dataset


@dataclass
class TaskSequence:
    tasks: list[Task]
    mode: str                     # "CIL" | "DIL"
    source_name: str
    class_count: int
    seed: int

    def __post_init__(self) -> None:
        if self.mode not in ("CIL", "DIL"):
            raise ValueError(f"bad task mode {self.mode!r}")
        if self.mode == "CIL":
            seen: set[int] = set()
            for t in self.tasks:
                if seen & t.class_set:
                    raise ValueError("CIL class sets must be pairwise disjoint")
                seen |= t.class_set
        else:
            full = frozenset(range(self.class_count))
            for t in self.tasks:
                if t.class_set != full:
                    raise ValueError("DIL tasks must cover every class")
            all_idx = np.concatenate([t.source_indices for t in self.tasks])
            if len(np.unique(all_idx)) != len(all_idx):
                raise ValueError("DIL sample shards must be disjoint")

    def __len__(self) -> int:
        return len(self.tasks)

    def task_of_class(self) -> dict[int, int]:
        if self.mode != "CIL":
            raise ValueError("class-to-task map only exists for CIL sequences")
        return {c: t.task_id for t in self.tasks for c in t.class_set}

    def pooled(self) -> LabeledDataset:
        """Concatenation of all tasks in task order."""
        images = np.concatenate([t.dataset.images for t in self.tasks])
        labels = np.concatenate([t.dataset.labels for t in self.tasks])
        return LabeledDataset(images, labels, f"{self.source_name}-pooled",
                              self.class_count)

    def to_manifest(self) -> dict:
        return {
            "mode": self.mode,
            "source": self.source_name,
            "class_count": self.class_count,
            "seed": self.seed,
            "tasks": [{
                "task_id": t.task_id,
                "classes": sorted(t.class_set),
                "source_indices": t.source_indices.tolist(),
            } for t in self.tasks],
        }

    def save_manifest(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_manifest(), sort_keys=True))


def rebuild_from_manifest(source: LabeledDataset, manifest: dict) -> TaskSequence:
    tasks = []
    for entry in manifest["tasks"]:
        idx = np.asarray(entry["source_indices"], dtype=np.int64)
        tasks.append(Task(
            task_id=int(entry["task_id"]),
            dataset=source.subset(idx, f"{source.name}-task{entry['task_id']}"),
            class_set=frozenset(entry["classes"]),
            source_indices=idx,
        ))
    return TaskSequence(tasks, manifest["mode"], manifest["source"],
                        int(manifest["class_count"]), int(manifest["seed"]))


# ---------------------------------------------------------------------------
# loading

@dataclass
class SyntheticConfig:
    """Inline spec for the gaussian-cluster fixture dataset.

    ``layout="ring"`` places class centers on a hypersphere of radius
    ``center_scale``; ``layout="confusable_pairs"`` builds classes in pairs
    around shared anchor directions, offset by ``pair_offset``, so classes i
    and i + classes/2 are near-neighbors in pixel space.
    """

    classes: int = 4
    per_class_train: int = 100
    per_class_test: int = 50
    channels: int = 2
    image_size: int = 8
    layout: str = "ring"
    center_scale: float = 55.0
    pair_offset: float = 20.0
    noise_std: float = 8.0
    seed: int = 0


def _synthetic_centers(cfg: SyntheticConfig) -> np.ndarray:
    dim = cfg.channels * cfg.image_size * cfg.image_size
    rng = np.random.default_rng(cfg.seed + 99173)
    if cfg.layout == "ring":
        dirs = rng.normal(size=(cfg.classes, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return dirs * cfg.center_scale
    if cfg.layout == "confusable_pairs":
        if cfg.classes % 2:
            raise DatasetError("confusable_pairs layout needs an even class count")
        half = cfg.classes // 2
        anchors = rng.normal(size=(half, dim))
        anchors /= np.linalg.norm(anchors, axis=1, keepdims=True)
        offset = rng.normal(size=(half, dim))
        offset /= np.linalg.norm(offset, axis=1, keepdims=True)
        centers = np.concatenate([
            anchors * cfg.center_scale + offset * cfg.pair_offset,
            anchors * cfg.center_scale - offset * cfg.pair_offset,
        ])
        return centers
    raise DatasetError(f"unknown synthetic layout {cfg.layout!r}")


def _synthetic_split(cfg: SyntheticConfig, per_class: int, seed: int,
                     split: str) -> LabeledDataset:
    centers = _synthetic_centers(cfg)
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for c in range(cfg.classes):
        x = centers[c] + rng.normal(scale=cfg.noise_std,
                                    size=(per_class, centers.shape[1]))
        images.append(x)
        labels.append(np.full(per_class, c, dtype=np.int64))
    raw = np.concatenate(images) + 128.0
    raw = np.clip(raw, 0, 255).astype(np.uint8)
    raw = raw.reshape(-1, cfg.channels, cfg.image_size, cfg.image_size)
    raw = np.transpose(raw, (0, 2, 3, 1))    # store as [N, H, W, C]
    return LabeledDataset(raw, np.concatenate(labels),
                          f"synthetic-gaussians-{split}", cfg.classes)


def _load_cifar(name: str, root) -> tuple[LabeledDataset, LabeledDataset]:
    import torchvision.datasets as tvd

    builder = tvd.CIFAR10 if name == "cifar10" else tvd.CIFAR100
    classes = 10 if name == "cifar10" else 100
    try:
        train = builder(root=str(root), train=True, download=False)
        test = builder(root=str(root), train=False, download=False)
    except (RuntimeError, FileNotFoundError) as exc:
        raise DatasetError(f"cannot load {name} from {root}: {exc}") from exc
    return (LabeledDataset(train.data, np.asarray(train.targets), f"{name}-train", classes),
            LabeledDataset(test.data, np.asarray(test.targets), f"{name}-test", classes))


def _load_tinyimagenet(root) -> tuple[LabeledDataset, LabeledDataset]:
    from PIL import Image

    base = Path(root) / "tiny-imagenet-200"
    if not base.is_dir():
        raise DatasetError(f"tinyimagenet layout not found under {root} "
                           "(expected tiny-imagenet-200/)")
    wnids = sorted((base / "train").iterdir())
    class_of = {d.name: i for i, d in enumerate(wnids)}

    def read_split(pairs, split):
        images, labels = [], []
        for path, cls in pairs:
            with Image.open(path) as im:
                images.append(np.asarray(im.convert("RGB"), dtype=np.uint8))
            labels.append(cls)
        return LabeledDataset(np.stack(images), np.asarray(labels),
                              f"tinyimagenet-{split}", len(wnids))

    train_pairs = []
    for d in wnids:
        for f in sorted((d / "images").iterdir()):
            train_pairs.append((f, class_of[d.name]))
    val_pairs = []
    ann = base / "val" / "val_annotations.txt"
    try:
        for line in ann.read_text().splitlines():
            fname, wnid = line.split("\t")[:2]
            val_pairs.append((base / "val" / "images" / fname, class_of[wnid]))
    except (OSError, KeyError, ValueError) as exc:
        raise DatasetError(f"corrupt tinyimagenet annotations: {exc}") from exc
    return read_split(train_pairs, "train"), read_split(val_pairs, "test")


DATASET_REGISTRY = ("cifar10", "cifar100", "tinyimagenet", "synthetic-gaussians")


def load_dataset(name: str, root=".", synthetic: SyntheticConfig | None = None,
                 ) -> tuple[LabeledDataset, LabeledDataset]:
    """Return (train, test) splits for a registered dataset name."""
    if name == "cifar10" or name == "cifar100":
        return _load_cifar(name, root)
    if name == "tinyimagenet":
        return _load_tinyimagenet(root)
    if name == "synthetic-gaussians":
        cfg = synthetic or SyntheticConfig()
        return (_synthetic_split(cfg, cfg.per_class_train, cfg.seed, "train"),
                _synthetic_split(cfg, cfg.per_class_test, cfg.seed + 1, "test"))
    raise DatasetError(f"unknown dataset {name!r}; registry: {DATASET_REGISTRY}")


# ---------------------------------------------------------------------------
# task splitting

def split_class_incremental(ds: LabeledDataset, num_tasks: int,
                            seed: int) -> TaskSequence:
    """Shuffle class ids by seed, chunk them contiguously into tasks."""
    if num_tasks < 1:
        raise ValueError("num_tasks must be >= 1")
    if ds.class_count % num_tasks:
        raise ValueError(f"{ds.class_count} classes not divisible into "
                         f"{num_tasks} tasks")
    per_task = ds.class_count // num_tasks
    order = np.random.default_rng(seed).permutation(ds.class_count)
    tasks = []
    for t in range(num_tasks):
        chunk = order[t * per_task:(t + 1) * per_task]
        mask = np.isin(ds.labels, chunk)
        idx = np.flatnonzero(mask)
        tasks.append(Task(task_id=t,
                          dataset=ds.subset(idx, f"{ds.name}-task{t}"),
                          class_set=frozenset(int(c) for c in chunk),
                          source_indices=idx))
    return TaskSequence(tasks, "CIL", ds.name, ds.class_count, seed)


def split_data_incremental(ds: LabeledDataset, num_tasks: int,
                           seed: int) -> TaskSequence:
    """Shard samples into tasks, stratified so every class appears in each."""
    if num_tasks < 1:
        raise ValueError("num_tasks must be >= 1")
    counts = np.bincount(ds.labels, minlength=ds.class_count)
    if num_tasks > counts.min():
        raise ValueError(f"num_tasks={num_tasks} exceeds the rarest class "
                         f"frequency {counts.min()}")
    rng = np.random.default_rng(seed)
    shards: list[list[np.ndarray]] = [[] for _ in range(num_tasks)]
    for c in range(ds.class_count):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        for t, part in enumerate(np.array_split(idx, num_tasks)):
            shards[t].append(part)
    tasks = []
    full = frozenset(range(ds.class_count))
    for t in range(num_tasks):
        idx = np.sort(np.concatenate(shards[t]))
        tasks.append(Task(task_id=t,
                          dataset=ds.subset(idx, f"{ds.name}-task{t}"),
                          class_set=full,
                          source_indices=idx))
    return TaskSequence(tasks, "DIL", ds.name, ds.class_count, seed)


# ---------------------------------------------------------------------------
# iteration schedules

@dataclass
class IterationSchedule:
    """Ordered batches; entries are (task_id, sample indices).

    Round-robin entries index the named task's dataset; pooled entries use
    task_id -1 and index the sequence's pooled dataset.
    """

    batches: list[tuple[int, np.ndarray]]
    batch_size: int
    mode: str

    def __len__(self) -> int:
        return len(self.batches)

    def to_dict(self) -> dict:
        return {"batch_size": self.batch_size, "mode": self.mode,
                "batches": [[t, idx.tolist()] for t, idx in self.batches]}


def make_minibatch_schedule(seq: TaskSequence, batch_size: int, iterations: int,
                            mode: str, seed: int) -> IterationSchedule:
    """Round-robin over tasks (one task per batch) or a single uniform pool."""
    if not seq.tasks:
        raise ValueError("empty task sequence")
    if mode not in ("round_robin", "single_pool"):
        raise ValueError(f"unknown schedule mode {mode!r}")
    rng = np.random.default_rng(seed)
    batches: list[tuple[int, np.ndarray]] = []
    if mode == "round_robin":
        smallest = min(len(t.dataset) for t in seq.tasks)
        if batch_size > smallest:
            raise ValueError(f"batch_size {batch_size} exceeds the smallest "
                             f"task size {smallest}")
        n_tasks = len(seq.tasks)
        for k in range(iterations):
            t = k % n_tasks
            idx = rng.choice(len(seq.tasks[t].dataset), size=batch_size,
                             replace=False)
            batches.append((t, np.sort(idx)))
    else:
        total = sum(len(t.dataset) for t in seq.tasks)
        if batch_size > total:
            raise ValueError("batch_size exceeds the pooled dataset size")
        for _ in range(iterations):
            idx = rng.choice(total, size=batch_size, replace=False)
            batches.append((-1, np.sort(idx)))
    return IterationSchedule(batches, batch_size, mode)


# ---------------------------------------------------------------------------
# augmentation

@dataclass
class AugOp:
    name: str
    prob: float = 1.0
    params: dict = field(default_factory=dict)


@dataclass
class AugmentationPolicy:
    """Two-view training ops plus deterministic eval ops and normalization."""

    train_ops: list[AugOp] = field(default_factory=list)
    eval_ops: list[AugOp] = field(default_factory=list)
    mean: tuple[float, ...] = (0.5,)
    std: tuple[float, ...] = (0.5,)

    @staticmethod
    def cifar(stats=CIFAR10_STATS) -> "AugmentationPolicy":
        return AugmentationPolicy(
            train_ops=[
                AugOp("crop", 1.0, {"padding": 4}),
                AugOp("hflip", 0.5),
                AugOp("color_jitter", 0.8, {"brightness": 0.4, "contrast": 0.4,
                                            "saturation": 0.2}),
                AugOp("grayscale", 0.2),
            ],
            eval_ops=[],
            mean=stats[0], std=stats[1],
        )

    @staticmethod
    def synthetic(noise_std: float = 0.06) -> "AugmentationPolicy":
        return AugmentationPolicy(
            train_ops=[
                AugOp("noise", 1.0, {"std": noise_std}),
                AugOp("color_jitter", 0.5, {"brightness": 0.1}),
            ],
            eval_ops=[],
            mean=(0.5,), std=(0.5,),
        )


def _to_float_chw(batch: np.ndarray | torch.Tensor) -> torch.Tensor:
    if isinstance(batch, np.ndarray):
        t = torch.from_numpy(np.ascontiguousarray(batch))
    else:
        t = batch
    if t.dtype == torch.uint8:
        t = t.float() / 255.0
        t = t.permute(0, 3, 1, 2).contiguous()       # HWC uint8 -> CHW float
    return t.float()


def _rand(shape, rng, device):
    return torch.rand(shape, generator=rng, device=device)


def _apply_op(x: torch.Tensor, op: AugOp, rng: torch.Generator) -> torch.Tensor:
    b, c, h, w = x.shape
    gate = (_rand((b,), rng, x.device) < op.prob).float().view(b, 1, 1, 1)
    p = op.params

    if op.name == "crop":
        pad = int(p.get("padding", 4))
        padded = torch.nn.functional.pad(x, (pad,) * 4, mode="reflect")
        ys = torch.randint(0, 2 * pad + 1, (b,), generator=rng)
        xs = torch.randint(0, 2 * pad + 1, (b,), generator=rng)
        rows = ys.view(b, 1) + torch.arange(h).view(1, h)
        cols = xs.view(b, 1) + torch.arange(w).view(1, w)
        out = padded[torch.arange(b).view(b, 1, 1),
                     :, rows.unsqueeze(2), cols.unsqueeze(1)]
        out = out.permute(0, 3, 1, 2).contiguous()
        return gate * out + (1 - gate) * x

    if op.name == "hflip":
        return gate * x.flip(-1) + (1 - gate) * x

    if op.name == "color_jitter":
        out = x
        if "brightness" in p:
            f = 1.0 + (2 * _rand((b, 1, 1, 1), rng, x.device) - 1) * p["brightness"]
            out = out * f
        if "contrast" in p:
            f = 1.0 + (2 * _rand((b, 1, 1, 1), rng, x.device) - 1) * p["contrast"]
            m = out.mean(dim=(1, 2, 3), keepdim=True)
            out = (out - m) * f + m
        if "saturation" in p and c > 1:
            f = 1.0 + (2 * _rand((b, 1, 1, 1), rng, x.device) - 1) * p["saturation"]
            g = out.mean(dim=1, keepdim=True)
            out = (out - g) * f + g
        out = out.clamp(0.0, 1.0)
        return gate * out + (1 - gate) * x

    if op.name == "grayscale":
        g = x.mean(dim=1, keepdim=True).expand_as(x)
        return gate * g + (1 - gate) * x

    if op.name == "blur":
        k = torch.tensor([1.0, 2.0, 1.0])
        kern = (k.outer(k) / 16.0).view(1, 1, 3, 3).repeat(c, 1, 1, 1).to(x)
        out = torch.nn.functional.conv2d(
            torch.nn.functional.pad(x, (1, 1, 1, 1), mode="reflect"),
            kern, groups=c)
        return gate * out + (1 - gate) * x

    if op.name == "solarize":
        thr = float(p.get("threshold", 0.5))
        out = torch.where(x >= thr, 1.0 - x, x)
        return gate * out + (1 - gate) * x

    if op.name == "noise":
        noise = torch.randn(x.shape, generator=rng, device=x.device) * p.get("std", 0.05)
        return x + gate * noise

    raise ValueError(f"unknown augmentation op {op.name!r}")


def _normalize(x: torch.Tensor, policy: AugmentationPolicy) -> torch.Tensor:
    c = x.shape[1]
    mean = torch.as_tensor(policy.mean, dtype=x.dtype)
    std = torch.as_tensor(policy.std, dtype=x.dtype)
    if mean.numel() == 1:
        mean = mean.expand(c)
        std = std.expand(c)
    return (x - mean.view(1, c, 1, 1)) / std.view(1, c, 1, 1)


def augment(batch, ops: list[AugOp], policy: AugmentationPolicy,
            rng: torch.Generator) -> torch.Tensor:
    x = _to_float_chw(batch)
    for op in ops:
        x = _apply_op(x, op, rng)
    return _normalize(x, policy)


def two_views(batch, policy: AugmentationPolicy,
              rng: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Two independent augmented views of one batch, identical shapes."""
    if (isinstance(batch, np.ndarray) and batch.size == 0) or len(batch) == 0:
        raise ValueError("empty batch")
    v1 = augment(batch, policy.train_ops, policy, rng)
    v2 = augment(batch, policy.train_ops, policy, rng)
    return v1, v2


def eval_view(batch, policy: AugmentationPolicy,
              rng: torch.Generator | None = None) -> torch.Tensor:
    """Deterministic evaluation-time view (eval ops + normalization)."""
    gen = rng if rng is not None else torch.Generator().manual_seed(0)
    return augment(batch, policy.eval_ops, policy, gen)
