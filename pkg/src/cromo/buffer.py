"""Fixed-budget exemplar store of raw images from completed tasks."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .container import load_arrays, save_arrays


@dataclass
class MemoryBuffer:
    """Per-task budget of un-augmented images with labels and task ids.

    Entries for a task never change once that task completes; selection is
    class-balanced uniform sampling within the task.
    """

    samples_per_task: int
    images: np.ndarray = field(default_factory=lambda: np.zeros((0,), dtype=np.uint8))
    labels: np.ndarray = field(default_factory=lambda: np.zeros((0,), dtype=np.int64))
    task_ids: np.ndarray = field(default_factory=lambda: np.zeros((0,), dtype=np.int64))
    tasks_seen: set[int] = field(default_factory=set)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def is_empty(self) -> bool:
        return len(self) == 0


def _balanced_selection(labels: np.ndarray, budget: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Pick `budget` indices with per-class counts differing by at most one."""
    classes = np.unique(labels)
    per_class = budget // len(classes)
    remainder = budget - per_class * len(classes)
    # the classes receiving one extra exemplar are chosen by seeded order
    extra = set(rng.permutation(classes)[:remainder].tolist())
    chosen: list[np.ndarray] = []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        want = per_class + (1 if c in extra else 0)
        take = rng.permutation(idx)[:want]
        chosen.append(np.sort(take))
    return np.concatenate(chosen)


def update_after_task(buf: MemoryBuffer, images: np.ndarray, labels: np.ndarray,
                      task_id: int, rng: np.random.Generator) -> MemoryBuffer:
    """Store up to ``samples_per_task`` class-balanced exemplars of a finished task.

    Returns a new buffer; existing entries are untouched. A task smaller than
    the budget is stored whole with a warning.
    """
    if task_id in buf.tasks_seen:
        raise ValueError(f"task {task_id} already stored in the buffer")
    if len(images) != len(labels):
        raise ValueError("images and labels length mismatch")

    n = len(labels)
    if n <= buf.samples_per_task:
        if n < buf.samples_per_task:
            warnings.warn(f"task {task_id} has {n} samples, below the buffer "
                          f"budget {buf.samples_per_task}; storing all of them",
                          RuntimeWarning)
        keep = np.arange(n)
    else:
        keep = _balanced_selection(labels, buf.samples_per_task, rng)

    new_images = images[keep]
    if buf.is_empty:
        images_cat = new_images
        labels_cat = labels[keep]
        tasks_cat = np.full(len(keep), task_id, dtype=np.int64)
    else:
        images_cat = np.concatenate([buf.images, new_images])
        labels_cat = np.concatenate([buf.labels, labels[keep]])
        tasks_cat = np.concatenate([buf.task_ids,
                                    np.full(len(keep), task_id, dtype=np.int64)])
    return MemoryBuffer(samples_per_task=buf.samples_per_task,
                        images=images_cat, labels=labels_cat,
                        task_ids=tasks_cat,
                        tasks_seen=buf.tasks_seen | {task_id})


def sample_batch(buf: MemoryBuffer, n: int,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """n uniform draws with replacement over all stored entries."""
    if buf.is_empty:
        raise ValueError("cannot sample from an empty buffer")
    idx = rng.integers(0, len(buf), size=n)
    return buf.images[idx], buf.labels[idx], buf.task_ids[idx]


def save_buffer(path, buf: MemoryBuffer) -> None:
    save_arrays(path, {
        "images": buf.images, "labels": buf.labels, "task_ids": buf.task_ids,
    }, meta={"samples_per_task": buf.samples_per_task,
             "tasks_seen": sorted(buf.tasks_seen)})


def load_buffer(path) -> MemoryBuffer:
    arrays, meta = load_arrays(path)
    return MemoryBuffer(samples_per_task=int(meta["samples_per_task"]),
                        images=arrays["images"], labels=arrays["labels"],
                        task_ids=arrays["task_ids"],
                        tasks_seen=set(meta["tasks_seen"]))
