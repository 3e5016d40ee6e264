"""Datasets, class-incremental task splitting and client partitioning.

All functions are pure over immutable inputs; RNG state is passed in as a
seed, never taken from global state.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IndivisibleClassesError
from .seeding import rng_for


@dataclass
class LabeledDataset:
    """Float images (N, C, H, W) with integer labels and class names.

    Loaders produce unit-interval pixels; consumers may hold an affinely
    normalized copy instead.
    """

    images: np.ndarray
    labels: np.ndarray
    class_names: list

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) == 0:
            raise ValueError("dataset must contain at least one sample")
        if len(self.labels) != len(self.images):
            raise ValueError("labels and images disagree in length")
        if self.labels.min() < 0 or self.labels.max() >= len(self.class_names):
            raise ValueError("labels must index into class_names")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.class_names)


@dataclass
class PartitionConfig:
    """How task samples are spread over clients."""

    mode: str = "iid"  # iid | dirichlet
    beta: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("iid", "dirichlet"):
            raise ValueError(f"unknown partition mode {self.mode!r}")
        if self.mode == "dirichlet" and self.beta <= 0:
            raise ValueError("beta must be positive for dirichlet partitioning")


@dataclass
class TaskSchedule:
    """Ordered class sets per task plus per-(task, client) sample indices."""

    tasks: list  # list of tuple[int, ...], sorted within each task
    client_indices: dict = field(default_factory=dict)  # (task, client) -> list[int]
    num_clients: int = 1

    def task_classes(self, t: int) -> tuple:
        return self.tasks[t]

    def seen_classes(self, t: int) -> tuple:
        """All classes of tasks 0..t inclusive, in schedule order."""
        out = []
        for i in range(t + 1):
            out.extend(self.tasks[i])
        return tuple(out)

    def shard(self, t: int, client: int) -> list:
        return self.client_indices[(t, client)]

    def validate(self, labels: np.ndarray):
        seen = set()
        for classes in self.tasks:
            if seen & set(classes):
                raise ValueError("task class sets overlap")
            seen |= set(classes)
        for t, classes in enumerate(self.tasks):
            task_idx = set(np.flatnonzero(np.isin(labels, list(classes))).tolist())
            assigned = []
            for k in range(self.num_clients):
                assigned.extend(self.client_indices[(t, k)])
            if len(assigned) != len(set(assigned)):
                raise ValueError(f"task {t}: duplicated sample index across clients")
            if set(assigned) != task_idx:
                raise ValueError(f"task {t}: client shards do not cover the task index set")


def split_classes_into_tasks(class_ids, num_tasks: int, seed=None):
    """Partition class ids into `num_tasks` disjoint, equally sized ordered sets.

    With seed=None classes are taken in sorted order; a seed shuffles the
    assignment deterministically.
    """
    class_ids = sorted(int(c) for c in class_ids)
    if num_tasks < 1:
        raise ValueError("num_tasks must be >= 1")
    if len(class_ids) % num_tasks != 0:
        raise IndivisibleClassesError(
            f"{len(class_ids)} classes cannot be split into {num_tasks} equal tasks"
        )
    order = np.asarray(class_ids, dtype=np.int64)
    if seed is not None:
        order = rng_for(seed, "task-split").permutation(order)
    per = len(order) // num_tasks
    return [tuple(sorted(order[i * per : (i + 1) * per].tolist())) for i in range(num_tasks)]


def iid_partition(labels, num_clients: int, seed: int = 0):
    """Per-class shuffled round-robin deal; class histograms deviate by <= 1."""
    labels = np.asarray(labels)
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    rng = rng_for(seed, "iid-partition")
    parts = [[] for _ in range(num_clients)]
    start = 0
    for cls in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        for j, sample in enumerate(idx.tolist()):
            parts[(start + j) % num_clients].append(sample)
        # rotate the starting client so leftover samples spread evenly
        start = (start + len(idx)) % num_clients
    return [sorted(p) for p in parts]


def dirichlet_partition(labels, num_clients: int, beta: float, seed: int = 0):
    """Per-class multinomial assignment with Dirichlet(beta) client proportions.

    Empty client lists are legal and must be handled downstream.
    """
    labels = np.asarray(labels)
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if beta <= 0:
        raise ValueError("beta must be positive")
    rng = rng_for(seed, "dirichlet-partition")
    parts = [[] for _ in range(num_clients)]
    for cls in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        props = rng.dirichlet([beta] * num_clients)
        counts = rng.multinomial(len(idx), props)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        for k in range(num_clients):
            parts[k].extend(idx[offsets[k] : offsets[k + 1]].tolist())
    return [sorted(p) for p in parts]


def partition_indices(labels, config: PartitionConfig, num_clients: int):
    if config.mode == "iid":
        return iid_partition(labels, num_clients, seed=config.seed)
    return dirichlet_partition(labels, num_clients, config.beta, seed=config.seed)


def build_task_schedule(
    labels,
    tasks,
    num_clients: int,
    partition: PartitionConfig,
) -> TaskSchedule:
    """Assign every sample of every task to exactly one client shard.

    Partitioning runs independently per task (seeded per task index) over the
    samples whose label belongs to that task.
    """
    labels = np.asarray(labels)
    schedule = TaskSchedule(tasks=list(tasks), client_indices={}, num_clients=num_clients)
    for t, classes in enumerate(tasks):
        task_idx = np.flatnonzero(np.isin(labels, list(classes)))
        task_labels = labels[task_idx]
        per_task = PartitionConfig(
            mode=partition.mode, beta=partition.beta, seed=partition.seed + 7919 * t
        )
        local_parts = partition_indices(task_labels, per_task, num_clients)
        for k in range(num_clients):
            schedule.client_indices[(t, k)] = sorted(
                task_idx[local_parts[k]].tolist() if len(local_parts[k]) else []
            )
    schedule.validate(labels)
    return schedule


def label_entropy(labels, indices=None) -> float:
    """Shannon entropy (nats) of the label histogram over `indices`."""
    labels = np.asarray(labels)
    if indices is not None:
        labels = labels[np.asarray(indices, dtype=np.int64)]
    if len(labels) == 0:
        return 0.0
    _, counts = np.unique(labels, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def channel_stats(images):
    """Per-channel pixel mean and standard deviation of an image stack."""
    images = images.images if hasattr(images, "images") else np.asarray(images)
    mean = images.mean(axis=(0, 2, 3)).astype(np.float32)
    std = np.maximum(images.std(axis=(0, 2, 3)), 1e-6).astype(np.float32)
    return mean, std


def _smooth(field: np.ndarray, passes: int = 2) -> np.ndarray:
    """Cheap box blur used to give class signatures spatial structure."""
    out = field
    for _ in range(passes):
        out = (
            out
            + np.roll(out, 1, -1)
            + np.roll(out, -1, -1)
            + np.roll(out, 1, -2)
            + np.roll(out, -1, -2)
        ) / 5.0
    return out


def synthetic_blobs_dataset(
    num_classes: int,
    per_class: int,
    image_shape=(3, 32, 32),
    seed: int = 0,
    class_seed=None,
) -> LabeledDataset:
    """Procedural class-separable images: per-class color, blob position and
    stripe signature plus per-sample jitter and noise.

    `class_seed` pins the class appearance independently of the sampling seed,
    so train/test splits drawn with different seeds share class identities.
    Defaults to `seed`.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    c, h, w = image_shape
    if class_seed is None:
        class_seed = seed
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")

    images = np.empty((num_classes * per_class, c, h, w), dtype=np.float32)
    labels = np.repeat(np.arange(num_classes), per_class).astype(np.int64)
    draw = rng_for(seed, "blob-noise")
    for cls in range(num_classes):
        sig_rng = rng_for(class_seed, "blob-class", cls)
        # class identity is mostly spatial (blob placement, stripe pattern);
        # the base color stays near gray so mean intensity alone is a weak cue
        color = sig_rng.uniform(0.40, 0.60, size=c)
        center = sig_rng.uniform(0.15, 0.85, size=2)
        spread = sig_rng.uniform(0.08, 0.16)
        freq = sig_rng.uniform(2.0, 6.0)
        angle = sig_rng.uniform(0.0, np.pi)
        texture = _smooth(sig_rng.standard_normal((c, h, w)))
        texture /= np.abs(texture).max() + 1e-8

        for j in range(per_class):
            cy, cx = center + draw.normal(0.0, 0.06, size=2)
            bump = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * spread**2)))
            stripes = 0.5 + 0.5 * np.sin(
                2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy)
            )
            img = (
                color[:, None, None]
                + 0.55 * bump[None]
                + 0.22 * (stripes[None] - 0.5)
                + 0.12 * texture
                + draw.normal(0.0, 0.05, size=(c, h, w))
            )
            images[cls * per_class + j] = np.clip(img, 0.0, 1.0)

    class_names = [f"blob_{i}" for i in range(num_classes)]
    return LabeledDataset(images, labels, class_names)


def load_image_folder(root) -> LabeledDataset:
    """Load `<root>/<class_name>/<image files>` with a `classes.txt` manifest.

    Pixel values are scaled to [0, 1]; all images must share one shape.
    """
    from PIL import Image

    root = Path(root)
    manifest = root / "classes.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"missing manifest {manifest}")
    class_names = [line.strip() for line in manifest.read_text().splitlines() if line.strip()]
    images, labels = [], []
    for cls_id, name in enumerate(class_names):
        cls_dir = root / name
        if not cls_dir.is_dir():
            raise FileNotFoundError(f"missing class directory {cls_dir}")
        for f in sorted(cls_dir.iterdir()):
            if f.is_dir():
                continue
            arr = np.asarray(Image.open(f).convert("RGB"), dtype=np.float32) / 255.0
            images.append(arr.transpose(2, 0, 1))
            labels.append(cls_id)
    if not images:
        raise ValueError(f"no images found under {root}")
    return LabeledDataset(np.stack(images), np.asarray(labels), class_names)
