"""Local client training: E epochs over paired batches of the client's own
task shard and server-synthesized memory."""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.optim as optim

from .errors import BothEmptyError, HeadTooNarrowError, MissingAnchorError
from .losses import (
    LossWeights,
    ScaleFactors,
    client_loss_current,
    client_loss_previous,
    client_total,
)
from .models import ClassifierModel, ModelSnapshot
from .seeding import derive_seed


@dataclass
class LocalConfig:
    """Per-client optimization settings."""

    epochs: int = 2
    batch_size: int = 128
    lr: float = 0.04
    momentum: float = 0.9
    weight_decay: float = 5e-4
    synthetic_batch_size: int = None  # defaults to batch_size

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.synthetic_batch_size is None:
            self.synthetic_batch_size = self.batch_size


@dataclass
class ClientState:
    """One client's model, shard statistics and local optimization config.

    ``images``/``labels`` are the client's shard for the current task; the
    orchestrator replaces them at task boundaries (and revokes old shards).
    """

    client_id: int
    model: ClassifierModel
    images: torch.Tensor
    labels: torch.Tensor
    config: LocalConfig = field(default_factory=LocalConfig)
    last_loss: float = None  # mean step objective of the latest update

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels length mismatch")

    @property
    def sample_count(self) -> int:
        return int(len(self.labels))


def shuffled_batches(n: int, batch_size: int, rng) -> list:
    """Index arrays covering 0..n-1 once, shuffled; final batch may be short."""
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def pair_batches(real_batches, memory_batches, seed: int) -> list:
    """Pair real and synthetic batches; the shorter stream cycles.

    Epoch length follows the real stream (or the memory stream when the
    client has no real data this task). Each slot of a pair may be None if
    that stream is empty. Order is deterministic per seed.
    """
    real_batches = list(real_batches)
    memory_batches = list(memory_batches)
    if not real_batches and not memory_batches:
        raise BothEmptyError("both the real and memory streams are empty")
    rng = np.random.default_rng(derive_seed(seed, "pairing"))
    real_order = [real_batches[i] for i in rng.permutation(len(real_batches))]
    mem_order = [memory_batches[i] for i in rng.permutation(len(memory_batches))]
    if not real_order:
        return [(None, m) for m in mem_order]
    if not mem_order:
        return [(r, None) for r in real_order]
    return [(r, mem_order[i % len(mem_order)]) for i, r in enumerate(real_order)]


def _as_image_tensor(memory) -> torch.Tensor:
    images = memory.images if hasattr(memory, "images") else memory
    if isinstance(images, np.ndarray):
        if not images.flags.writeable:  # archives are frozen; torch wants writable
            images = images.copy()
        images = torch.from_numpy(images)
    return images.float()


def client_update(
    state: ClientState,
    prev_server: ModelSnapshot,
    memory,
    pool,
    factors: ScaleFactors,
    weights: LossWeights,
    seed: int = 0,
) -> ClientState:
    """Run E local epochs of paired-batch training and return the state.

    At the first task ``prev_server`` and ``memory`` are None and only the
    current-data loss applies; afterwards each step combines it with the
    synthetic-data distillation term under the adaptive scale factors. The
    server snapshot is never mutated.
    """
    model, cfg = state.model, state.config
    labels_np = state.labels.numpy() if isinstance(state.labels, torch.Tensor) else state.labels
    if len(labels_np) and int(labels_np.max()) >= model.num_classes:
        raise HeadTooNarrowError(
            f"label {int(labels_np.max())} exceeds head width {model.num_classes}"
        )
    for cls in np.unique(labels_np):
        if int(cls) not in pool:
            raise MissingAnchorError(f"no anchor embedding for class {int(cls)}")
    if (prev_server is None) != (memory is None):
        raise ValueError("prev_server and memory must be provided together")

    mem_images = _as_image_tensor(memory) if memory is not None else None
    optimizer = optim.SGD(
        model.parameters(),
        lr=cfg.lr,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )
    model.train()
    step_losses = []
    for epoch in range(cfg.epochs):
        ep_seed = derive_seed(seed, "epoch", state.client_id, epoch)
        rng = np.random.default_rng(ep_seed)
        real = shuffled_batches(len(labels_np), cfg.batch_size, rng)
        mem = (
            shuffled_batches(len(mem_images), cfg.synthetic_batch_size, rng)
            if mem_images is not None
            else []
        )
        for real_idx, mem_idx in pair_batches(real, mem, ep_seed):
            optimizer.zero_grad()
            loss_parts = []
            if real_idx is not None:
                x = state.images[real_idx]
                y = state.labels[real_idx]
                anchors = torch.from_numpy(pool.query_batch(y.numpy())).float()
                logits, feat = model(x)
                loss_cur = client_loss_current(
                    logits, y, feat, anchors, model.projector,
                    weights.radius, weights.lambda_ltc,
                )
            else:
                loss_cur = None
            if mem_idx is not None:
                x_hat = mem_images[mem_idx]
                with torch.no_grad():
                    t_logits, t_feat = prev_server.model(x_hat)
                c_logits, c_feat = model(x_hat)
                loss_pre = client_loss_previous(
                    c_logits[:, : prev_server.head_width], t_logits,
                    c_feat, t_feat, weights.kd_temperature,
                )
            else:
                loss_pre = None
            if loss_pre is None:
                total = loss_cur
            elif loss_cur is None:
                total = factors.alpha_pre_t * loss_pre
            else:
                total = client_total(loss_cur, loss_pre, factors)
            total.backward()
            optimizer.step()
            step_losses.append(float(total.detach()))
    model.eval()
    state.last_loss = float(np.mean(step_losses)) if step_losses else None
    return state


def shard_accuracy(model: ClassifierModel, images, labels, batch_size: int = 256) -> float:
    """Top-1 accuracy of the model on a (images, labels) pair."""
    model.eval()
    correct = 0
    with torch.no_grad():
        for i in range(0, len(labels), batch_size):
            logits, _ = model(images[i : i + batch_size])
            correct += int((logits.argmax(1) == labels[i : i + batch_size]).sum())
    return 100.0 * correct / max(1, len(labels))


def mean_anchor_distance(model: ClassifierModel, images, labels, pool) -> float:
    """Mean squared anchor-projection distance over a shard (diagnostic)."""
    model.eval()
    with torch.no_grad():
        _, feat = model(images)
        anchors = torch.from_numpy(pool.query_batch(np.asarray(labels))).float()
        return float(((anchors - model.project(feat)) ** 2).sum(dim=1).mean())


def make_client(client_id, server: ModelSnapshot, images, labels, config=None) -> ClientState:
    """Fresh client initialized from the current server weights."""
    import copy

    model = copy.deepcopy(server.model)
    for p in model.parameters():
        p.requires_grad_(True)
    return ClientState(
        client_id=client_id,
        model=model,
        images=images,
        labels=labels,
        config=config or LocalConfig(),
    )
