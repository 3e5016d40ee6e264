"""Server-side data-free synthesis: invert the frozen previous-task model
into a labeled synthetic memory, guided by the anchor embeddings."""

import copy
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.optim as optim

from .errors import (
    EmptyMemoryError,
    NonFiniteLossError,
    NoPreviousClassesError,
)
from .losses import (
    LossWeights,
    feature_mse,
    gen_adv_loss,
    gen_bn_loss,
    gen_ltc_loss,
    gen_oh_loss,
    gen_total,
    kd_kl,
)
from .models import (
    GEN_LATENT_DIM,
    FixedDataStats,
    LearnableDataStats,
    ModelSnapshot,
    build_classifier,
    build_generator,
    build_noisy_layer,
)
from .seeding import derive_seed, rng_for

LDS_MODES = ("lds", "tds", "rds", "none")


@dataclass
class GenerationConfig:
    """Round counts, step counts and optimizer settings for one task's
    synthesis job."""

    rounds: int = 40  # synthesis rounds per task
    steps: int = 40  # generator steps per round
    batch_size: int = 256
    lr: float = 2e-3
    student_lr: float = 1e-3
    image_shape: tuple = (3, 32, 32)
    generator_scale: str = "standard"
    final_bn: bool = True
    lds_mode: str = "lds"
    dataset_stats: tuple = None  # (mu, sigma) per channel, used by tds mode
    noisy_input: bool = True  # False: plain noise latent (no anchor input)
    bn_stats_source: str = "teacher"  # or "generator" (literal reading)
    kd_temperature: float = 1.0
    dry_run: bool = False

    def __post_init__(self):
        if self.rounds < 1 or self.steps < 1 or self.batch_size < 1:
            raise ValueError("rounds, steps and batch_size must be >= 1")
        if self.lds_mode not in LDS_MODES:
            raise ValueError(f"lds_mode must be one of {LDS_MODES}")
        if self.bn_stats_source not in ("teacher", "generator"):
            raise ValueError("bn_stats_source must be 'teacher' or 'generator'")

    @property
    def memory_size(self) -> int:
        return self.rounds * self.batch_size

    def make_stats(self, seed: int = 0):
        """Normalization module for the configured mode (None for 'none')."""
        channels = self.image_shape[0]
        if self.lds_mode == "lds":
            return LearnableDataStats(channels)
        if self.lds_mode == "tds":
            mu, sigma = self.dataset_stats or (0.5, 0.25)
            return FixedDataStats(
                np.broadcast_to(np.asarray(mu, dtype=np.float32), (channels,)),
                np.broadcast_to(np.asarray(sigma, dtype=np.float32), (channels,)),
            )
        if self.lds_mode == "rds":
            rng = rng_for(seed, "rds-stats")
            return FixedDataStats(
                rng.uniform(0.2, 0.8, channels).astype(np.float32),
                rng.uniform(0.1, 0.5, channels).astype(np.float32),
            )
        return None


@dataclass
class SyntheticMemory:
    """Immutable labeled synthetic dataset produced for one task boundary."""

    images: np.ndarray  # (M, C, H, W) float32
    pseudo_labels: np.ndarray  # (M,) int64
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.pseudo_labels = np.ascontiguousarray(self.pseudo_labels, dtype=np.int64)
        if len(self.images) != len(self.pseudo_labels):
            raise ValueError("images and pseudo_labels length mismatch")
        self.images.setflags(write=False)
        self.pseudo_labels.setflags(write=False)

    def __len__(self):
        return len(self.pseudo_labels)


class GeneratorBundle:
    """Generator, noisy layer, data stats and student plus their optimizers.

    The generator, stats and student persist for the whole task; the noisy
    layer (and its optimizer) is reinitialized at every round.
    """

    def __init__(self, teacher: ModelSnapshot, config: GenerationConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.generator = build_generator(
            config.image_shape,
            scale=config.generator_scale,
            seed=derive_seed(seed, "generator"),
            final_bn=config.final_bn,
        )
        self.stats = config.make_stats(seed)
        self.d_e = teacher.model.d_e
        self.student = build_classifier(
            teacher.model.arch_id,
            teacher.head_width,
            teacher.model.d_e,
            seed=derive_seed(seed, "student"),
            in_channels=teacher.model.in_channels,
        )
        gen_params = list(self.generator.parameters())
        if self.stats is not None:
            gen_params += [p for p in self.stats.parameters() if p.requires_grad]
        self.gen_opt = optim.Adam(gen_params, lr=config.lr)
        self.student_opt = optim.Adam(self.student.parameters(), lr=config.student_lr)
        self.noisy = None
        self.noisy_opt = None
        self._plain_latent = None

    def reinit_noisy(self, round_seed: int):
        """Fresh layer-level randomness for a new round."""
        if self.config.noisy_input:
            self.noisy = build_noisy_layer(self.d_e, seed=round_seed)
            self.noisy_opt = optim.Adam(self.noisy.parameters(), lr=self.config.lr)
            self._plain_latent = None
        else:
            torch.manual_seed(round_seed)
            self._plain_latent = torch.randn(self.config.batch_size, GEN_LATENT_DIM)
            self.noisy = None
            self.noisy_opt = None

    def latent(self, anchors: torch.Tensor) -> torch.Tensor:
        if self.config.noisy_input:
            if self.noisy is None:
                raise RuntimeError("noisy layer not initialized; call reinit_noisy")
            return self.noisy(anchors)
        return self._plain_latent[: len(anchors)]


def sample_pseudo_labels(prev_classes, batch_size: int, rng) -> np.ndarray:
    """Uniform i.i.d. pseudo labels over the previously-seen classes."""
    prev_classes = np.asarray(sorted(prev_classes), dtype=np.int64)
    if len(prev_classes) == 0:
        raise NoPreviousClassesError("no previous classes to sample from")
    return prev_classes[rng.integers(0, len(prev_classes), size=batch_size)]


def synthesize_batch(bundle: GeneratorBundle, pool, labels) -> torch.Tensor:
    """x-hat: generate from the labels' anchor embeddings and normalize."""
    anchors = torch.from_numpy(pool.query_batch(np.asarray(labels))).float()
    z = bundle.latent(anchors)
    x = bundle.generator(z)
    if bundle.stats is not None:
        x = bundle.stats(x)
    return x


class _BnTap:
    """Forward-pre hooks capturing per-layer batch statistics at batch-norm
    inputs, kept differentiable so the statistic mismatch can be optimized."""

    def __init__(self, bn_modules):
        self.stats = []
        self._handles = [m.register_forward_pre_hook(self._capture) for m in bn_modules]

    def _capture(self, module, inputs):
        (x,) = inputs
        dims = [d for d in range(x.dim()) if d != 1]
        self.stats.append((x.mean(dims), x.var(dims, unbiased=False)))

    def reset(self):
        self.stats = []

    def remove(self):
        for h in self._handles:
            h.remove()


def _bn_reference(bundle, teacher):
    """(modules to tap, frozen running stats) for the configured source."""
    if bundle.config.bn_stats_source == "teacher":
        modules = teacher.model.bn_modules()
    else:
        modules = [
            m
            for m in bundle.generator.modules()
            if isinstance(m, nn.modules.batchnorm._BatchNorm)
        ]
    running = [(m.running_mean.clone(), m.running_var.clone()) for m in modules]
    return modules, running


def generation_round(
    bundle: GeneratorBundle,
    teacher: ModelSnapshot,
    pool,
    weights: LossWeights,
    labels,
    round_seed: int = 0,
) -> torch.Tensor:
    """g optimization steps on the synthesis objective; returns the batch.

    Only the generator, noisy layer and data stats are updated; the teacher
    and the student are frozen here. A non-finite loss aborts the round,
    reseeds the noisy layer and retries once from the round-start state.
    """
    start_state = {
        "generator": copy.deepcopy(bundle.generator.state_dict()),
        "gen_opt": copy.deepcopy(bundle.gen_opt.state_dict()),
        "stats": copy.deepcopy(bundle.stats.state_dict()) if bundle.stats is not None else None,
    }
    for attempt in range(2):
        try:
            return _generation_attempt(bundle, teacher, pool, weights, labels)
        except NonFiniteLossError:
            if attempt == 1:
                raise
            bundle.generator.load_state_dict(start_state["generator"])
            bundle.gen_opt.load_state_dict(start_state["gen_opt"])
            if bundle.stats is not None:
                bundle.stats.load_state_dict(start_state["stats"])
            bundle.reinit_noisy(derive_seed(round_seed, "retry"))


def _generation_attempt(bundle, teacher, pool, weights, labels) -> torch.Tensor:
    cfg = bundle.config
    labels_t = torch.from_numpy(np.asarray(labels, dtype=np.int64))
    anchors = (
        torch.from_numpy(pool.query_batch(np.asarray(labels))).float()
        if weights.lambda_ltc > 0
        else None
    )
    bundle.generator.train()
    if bundle.noisy is not None:
        bundle.noisy.train()
    bundle.student.eval()
    bundle.student.requires_grad_(False)

    tap = None
    running = None
    if weights.lambda_bn > 0:
        modules, running = _bn_reference(bundle, teacher)
        tap = _BnTap(modules)
    try:
        for _ in range(cfg.steps):
            if tap is not None:
                tap.reset()
            x = synthesize_batch(bundle, pool, labels)
            t_logits, t_feat = teacher.model(x)
            batch_stats = tap.stats if tap is not None else None
            s_logits, _ = bundle.student(x)
            adv = gen_adv_loss(s_logits, t_logits, cfg.kd_temperature)
            oh = gen_oh_loss(t_logits, labels_t)
            bn = (
                gen_bn_loss(batch_stats, running)
                if batch_stats is not None
                else torch.zeros(())
            )
            ltc = (
                gen_ltc_loss(t_feat, anchors, teacher.model.projector, weights.radius)
                if anchors is not None
                else torch.zeros(())
            )
            total = gen_total(adv, bn, oh, ltc, weights)
            if not torch.isfinite(total):
                raise NonFiniteLossError(f"non-finite synthesis loss {float(total)!r}")
            bundle.gen_opt.zero_grad()
            if bundle.noisy_opt is not None:
                bundle.noisy_opt.zero_grad()
            total.backward()
            bundle.gen_opt.step()
            if bundle.noisy_opt is not None:
                bundle.noisy_opt.step()
    finally:
        if tap is not None:
            tap.remove()
        bundle.student.requires_grad_(True)
    with torch.no_grad():
        return synthesize_batch(bundle, pool, labels).detach()


def train_student_on_memory(bundle: GeneratorBundle, teacher: ModelSnapshot, memory) -> None:
    """One pass of the student over the accumulated memory against the
    frozen teacher (logit KL + feature error)."""
    images = memory.images if hasattr(memory, "images") else memory
    if isinstance(images, np.ndarray):
        # archived memories are write-protected; copy to keep torch quiet
        images = torch.from_numpy(images if images.flags.writeable else images.copy())
    if len(images) == 0:
        raise EmptyMemoryError("cannot train the student on an empty memory")
    cfg = bundle.config
    # eval mode: batch-norm buffers stay frozen so a student that equals the
    # teacher parameter-for-parameter has exactly zero loss
    bundle.student.eval()
    order = rng_for(bundle.seed, "student-pass", len(images)).permutation(len(images))
    for i in range(0, len(order), cfg.batch_size):
        idx = order[i : i + cfg.batch_size]
        x = images[idx].float()
        with torch.no_grad():
            t_logits, t_feat = teacher.model(x)
        s_logits, s_feat = bundle.student(x)
        loss = kd_kl(s_logits, t_logits, cfg.kd_temperature) + feature_mse(s_feat, t_feat)
        bundle.student_opt.zero_grad()
        loss.backward()
        bundle.student_opt.step()


def student_memory_loss(bundle, teacher, memory) -> float:
    """Mean student-vs-teacher objective over the memory (no updates)."""
    images = memory.images if hasattr(memory, "images") else memory
    if isinstance(images, np.ndarray):
        # archived memories are write-protected; copy to keep torch quiet
        images = torch.from_numpy(images if images.flags.writeable else images.copy())
    bundle.student.eval()
    total, batches = 0.0, 0
    cfg = bundle.config
    with torch.no_grad():
        for i in range(0, len(images), cfg.batch_size):
            x = images[i : i + cfg.batch_size].float()
            t_logits, t_feat = teacher.model(x)
            s_logits, s_feat = bundle.student(x)
            total += float(
                kd_kl(s_logits, t_logits, cfg.kd_temperature) + feature_mse(s_feat, t_feat)
            )
            batches += 1
    return total / max(1, batches)


def data_generation(
    teacher: ModelSnapshot,
    pool,
    prev_classes,
    config: GenerationConfig,
    weights: LossWeights = None,
    seed: int = 0,
) -> SyntheticMemory:
    """Full synthesis job for one task boundary: I rounds of generation and
    student distillation over the growing memory."""
    prev_classes = sorted(int(c) for c in prev_classes)
    if not prev_classes:
        raise NoPreviousClassesError("generation requires at least one previous class")
    weights = weights or LossWeights()
    c, h, w = config.image_shape

    if config.dry_run:
        images = np.zeros((config.memory_size, c, h, w), dtype=np.float32)
        labels = np.concatenate(
            [
                sample_pseudo_labels(
                    prev_classes, config.batch_size, rng_for(seed, "labels", i)
                )
                for i in range(config.rounds)
            ]
        )
        return SyntheticMemory(
            images,
            labels,
            provenance={
                "seed": seed,
                "rounds": list(range(config.rounds)),
                "dry_run": True,
            },
        )

    bundle = GeneratorBundle(teacher, config, seed=seed)
    chunks, label_chunks = [], []
    for i in range(config.rounds):
        bundle.reinit_noisy(derive_seed(seed, "noisy", i))
        labels = sample_pseudo_labels(
            prev_classes, config.batch_size, rng_for(seed, "labels", i)
        )
        batch = generation_round(
            bundle, teacher, pool, weights, labels, round_seed=derive_seed(seed, "round", i)
        )
        chunks.append(batch.cpu().numpy().astype(np.float32))
        label_chunks.append(labels)
        memory_so_far = np.concatenate(chunks)
        train_student_on_memory(bundle, teacher, memory_so_far)
    return SyntheticMemory(
        np.concatenate(chunks),
        np.concatenate(label_chunks),
        provenance={"seed": seed, "rounds": list(range(config.rounds))},
    )


# --- memory archive ---------------------------------------------------------

_MEM_MAGIC = b"LANDMEM1"


def save_memory(memory: SyntheticMemory, path):
    """Manifest + contiguous raw image/label blobs, loadable standalone."""
    count = len(memory)
    shape = list(memory.images.shape[1:])
    manifest = json.dumps(
        {
            "count": count,
            "image_shape": shape,
            "dtype": "float32",
            "classes": sorted(int(c) for c in np.unique(memory.pseudo_labels)),
            "provenance": memory.provenance,
        },
        sort_keys=True,
    ).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_MEM_MAGIC)
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        f.write(memory.images.astype("<f4").tobytes())
        f.write(memory.pseudo_labels.astype("<i8").tobytes())


def load_memory(path) -> SyntheticMemory:
    with open(path, "rb") as f:
        if f.read(len(_MEM_MAGIC)) != _MEM_MAGIC:
            raise ValueError(f"{path} is not a memory archive")
        (hlen,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(hlen).decode())
        count = manifest["count"]
        shape = tuple(manifest["image_shape"])
        n_pix = count * int(np.prod(shape))
        images = np.frombuffer(f.read(n_pix * 4), dtype="<f4").reshape((count,) + shape)
        labels = np.frombuffer(f.read(count * 8), dtype="<i8")
    return SyntheticMemory(
        images.copy(), labels.copy(), provenance=manifest.get("provenance", {})
    )
