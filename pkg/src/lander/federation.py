"""Federated task loop: synthesis at task boundaries, rounds of broadcast /
local update / aggregation, and the on-disk run layout."""

import copy
import csv
import hashlib
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import generation as _generation
from .client import client_update, make_client
from .config import ExperimentConfig, config_to_dict, save_config
from .data import (
    LabeledDataset,
    PartitionConfig,
    build_task_schedule,
    channel_stats,
    load_image_folder,
    split_classes_into_tasks,
    synthetic_blobs_dataset,
)
from .errors import AllZeroWeightsError, RevokedShardError, ShapeMismatchError
from .generation import save_memory
from .losses import LossWeights, adaptive_scale_factors
from .lte import build_or_load_pool
from .metrics import AccuracyHistory, eval_model, metrics_report
from .models import ModelSnapshot, build_classifier, extend_head, save_checkpoint
from .seeding import derive_seed


@dataclass
class RoundLog:
    """One communication round's record (append-only)."""

    task: int
    round: int
    client_losses: list  # mean local objective per client, broadcast order
    task_accuracy: dict  # {task index: percent} on each seen task's test split
    union_accuracy: float
    wall_time: float


class TaskShards:
    """Per-client views of one task's raw data, revocable at the boundary.

    Once ``revoke`` is called the arrays are dropped and any further access
    raises, so later tasks cannot touch retired shards even by accident.
    """

    def __init__(self, dataset: LabeledDataset, schedule, t: int, num_clients: int):
        self._shards = {}
        for k in range(num_clients):
            idx = schedule.shard(t - 1, k)
            self._shards[k] = (
                torch.from_numpy(np.ascontiguousarray(dataset.images[idx])),
                torch.from_numpy(np.ascontiguousarray(dataset.labels[idx])),
            )
        self._revoked = False

    def get(self, client: int):
        if self._revoked:
            raise RevokedShardError(f"shard handle for client {client} was revoked")
        return self._shards[client]

    def count(self, client: int) -> int:
        if self._revoked:
            raise RevokedShardError(f"shard handle for client {client} was revoked")
        return int(len(self._shards[client][1]))

    @property
    def revoked(self) -> bool:
        return self._revoked

    def revoke(self):
        self._shards = {}
        self._revoked = True


def aggregate(client_models, sample_counts, uniform: bool = False) -> ModelSnapshot:
    """Parameter-wise weighted mean of client models, weights ``n_k / Σ n_k``.

    Batch-norm running statistics are averaged with the same weights; the
    integer batch counters take the rounded weighted mean. ``uniform=True``
    ignores the counts and averages with 1/m each. Accumulation runs in
    float64.
    """
    models = [m.model if isinstance(m, ModelSnapshot) else m for m in client_models]
    if not models or len(models) != len(sample_counts):
        raise ValueError("need one sample count per client model")
    counts = np.asarray(sample_counts, dtype=np.float64)
    if (counts < 0).any():
        raise ValueError("sample counts must be non-negative")
    if uniform:
        counts = np.ones_like(counts)
    total = counts.sum()
    if total <= 0:
        raise AllZeroWeightsError("every client carries zero aggregation weight")
    weights = counts / total

    states = [m.state_dict() for m in models]
    ref = states[0]
    for i, sd in enumerate(states[1:], start=1):
        if sd.keys() != ref.keys():
            raise ShapeMismatchError(f"client {i} exposes a different parameter set")
        for key in ref:
            if sd[key].shape != ref[key].shape:
                raise ShapeMismatchError(
                    f"client {i} parameter {key} has shape {tuple(sd[key].shape)}, "
                    f"expected {tuple(ref[key].shape)}"
                )

    merged = {}
    for key, tensor in ref.items():
        acc = torch.zeros(tensor.shape, dtype=torch.float64)
        for w, sd in zip(weights, states):
            acc += w * sd[key].to(torch.float64)
        if tensor.is_floating_point():
            merged[key] = acc.to(tensor.dtype)
        else:
            merged[key] = torch.round(acc).to(tensor.dtype)

    out = copy.deepcopy(models[0])
    out.load_state_dict(merged)
    return ModelSnapshot(out)


def build_dataset(ds_cfg, train: bool = True) -> LabeledDataset:
    """Materialize the train or test split described by a DatasetConfig.

    With ``normalize`` set (the default) unit-interval pixels are mapped to
    ``(x - 0.5) / 0.25``. The constants are nominal, not measured from the
    data, and match the domain the synthesis stage emits into: a sigmoid
    generator output run through the same affine map covers the same range.
    """
    if ds_cfg.kind == "folder":
        data = load_image_folder(Path(ds_cfg.path) / ("train" if train else "test"))
    else:
        per_class = ds_cfg.per_class if train else ds_cfg.test_per_class
        data = synthetic_blobs_dataset(
            ds_cfg.num_classes,
            per_class,
            image_shape=ds_cfg.image_shape,
            seed=derive_seed(ds_cfg.data_seed, "train" if train else "test"),
            class_seed=ds_cfg.data_seed,
        )
    if ds_cfg.normalize:
        data = LabeledDataset(
            (data.images - 0.5) / 0.25, data.labels, data.class_names
        )
    return data


def class_order(config: ExperimentConfig, num_classes: int):
    """Global class ids in task order plus the per-task sizes.

    Heads index classes by this order, so after relabeling every task covers
    a contiguous block of head indices.
    """
    seed = derive_seed(config.seed, "task-split") if config.shuffle_task_classes else None
    tasks = split_classes_into_tasks(range(num_classes), config.num_tasks, seed=seed)
    return [c for task in tasks for c in task], [len(task) for task in tasks]


def remap_dataset(dataset: LabeledDataset, order) -> LabeledDataset:
    """Relabel so that class ``order[i]`` becomes head index ``i``."""
    order = np.asarray(order, dtype=np.int64)
    inverse = np.empty(len(order), dtype=np.int64)
    inverse[order] = np.arange(len(order))
    return LabeledDataset(
        dataset.images,
        inverse[dataset.labels],
        [dataset.class_names[c] for c in order],
    )


def resolved_generation_config(config: ExperimentConfig, dataset: LabeledDataset):
    """The run's synthesis settings: image shape follows the data, and the
    true-stats mode gets channel statistics measured on the training set."""
    gen = config.generation
    stats = gen.dataset_stats
    if gen.lds_mode == "tds" and stats is None:
        mu, sigma = channel_stats(dataset.images)
        stats = (tuple(float(v) for v in mu), tuple(float(v) for v in sigma))
    return replace(gen, image_shape=dataset.image_shape, dataset_stats=stats)


def experiment_schedule(config: ExperimentConfig, train: LabeledDataset):
    """Relabeled training set, head-space task class sets and client shards."""
    order, task_sizes = class_order(config, train.num_classes)
    train = remap_dataset(train, order)
    bounds = np.cumsum([0] + task_sizes)
    head_tasks = [
        tuple(range(bounds[i], bounds[i + 1])) for i in range(config.num_tasks)
    ]
    schedule = build_task_schedule(
        train.labels,
        head_tasks,
        config.num_clients,
        PartitionConfig(
            mode=config.partition.mode,
            beta=config.partition.beta,
            seed=derive_seed(config.seed, "partition", config.partition.seed),
        ),
    )
    return train, head_tasks, schedule


def config_hash(config: ExperimentConfig) -> str:
    """Short stable digest of the fully resolved config."""
    payload = json.dumps(config_to_dict(config), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


def _eval_splits(model, test_splits) -> dict:
    return {
        t: eval_model(model, images, labels)
        for t, (images, labels) in sorted(test_splits.items())
    }


def _union_accuracy(per_task: dict, test_splits) -> float:
    sizes = {t: len(test_splits[t][1]) for t in per_task}
    total = sum(sizes.values())
    return sum(per_task[t] * sizes[t] for t in per_task) / total


def run_task(
    t: int,
    server: ModelSnapshot,
    dataset: LabeledDataset,
    schedule,
    pool,
    config: ExperimentConfig,
    seed=None,
    memory=None,
    shards=None,
    logs=None,
    test_splits=None,
):
    """Run task ``t`` (1-based) from the server trained through ``t-1``.

    Returns ``(new_server, memory)``. For ``t > 1`` under the full method a
    synthetic memory is produced from the frozen previous server before any
    client sees the new task; the finetune baseline skips both synthesis and
    the distillation stream. Shard handles are revoked when the task ends.
    """
    if seed is None:
        seed = config.seed
    prev = server  # frozen snapshot of S^{t-1} for the whole task
    num_new = len(schedule.task_classes(t - 1))
    new_width = len(schedule.seen_classes(t - 1))
    use_memory = t > 1 and config.method == "lander"

    if use_memory and memory is None:
        gen_cfg = resolved_generation_config(config, dataset)
        memory = _generation.data_generation(
            prev,
            pool,
            range(prev.head_width),
            gen_cfg,
            weights=config.losses.generator_weights(pool),
            seed=derive_seed(seed, "generation", t),
        )

    model = prev.model
    if new_width > prev.head_width:
        model = extend_head(model, new_width, seed=derive_seed(seed, "extend", t))
    current = ModelSnapshot(model)
    factors = (
        adaptive_scale_factors(num_new, prev.head_width, config.alpha_cur, config.alpha_pre)
        if t > 1
        else None
    )
    if config.method == "lander":
        client_weights = config.losses.client_weights(pool)
    else:
        # the finetune baseline trains on plain cross-entropy
        client_weights = LossWeights(
            lambda_ltc=0.0, radius=0.0, kd_temperature=config.losses.kd_temperature
        )
    memory_batches = (
        math.ceil(len(memory) / config.local.synthetic_batch_size) if use_memory else 0
    )

    if shards is None:
        shards = TaskShards(dataset, schedule, t, config.num_clients)
    try:
        for rnd in range(1, config.rounds + 1):
            started = time.perf_counter()
            states = []
            for k in range(config.num_clients):
                images, labels = shards.get(k)
                states.append(make_client(k, current, images, labels, config=config.local))

            def update(state):
                if state.sample_count == 0 and not use_memory:
                    return  # nothing to train on; keeps the broadcast weights
                client_update(
                    state,
                    prev if use_memory else None,
                    memory if use_memory else None,
                    pool,
                    factors,
                    client_weights,
                    seed=derive_seed(seed, "client", t, rnd, state.client_id),
                )

            if config.parallel_clients > 1:
                with ThreadPoolExecutor(max_workers=config.parallel_clients) as executor:
                    list(executor.map(update, states))
            else:
                for state in states:
                    update(state)

            agg_weights = [
                state.sample_count or (memory_batches if use_memory else 0)
                for state in states
            ]
            current = aggregate(
                [state.model for state in states],
                agg_weights,
                uniform=config.aggregation == "uniform",
            )
            if logs is not None and test_splits:
                seen = {i: test_splits[i] for i in range(1, t + 1)}
                per_task = _eval_splits(current.model, seen)
                logs.append(
                    RoundLog(
                        task=t,
                        round=rnd,
                        client_losses=[state.last_loss for state in states],
                        task_accuracy=per_task,
                        union_accuracy=_union_accuracy(per_task, seen),
                        wall_time=time.perf_counter() - started,
                    )
                )
    finally:
        shards.revoke()
    return current, memory


def _write_round_logs(path, logs):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "round", "client", "loss", "union_accuracy", "wall_time"])
        for entry in logs:
            for k, loss in enumerate(entry.client_losses):
                writer.writerow(
                    [
                        entry.task,
                        entry.round,
                        k,
                        "" if loss is None else f"{loss:.6f}",
                        f"{entry.union_accuracy:.4f}",
                        f"{entry.wall_time:.3f}",
                    ]
                )


def run_experiment(config: ExperimentConfig, out_dir=None, cache_dir=None) -> dict:
    """Execute all tasks and return the metrics report.

    When ``out_dir`` is given the run directory receives ``config.lock``,
    per-task checkpoints and memory archives, a per-round CSV log and the
    final ``metrics.json``. Sequential mode (``parallel_clients=1``) is
    bit-reproducible for a fixed config and seed.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        for sub in ("ckpt", "memory", "logs"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        save_config(config, out / "config.lock")

    train = build_dataset(config.dataset, train=True)
    test = build_dataset(config.dataset, train=False)
    order, _ = class_order(config, train.num_classes)
    test = remap_dataset(test, order)
    train, head_tasks, schedule = experiment_schedule(config, train)

    pool = build_or_load_pool(
        train.class_names,
        config.embedder,
        template=config.prompt_template,
        cache_dir=cache_dir,
    )

    test_splits = {}
    for i, classes in enumerate(head_tasks, start=1):
        idx = np.flatnonzero(np.isin(test.labels, classes))
        test_splits[i] = (
            torch.from_numpy(np.ascontiguousarray(test.images[idx])),
            torch.from_numpy(np.ascontiguousarray(test.labels[idx])),
        )

    server = ModelSnapshot(
        build_classifier(
            config.arch_id,
            len(head_tasks[0]),
            config.d_e,
            seed=derive_seed(config.seed, "init"),
            in_channels=train.image_shape[0],
        )
    )

    history = AccuracyHistory()
    logs = []
    for t in range(1, config.num_tasks + 1):
        try:
            server, memory = run_task(
                t,
                server,
                train,
                schedule,
                pool,
                config,
                seed=config.seed,
                logs=logs,
                test_splits=test_splits,
            )
            for i in range(1, t + 1):
                images, labels = test_splits[i]
                history.record(
                    t, i, eval_model(server.model, images, labels), test_size=len(labels)
                )
            if out is not None:
                save_checkpoint(server.model, out / "ckpt" / f"task_{t}.bin", task_index=t)
                if memory is not None:
                    save_memory(memory, out / "memory" / f"task_{t}.mem")
        except Exception as exc:
            exc.args = (f"task {t}: {exc}",)
            raise

    report = metrics_report(history, config_hash(config), config.seed)
    if out is not None:
        _write_round_logs(out / "logs" / "rounds.csv", logs)
        (out / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report
