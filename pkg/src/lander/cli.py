"""Command-line front end: run experiments, preview partitions, synthesize
memory from a checkpoint, evaluate checkpoints and summarize finished runs."""

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .config import load_config
from .data import label_entropy
from .errors import LanderError
from .federation import (
    build_dataset,
    class_order,
    config_hash,
    experiment_schedule,
    remap_dataset,
    resolved_generation_config,
    run_experiment,
)
from .generation import data_generation, load_memory, save_memory
from .lte import build_or_load_pool
from .metrics import eval_model
from .models import ModelSnapshot, load_checkpoint
from .seeding import derive_seed


def _add_common(sub, with_out=True):
    sub.add_argument("--config", help="YAML config file")
    sub.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config setting by dotted key (repeatable)",
    )
    sub.add_argument("--preset", help="named preset (desk, cifar)")
    sub.add_argument("--seed", type=int, help="root seed, overrides the config")
    if with_out:
        sub.add_argument("--out", help="output directory / file")
    sub.add_argument(
        "--parallel-clients",
        type=int,
        dest="parallel_clients",
        help="thread pool size for client updates",
    )
    sub.add_argument(
        "--sequential",
        action="store_true",
        help="force one-at-a-time client updates (bit-reproducible)",
    )


def resolve_config(args):
    """Config from file + preset + overrides, then CLI flag adjustments."""
    cfg = load_config(
        getattr(args, "config", None),
        overrides=getattr(args, "overrides", ()),
        preset=getattr(args, "preset", None),
    )
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "sequential", False):
        cfg = replace(cfg, parallel_clients=1)
    elif getattr(args, "parallel_clients", None):
        cfg = replace(cfg, parallel_clients=args.parallel_clients)
    return cfg


def _cache_dir():
    return os.environ.get("LANDER_CACHE") or None


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out) if args.out else None
    lock = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        lock = out / ".lock"
        try:
            with open(lock, "x") as fh:
                fh.write(str(os.getpid()))
        except FileExistsError:
            raise LanderError(
                f"run directory {out} is locked; remove {lock} if the owner died"
            ) from None
    try:
        report = run_experiment(cfg, out_dir=out, cache_dir=_cache_dir())
    finally:
        if lock is not None:
            lock.unlink(missing_ok=True)
    forgetting = report["forgetting"]
    print(f"acc {report['acc']:.2f}")
    print(f"forgetting {'n/a' if forgetting is None else f'{forgetting:.2f}'}")
    print(f"config_hash {report['config_hash']} seed {report['seed']}")
    if out is not None:
        print(f"artifacts in {out}")
    return 0


def cmd_partition_preview(args) -> int:
    cfg = resolve_config(args)
    train = build_dataset(cfg.dataset, train=True)
    train, head_tasks, schedule = experiment_schedule(cfg, train)
    for t, classes in enumerate(head_tasks, start=1):
        print(f"task {t}: classes {list(classes)}")
        for k in range(cfg.num_clients):
            idx = schedule.shard(t - 1, k)
            counts = [
                int(np.sum(train.labels[idx] == c)) if idx else 0 for c in classes
            ]
            entropy = label_entropy(train.labels, idx) if idx else 0.0
            print(
                f"  client {k}: n={len(idx):>5d}  per-class {counts}"
                f"  H={entropy:.3f} nats"
            )
    return 0


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    if not args.out:
        raise LanderError("generate needs --out for the memory archive")
    model, task_index = load_checkpoint(args.ckpt)
    teacher = ModelSnapshot(model)
    train = build_dataset(cfg.dataset, train=True)
    order, _ = class_order(cfg, train.num_classes)
    train = remap_dataset(train, order)
    pool = build_or_load_pool(
        train.class_names, cfg.embedder, template=cfg.prompt_template,
        cache_dir=_cache_dir(),
    )
    memory = data_generation(
        teacher,
        pool,
        range(teacher.head_width),
        resolved_generation_config(cfg, train),
        weights=cfg.losses.generator_weights(pool),
        seed=derive_seed(cfg.seed, "generation", task_index + 1),
    )
    save_memory(memory, args.out)
    print(f"wrote {len(memory)} synthetic samples to {args.out}")
    return 0


def _agreement(teacher: ModelSnapshot, memory, batch_size: int = 256) -> float:
    images = torch.from_numpy(memory.images.copy())
    labels = np.asarray(memory.pseudo_labels)
    hits = 0
    for i in range(0, len(labels), batch_size):
        logits, _ = teacher.forward(images[i : i + batch_size])
        hits += int(np.sum(logits.argmax(1).numpy() == labels[i : i + batch_size]))
    return 100.0 * hits / len(labels)


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    model, task_index = load_checkpoint(args.ckpt)
    snapshot = ModelSnapshot(model)
    results = {"task_index": task_index}
    if args.memory:
        memory = load_memory(args.memory)
        results["agreement"] = _agreement(snapshot, memory)
        results["samples"] = len(memory)
        print(
            f"teacher agreement {results['agreement']:.2f}% "
            f"over {results['samples']} samples"
        )
    else:
        test = build_dataset(cfg.dataset, train=False)
        order, sizes = class_order(cfg, test.num_classes)
        test = remap_dataset(test, order)
        bounds = np.cumsum([0] + sizes)
        per_task, weights = {}, {}
        for t in range(1, cfg.num_tasks + 1):
            classes = range(bounds[t - 1], bounds[t])
            if bounds[t] > snapshot.head_width:
                break  # checkpoint never saw this task
            idx = np.flatnonzero(np.isin(test.labels, list(classes)))
            acc = eval_model(
                snapshot.model,
                torch.from_numpy(test.images[idx].copy()),
                torch.from_numpy(test.labels[idx].copy()),
            )
            per_task[t] = acc
            weights[t] = len(idx)
            print(f"task {t}: acc {acc:.2f}% ({len(idx)} samples)")
        union = sum(per_task[t] * weights[t] for t in per_task) / sum(weights.values())
        results["per_task"] = per_task
        results["acc"] = union
        print(f"union acc {union:.2f}%")
    if args.out:
        Path(args.out).write_text(json.dumps(results, indent=2, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    rows = []
    for run_dir in args.runs:
        path = Path(run_dir) / "metrics.json"
        if not path.exists():
            raise LanderError(f"{run_dir} holds no metrics.json (unfinished run?)")
        data = json.loads(path.read_text())
        rows.append((Path(run_dir).name, data))

    width = max(len(name) for name, _ in rows)
    print(f"{'run':<{width}}  {'acc':>8}  {'forgetting':>10}")
    for name, data in rows:
        forgetting = data["forgetting"]
        forgetting = "n/a" if forgetting is None else f"{forgetting:.2f}"
        print(f"{name:<{width}}  {data['acc']:>8.2f}  {forgetting:>10}")

    # curve data: mean accuracy over seen tasks after each incremental task
    buffer = io.StringIO()
    writer = csv.writer(buffer)
    writer.writerow(["run", "after_task", "mean_accuracy"])
    for name, data in rows:
        for t, row in enumerate(data["per_task"], start=1):
            writer.writerow([name, t, f"{float(np.mean(row)):.4f}"])
    if args.out:
        Path(args.out).write_text(buffer.getvalue())
        print(f"curve data written to {args.out}")
    else:
        print(buffer.getvalue(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lander",
        description="Federated class-incremental runs with anchored synthesis",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="execute a full experiment")
    _add_common(run)
    run.set_defaults(func=cmd_run)

    preview = sub.add_parser(
        "partition-preview", help="show per-client class counts per task"
    )
    _add_common(preview, with_out=False)
    preview.set_defaults(func=cmd_partition_preview)

    generate = sub.add_parser("generate", help="synthesize memory from a checkpoint")
    _add_common(generate)
    generate.add_argument("--ckpt", required=True, help="classifier checkpoint")
    generate.set_defaults(func=cmd_generate)

    evaluate = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(evaluate)
    evaluate.add_argument("--ckpt", required=True, help="classifier checkpoint")
    evaluate.add_argument("--memory", help="memory archive for agreement scoring")
    evaluate.set_defaults(func=cmd_eval)

    report = sub.add_parser("report", help="tabulate finished runs")
    report.add_argument("runs", nargs="+", help="run directories with metrics.json")
    report.add_argument("--out", help="write curve CSV here instead of stdout")
    report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except LanderError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # surface anything else as a structured line
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
