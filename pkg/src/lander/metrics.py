"""Continual-learning evaluation: per-task accuracy history, union-set
last-incremental accuracy and average forgetting."""

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import EmptySplitError, SingleTaskError


@dataclass
class AccuracyHistory:
    """Lower-triangular record a[t_eval][t_task]: accuracy (percent) on task
    t_task's test split measured after training task t_eval (1-indexed)."""

    _cells: dict = field(default_factory=dict)
    _sizes: dict = field(default_factory=dict)

    def record(self, t_eval: int, t_task: int, accuracy: float, test_size: int = None):
        if t_task > t_eval or t_task < 1:
            raise ValueError(f"need 1 <= t_task <= t_eval, got ({t_eval}, {t_task})")
        if not 0.0 <= accuracy <= 100.0:
            raise ValueError(f"accuracy {accuracy} outside [0, 100]")
        self._cells[(t_eval, t_task)] = float(accuracy)
        if test_size is not None:
            self._sizes[t_task] = int(test_size)

    def accuracy(self, t_eval: int, t_task: int) -> float:
        return self._cells[(t_eval, t_task)]

    def test_size(self, t_task: int) -> int:
        return self._sizes.get(t_task, 1)

    @property
    def num_tasks(self) -> int:
        return max((t for t, _ in self._cells), default=0)

    def as_matrix(self):
        """Lower-triangular rows: row t_eval lists a[t_eval][1..t_eval]."""
        return [
            [self._cells[(t_eval, t_task)] for t_task in range(1, t_eval + 1)]
            for t_eval in range(1, self.num_tasks + 1)
        ]


def eval_model(model, images, labels, batch_size: int = 256) -> float:
    """Top-1 accuracy percent of a classifier on a test split."""
    if len(labels) == 0:
        raise EmptySplitError("cannot evaluate on an empty split")
    if isinstance(images, np.ndarray):
        images = torch.from_numpy(images)
    if isinstance(labels, np.ndarray):
        labels = torch.from_numpy(labels)
    net = model.model if hasattr(model, "model") else model
    net.eval()
    correct = 0
    with torch.no_grad():
        for i in range(0, len(labels), batch_size):
            out = net(images[i : i + batch_size].float())
            logits = out[0] if isinstance(out, tuple) else out
            correct += int((logits.argmax(1) == labels[i : i + batch_size]).sum())
    return 100.0 * correct / len(labels)


def last_incremental_accuracy(history: AccuracyHistory, T: int = None) -> float:
    """Accuracy over the union test set of tasks 1..T after training task T
    (sample-weighted combination of the final row)."""
    T = T or history.num_tasks
    if T < 1:
        raise ValueError("history is empty")
    weights = np.array([history.test_size(t) for t in range(1, T + 1)], dtype=np.float64)
    accs = np.array([history.accuracy(T, t) for t in range(1, T + 1)], dtype=np.float64)
    return float((accs * weights).sum() / weights.sum())


def average_forgetting(history: AccuracyHistory, T: int = None) -> float:
    """Mean over earlier tasks of (peak accuracy - final accuracy)."""
    T = T or history.num_tasks
    if T < 2:
        raise SingleTaskError("forgetting is undefined for a single task")
    drops = []
    for t_task in range(1, T):
        peak = max(history.accuracy(e, t_task) for e in range(t_task, T + 1))
        drops.append(peak - history.accuracy(T, t_task))
    return float(np.mean(drops))


def metrics_report(history: AccuracyHistory, config_hash: str, seed: int) -> dict:
    """JSON-ready summary of a finished run."""
    T = history.num_tasks
    return {
        "acc": last_incremental_accuracy(history, T),
        "forgetting": average_forgetting(history, T) if T >= 2 else None,
        "per_task": history.as_matrix(),
        "config_hash": config_hash,
        "seed": int(seed),
    }
