"""Evaluation metrics: cluster recovery, accuracy bias, time-to-accuracy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def adjusted_rand_index(labels_a: list, labels_b: list) -> float:
    """Agreement between two partitions, corrected for chance.

    1.0 for identical partitions (up to relabeling), ~0 for independent ones.
    """
    if len(labels_a) != len(labels_b):
        raise ValueError("label lists must have equal length")
    n = len(labels_a)
    if n == 0:
        raise ValueError("empty labelings")
    a_ids = {v: i for i, v in enumerate(sorted(set(labels_a), key=repr))}
    b_ids = {v: i for i, v in enumerate(sorted(set(labels_b), key=repr))}
    table = np.zeros((len(a_ids), len(b_ids)), dtype=np.int64)
    for va, vb in zip(labels_a, labels_b):
        table[a_ids[va], b_ids[vb]] += 1

    def comb2(x):
        return x * (x - 1) // 2

    sum_cells = int(sum(comb2(int(v)) for v in table.ravel()))
    sum_rows = int(sum(comb2(int(v)) for v in table.sum(axis=1)))
    sum_cols = int(sum(comb2(int(v)) for v in table.sum(axis=0)))
    total = comb2(n)
    expected = sum_rows * sum_cols / total if total else 0.0
    max_index = (sum_rows + sum_cols) / 2.0
    if max_index == expected:
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))


@dataclass(frozen=True)
class BiasStats:
    variance: float
    worst10_mean: float
    best10_mean: float


def bias_stats(per_client_accuracy: dict[int, float] | list[float]) -> BiasStats:
    """Population variance plus bottom- and top-decile mean accuracies."""
    if isinstance(per_client_accuracy, dict):
        values = np.array(sorted(per_client_accuracy.values()))
    else:
        values = np.sort(np.asarray(per_client_accuracy, dtype=np.float64))
    if len(values) < 10:
        raise ValueError("need at least 10 clients for decile statistics")
    decile = max(1, int(len(values) * 0.1))
    return BiasStats(
        variance=float(values.var()),
        worst10_mean=float(values[:decile].mean()),
        best10_mean=float(values[-decile:].mean()),
    )


def time_to_accuracy(
    curve: list[tuple[float, float]], target: float
) -> float | None:
    """Earliest simulated time at which the accuracy curve reaches the target."""
    for t, acc in curve:
        if acc >= target:
            return t
    return None
