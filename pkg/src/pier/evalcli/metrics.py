"""Ranking metrics and the latency harness."""

import time

import numpy as np

from ..errors import ContractError, UndefinedMetricError


def auc(scores, labels):
    """Mann-Whitney rank AUC; tied scores contribute half a concordance."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ContractError(f"{scores.shape[0]} scores for {labels.shape[0]} labels")
    if ((labels != 0) & (labels != 1)).any():
        raise ContractError("labels must be binary")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUC undefined with {n_pos} positives and {n_neg} negatives"
        )
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    ranks[order] = np.arange(1, scores.size + 1)
    # average ranks inside tie groups
    uniq, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    del uniq
    sums = np.bincount(inverse, weights=ranks)
    ranks = (sums / counts)[inverse]
    pos_ranks = ranks[labels == 1].sum()
    return float((pos_ranks - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def logloss(probs, labels):
    """Mean binary cross entropy with the standard 1e-12 clamp."""
    p = np.clip(np.asarray(probs, dtype=np.float64).ravel(), 1e-12, 1.0 - 1e-12)
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ContractError(f"{p.shape[0]} probabilities for {y.shape[0]} labels")
    return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean())


def _as_sequence(perm):
    indices = getattr(perm, "item_indices", perm)
    return tuple(int(i) for i in indices)


def hr_at_1(selected, best):
    """1 iff the exact ordered sequence `best` appears among `selected`."""
    target = _as_sequence(best)
    return int(any(_as_sequence(p) == target for p in selected))


_WARMUP = 5


def bench_cost(pipeline, dataset_slice, repetitions):
    """Wall-clock per-request latency of a full rerank pass.

    Runs 5 warm-up requests, then `repetitions` timed passes over the slice.
    Returns (mean_ms, p99_ms).
    """
    if repetitions < 30:
        raise ContractError(f"repetitions must be >= 30, got {repetitions}")
    requests = list(dataset_slice)
    if not requests:
        raise ContractError("empty dataset slice")
    for i in range(_WARMUP):
        pipeline(requests[i % len(requests)])
    samples = np.empty(repetitions * len(requests), dtype=np.float64)
    pos = 0
    for _ in range(repetitions):
        for req in requests:
            t0 = time.perf_counter()
            pipeline(req)
            samples[pos] = time.perf_counter() - t0
            pos += 1
    samples *= 1e3
    return float(samples.mean()), float(np.percentile(samples, 99))
