"""Fine-grained permutation selection via locality-sensitive hashing.

A permutation is summarized as the position-weighted mean of its item
embeddings, hashed into B sign bits per behavior bank, and ranked by the
time-weighted Hamming distance to the user's recently clicked permutations.
Selection reads the live embedding tables every call; nothing here caches
model state, so an embedding update moves the signatures immediately.
"""

from dataclasses import dataclass

import numpy as np

from .embedding import position_encoding
from .errors import ContractError


@dataclass
class HashFamily:
    """One frozen Gaussian projection bank per behavior slot."""

    banks: np.ndarray  # (M, B, D)
    seed: int

    @property
    def n_banks(self):
        return int(self.banks.shape[0])

    @property
    def n_bits(self):
        return int(self.banks.shape[1])


@dataclass
class TimeWeights:
    """Recency weights over behavior ranks, most recent first."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size == 0:
            raise ContractError("time weights must be a nonempty vector")
        if (self.values <= 0).any():
            raise ContractError("time weights must be positive")
        if (np.diff(self.values) > 1e-12).any():
            raise ContractError("time weights must not increase with recency rank")
        if abs(float(self.values.sum()) - 1.0) > 1e-9:
            raise ContractError("time weights must sum to 1")

    def for_length(self, m):
        """Truncate to the first m ranks and renormalize."""
        if m < 1 or m > self.values.size:
            raise ContractError(f"history length {m} outside 1..{self.values.size}")
        head = self.values[:m]
        return head / head.sum()


def time_weights(m, gamma=0.8):
    """Geometric decay gamma^rank, normalized.  gamma=1 is uniform."""
    if not (0.0 < gamma <= 1.0):
        raise ContractError(f"decay gamma must be in (0, 1], got {gamma}")
    raw = gamma ** np.arange(m, dtype=np.float64)
    return TimeWeights(values=raw / raw.sum())


def make_hash_family(n_banks, n_bits, dim, seed):
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    banks = rng.standard_normal((n_banks, n_bits, dim))
    banks.setflags(write=False)
    return HashFamily(banks=banks, seed=int(seed))


def perm_representation(perm_emb, pe=None):
    """Mean over fields and items of embedding ⊙ position encoding -> (D,)."""
    arr = perm_emb.as_array()  # (N_d, N_f, D)
    n_d, _, dim = arr.shape
    if pe is None:
        pe = position_encoding(n_d, dim)
    return (arr * pe[:, None, :]).mean(axis=(0, 1))


def repr_from_feature_arrays(field_arrays, pe):
    """Batched representation: list of (..., N_d, D) arrays -> (..., D)."""
    acc = None
    for arr in field_arrays:
        weighted = arr * pe
        acc = weighted if acc is None else acc + weighted
    return acc.mean(axis=-2) / len(field_arrays)


def simhash(h, bank):
    """Sign bits of the projections: (B, D) bank x (D,) vector -> (B,) uint8."""
    h = np.asarray(h)
    if h.shape[-1] != bank.shape[-1]:
        raise ContractError(f"vector dim {h.shape[-1]} does not match bank dim {bank.shape[-1]}")
    return (h @ bank.T >= 0).astype(np.uint8)


def hamming(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ContractError(f"signature lengths differ: {a.shape} vs {b.shape}")
    return int(np.count_nonzero(a != b))


def _embed_perm_array(table, features):
    """(..., N_d, N_f) feature ids -> representation (..., D), no autodiff."""
    features = np.asarray(features)
    n_d = features.shape[-2]
    pe = position_encoding(n_d, table.dim)
    fields = [table.fields[j].data[features[..., j]] for j in range(table.n_fields)]
    return repr_from_feature_arrays(fields, pe)


def behavior_signatures(behaviors, table, family):
    """Per-rank signatures of the clicked-permutation history."""
    if len(behaviors) > family.n_banks:
        raise ContractError(f"{len(behaviors)} behaviors exceed {family.n_banks} hash banks")
    sigs = []
    for m, feats in enumerate(behaviors):
        h = _embed_perm_array(table, np.asarray(feats))
        sigs.append(simhash(h, family.banks[m]))
    return sigs


def candidate_distances(cand_features, behaviors, table, family, weights):
    """Time-aware hash distance of every candidate permutation.

    cand_features: (T, N_d, N_f) int ids.  An empty history has no anchor, so
    every candidate gets the neutral score B/2 (the expected distance of an
    unrelated pair).
    """
    cand_features = np.asarray(cand_features)
    t = cand_features.shape[0]
    if len(behaviors) == 0:
        return np.full(t, family.n_bits / 2.0)
    beh_sigs = behavior_signatures(behaviors, table, family)
    w = weights.for_length(len(behaviors))
    h = _embed_perm_array(table, cand_features)  # (T, D)
    out = np.zeros(t, dtype=np.float64)
    for m, sig_b in enumerate(beh_sigs):
        sig_p = (h @ family.banks[m].T >= 0).astype(np.uint8)
        out += w[m] * np.count_nonzero(sig_p != sig_b[None, :], axis=1)
    return out


def time_aware_distance(perm_features, behaviors, table, family, weights):
    """Scalar distance for one permutation; see candidate_distances."""
    d = candidate_distances(np.asarray(perm_features)[None, ...], behaviors, table, family, weights)
    return float(d[0])


def select_top_k_batch(item_features, enum_idx, behaviors_per_example, table, family, weights, k, chunk=128):
    """Vectorized selection over a batch of candidate sets.

    item_features: (R, N_o, N_f) ids.  enum_idx: (T, N_d) rows of candidate
    item indices shared by every example.  behaviors_per_example: length-R
    list of behavior feature lists, most recent first.  Accumulates the
    per-rank weighted Hamming terms in the same order as
    candidate_distances, so rankings agree with the per-example route.
    Returns (indices (R, k), distances (R, T)).
    """
    item_features = np.asarray(item_features)
    enum_idx = np.asarray(enum_idx)
    r_total, _, _ = item_features.shape
    t = enum_idx.shape[0]
    if not (1 <= k <= t):
        raise ContractError(f"cannot select top {k} of {t} candidates")
    lens = np.array([len(b) for b in behaviors_per_example], dtype=np.int64)
    if lens.size and lens.max() > family.n_banks:
        raise ContractError(f"{lens.max()} behaviors exceed {family.n_banks} hash banks")

    # Per-rank signatures for every example's history, grouped by rank so
    # each bank hashes one contiguous block.
    max_len = int(lens.max()) if lens.size else 0
    cums = np.cumsum(weights.values)
    sig_by_rank = []
    rows_by_rank = []
    for m in range(max_len):
        rows = np.flatnonzero(lens > m)
        feats = np.stack([np.asarray(behaviors_per_example[i][m]) for i in rows])
        h = _embed_perm_array(table, feats)
        sig_by_rank.append((h @ family.banks[m].T >= 0).astype(np.uint8))
        rows_by_rank.append(rows)

    dist = np.zeros((r_total, t), dtype=np.float64)
    dist[lens == 0] = family.n_bits / 2.0
    for start in range(0, r_total, chunk):
        rows = np.arange(start, min(start + chunk, r_total))
        feats = item_features[rows][:, enum_idx, :]  # (c, T, N_d, N_f)
        h = _embed_perm_array(table, feats)  # (c, T, D)
        for m in range(max_len):
            global_rows = rows_by_rank[m]
            in_chunk = (global_rows >= rows[0]) & (global_rows <= rows[-1])
            if not in_chunk.any():
                continue
            sel = global_rows[in_chunk]
            sig_p = (h[sel - rows[0]] @ family.banks[m].T >= 0).astype(np.uint8)
            counts = np.count_nonzero(sig_p != sig_by_rank[m][in_chunk][:, None, :], axis=2)
            w_m = weights.values[m] / cums[lens[sel] - 1]
            dist[sel] += w_m[:, None] * counts
    order = np.argsort(dist, axis=1, kind="stable")
    return order[:, :k].astype(np.int64), dist


def select_top_k(cand_features, behaviors, table, family, weights, k):
    """Indices of the K hash-nearest candidates, ascending distance.

    Ties resolve to the lower candidate index, so the result is invariant to
    how a caller shuffled equal-distance candidates into the input.
    """
    cand_features = np.asarray(cand_features)
    t = cand_features.shape[0]
    if not (1 <= k <= t):
        raise ContractError(f"cannot select top {k} of {t} candidates")
    d = candidate_distances(cand_features, behaviors, table, family, weights)
    order = np.argsort(d, kind="stable")
    return order[:k].astype(np.int64), d
