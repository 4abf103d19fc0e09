"""Feature embeddings and the sinusoidal position table.

Items are tuples of categorical feature ids, one id per field.  Each field
owns a trainable (vocab, D) matrix; embedding a permutation of N_d items
yields one (N_d, D) slab per field.  The slabs are gathered views into the
live tables, so an embedding update is visible on the very next lookup.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import numerics as nm
from .errors import ContractError, FeatureLookupError


@dataclass
class EmbeddingTable:
    fields: list  # one nm.Tensor of shape (vocab_j, D) per field
    dim: int

    @property
    def n_fields(self):
        return len(self.fields)

    @property
    def vocab_sizes(self):
        return [int(f.shape[0]) for f in self.fields]


@dataclass
class PermEmbedding:
    """Embedded permutation, stored as per-field (N_d, D) slabs."""

    fields: list  # nm.Tensor per field

    @property
    def n_items(self):
        return int(self.fields[0].shape[0])

    def slab(self, j):
        return self.fields[j]

    def as_array(self):
        """(N_d, N_f, D) view of the current values, detached."""
        return np.stack([f.data for f in self.fields], axis=1)

    def item_row(self, i):
        """Concatenated field vectors of item i, detached."""
        return np.concatenate([f.data[i] for f in self.fields])


def make_table(vocab_sizes, dim, seed, dtype=np.float64):
    """Fresh trainable tables, each entry uniform in [-1/sqrt(D), +1/sqrt(D)]."""
    if dim % 2 != 0 or dim < 2:
        raise ContractError(f"embedding dim must be even and >= 2, got {dim}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    bound = 1.0 / np.sqrt(dim)
    fields = [
        nm.parameter(rng.uniform(-bound, bound, size=(v, dim)).astype(dtype), name=f"embedding.field_{j}")
        for j, v in enumerate(vocab_sizes)
    ]
    return EmbeddingTable(fields=fields, dim=dim)


def check_feature_ids(table, features):
    """Validate an integer (..., N_f) feature array against the vocab."""
    features = np.asarray(features)
    if features.shape[-1] != table.n_fields:
        raise ContractError(
            f"feature tuple has {features.shape[-1]} fields, table has {table.n_fields}"
        )
    for j, vocab in enumerate(table.vocab_sizes):
        col = features[..., j]
        bad = (col < 0) | (col >= vocab)
        if bad.any():
            offender = int(col[bad].flat[0])
            raise FeatureLookupError(f"feature id {offender} out of range for field {j} (vocab {vocab})")


def embed_features(table, features):
    """Per-field gather: (..., N_f) ids -> list of (..., D) tensors."""
    features = np.asarray(features)
    check_feature_ids(table, features)
    return [nm.gather_rows(table.fields[j], features[..., j]) for j in range(table.n_fields)]


def embed_permutation(features, table):
    """Embed one permutation's (N_d, N_f) feature matrix."""
    features = np.asarray(features)
    if features.ndim != 2:
        raise ContractError(f"expected (N_d, N_f) feature matrix, got shape {features.shape}")
    return PermEmbedding(fields=embed_features(table, features))


@lru_cache(maxsize=32)
def position_encoding(n_positions, dim):
    """Sinusoidal position table: even columns sin, odd columns cos.

    Column pair (2d, 2d+1) shares the rate 1/10000^(2d/dim).  Cached and
    bit-identical across calls; odd dim has no pairing and is rejected.
    """
    if dim % 2 != 0 or dim < 2:
        raise ContractError(f"position encoding needs even dim >= 2, got {dim}")
    if n_positions < 1:
        raise ContractError(f"position encoding needs >= 1 position, got {n_positions}")
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    rates = np.power(10000.0, -np.arange(0, dim, 2, dtype=np.float64) / dim)
    pe = np.empty((n_positions, dim), dtype=np.float64)
    pe[:, 0::2] = np.sin(pos * rates)
    pe[:, 1::2] = np.cos(pos * rates)
    pe.setflags(write=False)
    return pe
