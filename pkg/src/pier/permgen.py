"""Candidate permutation generators.

Three ways to propose ordered slates of N_d items out of a ranked candidate
list: exhaustive enumeration, beam search over cumulative point scores, and
uniform random sampling.  All of them emit index sequences into the candidate
set, never item payloads.
"""

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ContractError

# Full enumeration grows factorially; 10 candidates is the documented ceiling
# unless the caller opts in explicitly.
MAX_SAFE_CANDIDATES = 10


@dataclass(frozen=True)
class Permutation:
    item_indices: tuple

    def __post_init__(self):
        idx = self.item_indices
        if len(idx) == 0:
            raise ContractError("permutation must contain at least one item")
        if len(set(idx)) != len(idx):
            raise ContractError(f"permutation repeats an item: {idx}")
        if min(idx) < 0:
            raise ContractError(f"negative item index in permutation: {idx}")

    def __len__(self):
        return len(self.item_indices)


@dataclass
class CandidateSet:
    """Ranked candidate items: (N_o, N_f) feature ids plus point pCTRs."""

    features: np.ndarray
    point_pctr: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.point_pctr = np.asarray(self.point_pctr, dtype=np.float64)
        if self.features.ndim != 2:
            raise ContractError(f"candidate features must be (N_o, N_f), got {self.features.shape}")
        if self.point_pctr.shape != (self.features.shape[0],):
            raise ContractError(
                f"{self.features.shape[0]} candidates but {self.point_pctr.shape[0]} point scores"
            )
        if not ((self.point_pctr > 0.0) & (self.point_pctr < 1.0)).all():
            raise ContractError("point pCTRs must lie strictly inside (0, 1)")

    @property
    def n_items(self):
        return int(self.features.shape[0])


@dataclass
class BeamResult:
    permutations: list
    truncated: bool  # True when fewer than K sequences are reachable


def perm_count(n_items, n_display):
    """Number of ordered arrangements: n! / (n - d)!."""
    if n_display < 1 or n_display > n_items:
        raise ContractError(f"cannot display {n_display} of {n_items} candidates")
    return math.perm(n_items, n_display)


def _check_enumeration_guard(n_items, allow_large):
    if n_items > MAX_SAFE_CANDIDATES and not allow_large:
        raise ContractError(
            f"enumerating permutations of {n_items} candidates grows factorially; "
            f"pass allow_large=True to override the {MAX_SAFE_CANDIDATES}-candidate guard"
        )


@lru_cache(maxsize=16)
def enumeration_indices(n_items, n_display):
    """(T, N_d) int array of all arrangements in lexicographic order."""
    rows = list(itertools.permutations(range(n_items), n_display))
    return np.array(rows, dtype=np.int32)


def enumerate_permutations(cands, n_display, allow_large=False):
    _check_enumeration_guard(cands.n_items, allow_large)
    rows = enumeration_indices(cands.n_items, n_display)
    return [Permutation(tuple(int(i) for i in row)) for row in rows]


def _demoted_order(pool):
    """Rank (seq, score) pairs for pruning.

    Cumulative scoring cannot tell reorderings of one item set apart, so each
    equal-score group keeps its lexicographically smallest sequence as the
    representative and the rest are demoted behind every representative.
    Within a demotion tier: score descending, then lexicographic sequence."""
    groups = {}
    for seq, score in pool:
        groups.setdefault(score, []).append(seq)
    ranked = []
    for score, seqs in groups.items():
        for dup_rank, seq in enumerate(sorted(seqs)):
            ranked.append((dup_rank, -score, seq))
    ranked.sort()
    return [(seq, -neg) for _, neg, seq in ranked]


def beam_search_generate(cands, n_display, k):
    """Beam search by cumulative point pCTR with beam width K.

    Scores ignore order, so every reordering of a kept item set ties; the
    tie-break keeps the lexicographically smallest ordering ahead and demotes
    the duplicates, which preserves exhaustiveness for K = full count.
    Returns all reachable sequences flagged truncated when K exceeds them.
    """
    if k < 1:
        raise ContractError(f"beam width must be >= 1, got {k}")
    total = perm_count(cands.n_items, n_display)
    pctr = [float(v) for v in cands.point_pctr]
    beams = [((), 0.0)]
    for _ in range(n_display):
        pool = []
        for seq, _ in beams:
            for i in range(cands.n_items):
                if i not in seq:
                    ext = seq + (i,)
                    # fsum is order-insensitive, so reorderings of one item
                    # set really do tie bit-for-bit.
                    pool.append((ext, math.fsum(pctr[j] for j in ext)))
        beams = _demoted_order(pool)[:k]
    final = sorted(beams, key=lambda sp: (-sp[1], sp[0]))
    perms = [Permutation(seq) for seq, _ in final]
    return BeamResult(permutations=perms, truncated=k > total)


def random_generate(cands, n_display, k, seed, allow_large=False):
    """K arrangements sampled uniformly without replacement, seeded."""
    total = perm_count(cands.n_items, n_display)
    if k > total:
        raise ContractError(f"asked for {k} samples but only {total} arrangements exist")
    _check_enumeration_guard(cands.n_items, allow_large)
    rows = enumeration_indices(cands.n_items, n_display)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    picks = rng.choice(total, size=k, replace=False)
    return [Permutation(tuple(int(i) for i in rows[p])) for p in picks]
