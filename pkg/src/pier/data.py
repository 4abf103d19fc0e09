"""Synthetic click world, logging simulator, and JSONL store.

The ground-truth click model is deliberately context-dependent: an item's
click probability depends on its base attractiveness, its display position,
the categories of the items shown before it, and how well it matches the
user's (possibly drifting) per-field interests.  That makes the true best
permutation computable by brute force, so hit-rate metrics have an oracle.

Logged point pCTRs intentionally do NOT come from the ground truth: a
point-wise baseline is fitted on a burn-in split and its (imperfect)
predictions drive an epsilon-greedy logging policy, the way a production
log would be biased by its own upstream model.
"""

import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError, FormatError
from .permgen import Permutation, enumeration_indices, perm_count
from .training import Dataset, TrainConfig, TrainingExample, train_pointwise_baseline

_TAG_WORLD = 31
_TAG_PREF = 32
_TAG_REQUESTS = 33
_TAG_CLICKS = 34
_TAG_POLICY = 35
_TAG_BASELINE = 36

_CLAMP = (0.01, 0.99)


@dataclass
class WorldConfig:
    """Knobs of the synthetic world; defaults give the benchmark world.

    Base attractiveness spans a narrow range while interest lifts are large,
    so which items a user clicks is decided mostly by current interests; the
    interests drift a little every segment.  A logging model fitted once on
    the burn-in slice therefore ages: its pCTRs stay informative about base
    rates but mispredict interests more the further a request sits from the
    burn-in."""

    n_users: int = 400
    base_low: float = 0.04
    base_high: float = 0.14
    cat_effect: float = 0.4  # sd (log scale) of global per-category appeal
    gamma_scale: float = 0.08  # sd of category-pair context effects
    decay_rate: float = 0.78  # per-position attention decay
    pref_strength: tuple = (2.6, 1.4)  # interest lift per attribute field
    pref_counts: tuple = (6, 8)  # favoured ids per attribute field
    drift_period: int = 6000  # requests per interest segment; 0 = static
    drift_swap: tuple = (2, 3)  # favoured ids replaced at each segment change
    epsilon: float = 0.2  # exploration rate of the logging policy
    burn_in: int = 3000  # requests used to fit the logging model
    m_behaviors: int = 8


def pointwise_world(**overrides):
    """World without context effects: no pair terms, no position decay, no
    interest drift.  Click probability factorizes over single items."""
    kw = dict(gamma_scale=0.0, decay_rate=1.0, drift_period=0)
    kw.update(overrides)
    return WorldConfig(**kw)


@dataclass
class GroundTruthModel:
    seed: int
    vocab_sizes: list
    n_users: int
    base: np.ndarray  # (n_items,) attractiveness in (0, 1)
    cat_effects: list  # per attribute field: (vocab_j,) appeal multiplier, mean 1
    gamma: np.ndarray  # (n_cat, n_cat), effect of preceding category on current
    attr_maps: list  # per attribute field: (n_items,) feature id of each item
    decay_rate: float
    pref_strength: tuple
    pref_counts: tuple
    drift_period: int
    drift_swap: tuple

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=np.float64)
        self.cat_effects = [np.asarray(q, dtype=np.float64) for q in self.cat_effects]
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.attr_maps = [np.asarray(m, dtype=np.int64) for m in self.attr_maps]
        self._pref_cache = {}

    def segment(self, request_id):
        return 0 if self.drift_period <= 0 else int(request_id) // self.drift_period

    def preferred_values(self, user_id, field_j, request_id):
        """Feature ids this user currently favours in attribute field j.

        Segment 0 is a fresh draw; each later segment keeps the previous
        set except for `drift_swap` members replaced from the complement,
        so consecutive segments overlap and very distant ones barely do.
        """
        seg = self.segment(request_id)
        key = (int(user_id), int(field_j), seg)
        hit = self._pref_cache.get(key)
        if hit is not None:
            return hit
        vocab = int(self.vocab_sizes[field_j])
        count = min(int(self.pref_counts[field_j - 1]), vocab)
        rng = np.random.default_rng(
            np.random.SeedSequence([self.seed, _TAG_PREF, key[0], key[1], seg])
        )
        if seg == 0:
            hit = np.sort(rng.choice(vocab, size=count, replace=False))
        else:
            prev = self.preferred_values(user_id, field_j, (seg - 1) * self.drift_period)
            swap = min(int(self.drift_swap[field_j - 1]), count, vocab - count)
            kept = prev[np.sort(rng.choice(count, size=count - swap, replace=False))]
            pool = np.setdiff1d(np.arange(vocab), prev)
            fresh = rng.choice(pool, size=swap, replace=False)
            hit = np.sort(np.concatenate([kept, fresh]))
        self._pref_cache[key] = hit
        return hit

    def user_fit(self, user_id, features, request_id):
        """Multiplicative interest lift for each item row in `features`."""
        features = np.asarray(features)
        fit = np.ones(features.shape[:-1], dtype=np.float64)
        for j, strength in enumerate(self.pref_strength, start=1):
            prefs = self.preferred_values(user_id, j, request_id)
            fit *= 1.0 + strength * np.isin(features[..., j], prefs)
        return fit

    def click_probs(self, perm_features, user_id, request_id):
        """True click probability per position: (..., N_d, N_f) -> (..., N_d).

        P = clamp(b_i * appeal * decay^t * (1 + sum of pair effects of the
        items shown before i) * user_fit, 0.01, 0.99), where appeal is the
        product of the item's global per-category multipliers.
        """
        perm_features = np.asarray(perm_features)
        n_d = perm_features.shape[-2]
        b = self.base[perm_features[..., 0]]
        for j, q in enumerate(self.cat_effects, start=1):
            b = b * q[perm_features[..., j]]
        cats = perm_features[..., 1]
        context = np.zeros(perm_features.shape[:-1], dtype=np.float64)
        for t in range(1, n_d):
            for s in range(t):
                context[..., t] += self.gamma[cats[..., s], cats[..., t]]
        decay = self.decay_rate ** np.arange(n_d)
        fit = self.user_fit(user_id, perm_features, request_id)
        raw = b * decay * (1.0 + context) * fit
        return np.clip(raw, _CLAMP[0], _CLAMP[1])

    def to_dict(self):
        return {
            "seed": self.seed,
            "vocab_sizes": [int(v) for v in self.vocab_sizes],
            "n_users": int(self.n_users),
            "base": [float(f"{x:.9g}") for x in self.base],
            "cat_effects": [[float(f"{x:.9g}") for x in q] for q in self.cat_effects],
            "gamma": [[float(f"{x:.9g}") for x in row] for row in self.gamma],
            "attr_maps": [[int(x) for x in m] for m in self.attr_maps],
            "decay_rate": float(self.decay_rate),
            "pref_strength": [float(s) for s in self.pref_strength],
            "pref_counts": [int(c) for c in self.pref_counts],
            "drift_period": int(self.drift_period),
            "drift_swap": [int(c) for c in self.drift_swap],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            seed=int(d["seed"]),
            vocab_sizes=list(d["vocab_sizes"]),
            n_users=int(d["n_users"]),
            base=np.asarray(d["base"], dtype=np.float64),
            cat_effects=[np.asarray(q, dtype=np.float64) for q in d["cat_effects"]],
            gamma=np.asarray(d["gamma"], dtype=np.float64),
            attr_maps=[np.asarray(m, dtype=np.int64) for m in d["attr_maps"]],
            decay_rate=float(d["decay_rate"]),
            pref_strength=tuple(d["pref_strength"]),
            pref_counts=tuple(d["pref_counts"]),
            drift_period=int(d["drift_period"]),
            drift_swap=tuple(d["drift_swap"]),
        )

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, separators=(",", ":"))
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def make_ground_truth(vocab_sizes, seed, world):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _TAG_WORLD]))
    n_items = int(vocab_sizes[0])
    n_attr = len(vocab_sizes) - 1
    if (
        len(world.pref_strength) != n_attr
        or len(world.pref_counts) != n_attr
        or len(world.drift_swap) != n_attr
    ):
        raise ContractError(
            f"{len(world.pref_strength)} preference strengths, {len(world.pref_counts)} "
            f"counts and {len(world.drift_swap)} swaps for {n_attr} attribute fields"
        )
    base = rng.uniform(world.base_low, world.base_high, size=n_items)
    # lognormal appeal with mean exactly 1 so cat_effect rescales nothing
    cat_effects = [
        np.exp(rng.normal(0.0, 1.0, size=int(vocab_sizes[j])) * world.cat_effect - world.cat_effect**2 / 2)
        for j in range(1, len(vocab_sizes))
    ]
    n_cat = int(vocab_sizes[1]) if n_attr >= 1 else 1
    gamma = rng.normal(0.0, 1.0, size=(n_cat, n_cat)) * world.gamma_scale
    attr_maps = [rng.integers(0, int(vocab_sizes[j]), size=n_items) for j in range(1, len(vocab_sizes))]
    return GroundTruthModel(
        seed=int(seed),
        vocab_sizes=list(vocab_sizes),
        n_users=world.n_users,
        base=base,
        cat_effects=cat_effects,
        gamma=gamma,
        attr_maps=attr_maps,
        decay_rate=world.decay_rate,
        pref_strength=tuple(world.pref_strength),
        pref_counts=tuple(world.pref_counts),
        drift_period=int(world.drift_period),
        drift_swap=tuple(world.drift_swap),
    )


def item_features(model, item_ids):
    """(...,) item ids -> (..., N_f) feature rows [id, attributes...]."""
    item_ids = np.asarray(item_ids)
    cols = [item_ids] + [m[item_ids] for m in model.attr_maps]
    return np.stack(cols, axis=-1)


def probs_for_permutations(model, items_feats, enum_idx, user_id, request_id):
    """True click probabilities for many arrangements of one candidate list."""
    perm_feats = np.asarray(items_feats)[np.asarray(enum_idx)]
    return model.click_probs(perm_feats, user_id, request_id)


def oracle_best_permutation(cands, model, n_display, user_id=0, request_id=0):
    """Argmax of total true click probability over all arrangements.

    Ties resolve to the earliest arrangement in enumeration order.
    """
    return _oracle_best(cands.features, model, user_id, request_id, n_display)


def _oracle_best(items_feats, model, user_id, request_id, n_display):
    n_o = items_feats.shape[0]
    total = perm_count(n_o, n_display)
    if total > 720:
        raise ContractError(f"{total} arrangements exceed the 720 oracle guard")
    enum_idx = enumeration_indices(n_o, n_display)
    probs = probs_for_permutations(model, items_feats, enum_idx, user_id, request_id)
    best = int(np.argmax(probs.sum(axis=-1)))
    return Permutation(item_indices=tuple(int(i) for i in enum_idx[best]))


def best_permutation_for_record(record, model, n_display):
    return _oracle_best(
        np.asarray(record.items_features), model, record.user_id, record.request_id, n_display
    )


def generate_synthetic_dataset(
    n_requests,
    n_candidates,
    n_display,
    n_fields,
    vocab_sizes,
    seed,
    world=None,
    baseline_config=None,
):
    """Simulate a click log.  Returns (Dataset, GroundTruthModel).

    Chronological per request: sample a user and candidate items, rank them
    by the logging model's pCTR, pick the display greedily (or uniformly at
    random with probability epsilon), draw clicks from the ground truth,
    then update the user's clicked-permutation history.  The logging model
    starts from a burn-in fit and is refitted on the previous segment's log
    at every interest-segment boundary, so its pCTRs always lag the drifting
    interests by about one segment.
    """
    if min(n_requests, n_candidates, n_display, n_fields) < 1:
        raise ContractError("all generation parameters must be positive")
    if n_display > n_candidates:
        raise ContractError(f"cannot display {n_display} of {n_candidates} candidates")
    if len(vocab_sizes) != n_fields:
        raise ContractError(f"{len(vocab_sizes)} vocab sizes for {n_fields} fields")
    world = world or WorldConfig()
    model = make_ground_truth(vocab_sizes, seed, world)

    baseline = _fit_logging_model(model, world, n_candidates, n_display, seed, baseline_config)

    rng_req = np.random.default_rng(np.random.SeedSequence([int(seed), _TAG_REQUESTS]))
    rng_click = np.random.default_rng(np.random.SeedSequence([int(seed), _TAG_CLICKS]))
    rng_policy = np.random.default_rng(np.random.SeedSequence([int(seed), _TAG_POLICY]))

    users = rng_req.integers(0, world.n_users, size=n_requests)
    cand_ids = np.stack([
        rng_req.choice(vocab_sizes[0], size=n_candidates, replace=False) for _ in range(n_requests)
    ])
    feats_all = item_features(model, cand_ids)  # (n, N_o, N_f)
    period = world.drift_period if world.drift_period > 0 else n_requests

    records = []
    history = {u: [] for u in range(world.n_users)}
    true_prob_sum = 0.0
    for seg_start in range(0, n_requests, period):
        seg_end = min(seg_start + period, n_requests)
        pctr_seg = _batched_pointwise(baseline, feats_all[seg_start:seg_end], users[seg_start:seg_end])
        for r in range(seg_start, seg_end):
            order = np.argsort(-pctr_seg[r - seg_start], kind="stable")
            feats = feats_all[r][order]
            pctr = pctr_seg[r - seg_start][order]
            if rng_policy.uniform() < world.epsilon:
                displayed = rng_policy.permutation(n_candidates)[:n_display]
            else:
                displayed = np.arange(n_display)
            shown = feats[displayed]
            p_true = model.click_probs(shown, users[r], r)
            clicks = (rng_click.uniform(size=n_display) < p_true).astype(np.int64)
            true_prob_sum += float(p_true.sum())
            user_hist = history[int(users[r])]
            records.append(
                TrainingExample(
                    request_id=r,
                    user_id=int(users[r]),
                    items_features=feats,
                    point_pctr=pctr,
                    displayed=displayed.astype(np.int64),
                    clicks=clicks,
                    behaviors=list(user_hist[: world.m_behaviors]),
                )
            )
            if clicks.any():
                user_hist.insert(0, shown.copy())
                del user_hist[world.m_behaviors :]
        if seg_end < n_requests:
            segment = seg_end // period
            baseline = _refit_logging_model(
                records[seg_start:seg_end], baseline, model, world, seed, segment, baseline_config
            )

    meta = {
        "n_requests": int(n_requests),
        "n_candidates": int(n_candidates),
        "n_display": int(n_display),
        "n_fields": int(n_fields),
        "vocab_sizes": [int(v) for v in vocab_sizes],
        "n_users": int(world.n_users),
        "m_behaviors": int(world.m_behaviors),
        "seed": int(seed),
        "mean_true_ctr": true_prob_sum / (n_requests * n_display),
    }
    return Dataset(records=records, meta=meta), model


def _fit_logging_model(model, world, n_candidates, n_display, seed, baseline_config):
    """Point-wise model fitted on a burn-in split logged uniformly at random."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _TAG_BASELINE]))
    n = int(world.burn_in)
    records = []
    for r in range(n):
        user = int(rng.integers(0, world.n_users))
        ids = rng.choice(model.vocab_sizes[0], size=n_candidates, replace=False)
        feats = item_features(model, ids)
        displayed = rng.permutation(n_candidates)[:n_display]
        p_true = model.click_probs(feats[displayed], user, 0)
        clicks = (rng.uniform(size=n_display) < p_true).astype(np.int64)
        records.append(
            TrainingExample(
                request_id=r,
                user_id=user,
                items_features=feats,
                point_pctr=np.full(n_candidates, 0.5),
                displayed=displayed,
                clicks=clicks,
                behaviors=[],
            )
        )
    meta = {
        "n_display": n_display,
        "n_candidates": n_candidates,
        "n_fields": len(model.vocab_sizes),
        "vocab_sizes": list(model.vocab_sizes),
        "n_users": model.n_users,
    }
    cfg = baseline_config or _policy_train_config(_derive_seed(seed, _TAG_BASELINE))
    baseline, _ = train_pointwise_baseline(Dataset(records=records, meta=meta), cfg)
    return baseline


def _policy_train_config(seed):
    # small batches and several passes: per-user interest embeddings need a
    # few hundred optimizer steps per refit to move off their init
    return TrainConfig(seed=seed, baseline_epochs=4, learning_rate=3e-3, batch_size=256)


def _refit_logging_model(seg_records, baseline, model, world, seed, segment, baseline_config):
    """Update the logging model on one segment's freshly written log.

    Warm-starts from the serving model, the way a production ranker is
    retrained incrementally: knowledge of stable base rates accumulates
    while the latest segment's clicks pull the interest estimates forward.
    """
    meta = {
        "n_display": len(seg_records[0].displayed),
        "n_candidates": len(seg_records[0].point_pctr),
        "n_fields": len(model.vocab_sizes),
        "vocab_sizes": list(model.vocab_sizes),
        "n_users": model.n_users,
    }
    cfg = baseline_config or _policy_train_config(0)
    cfg = replace(cfg, seed=_derive_seed(seed, _TAG_BASELINE, segment))
    baseline, _ = train_pointwise_baseline(
        Dataset(records=list(seg_records), meta=meta), cfg, model=baseline
    )
    return baseline


def _derive_seed(seed, *tags):
    return int(np.random.SeedSequence([int(seed), *[int(t) for t in tags]]).generate_state(1)[0])


def _batched_pointwise(baseline, feats_all, users, chunk=4096):
    n, n_o, n_f = feats_all.shape
    flat = feats_all.reshape(n * n_o, n_f)
    user_rep = np.repeat(np.asarray(users), n_o)
    out = np.empty(n * n_o, dtype=np.float64)
    for start in range(0, len(flat), chunk):
        sl = slice(start, start + chunk)
        out[sl] = baseline.predict_proba(flat[sl], user_rep[sl])
    # keep logged scores strictly inside (0, 1) even after 9-digit rounding
    return np.clip(out.reshape(n, n_o), 1e-6, 1.0 - 1e-6)


# ---------------------------------------------------------------------------
# JSONL store


def _fmt(x):
    return float(f"{float(x):.9g}")


def record_to_dict(rec):
    return {
        "request_id": int(rec.request_id),
        "user_id": int(rec.user_id),
        "items": [
            {
                "features": [int(v) for v in row],
                "point_pctr": _fmt(p),
            }
            for row, p in zip(rec.items_features, rec.point_pctr)
        ],
        "displayed": [int(i) for i in rec.displayed],
        "clicks": [int(c) for c in rec.clicks],
        "behaviors": [
            {
                "items_features": [[int(v) for v in row] for row in beh],
                "recency_rank": m,
            }
            for m, beh in enumerate(rec.behaviors)
        ],
    }


def write_jsonl(dataset, path):
    """One request per line, keys in fixed order, floats at 9 significant digits."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in dataset.records:
            fh.write(json.dumps(record_to_dict(rec), separators=(",", ":")))
            fh.write("\n")


_REQUIRED_KEYS = ("request_id", "user_id", "items", "displayed", "clicks", "behaviors")


def _parse_record(obj, line_no, vocab_sizes):
    for key in _REQUIRED_KEYS:
        if key not in obj:
            raise FormatError(f"line {line_no}: missing field {key!r}")
    items = obj["items"]
    if not items:
        raise FormatError(f"line {line_no}: empty items")
    feats = []
    pctr = []
    for it in items:
        if "features" not in it or "point_pctr" not in it:
            raise FormatError(f"line {line_no}: item missing features/point_pctr")
        feats.append(it["features"])
        pctr.append(it["point_pctr"])
    feats = np.asarray(feats, dtype=np.int64)
    if feats.ndim != 2:
        raise FormatError(f"line {line_no}: ragged item features")
    if vocab_sizes is not None:
        if feats.shape[1] != len(vocab_sizes):
            raise FormatError(
                f"line {line_no}: {feats.shape[1]} features per item, expected {len(vocab_sizes)}"
            )
        for j, vocab in enumerate(vocab_sizes):
            col = feats[:, j]
            if ((col < 0) | (col >= vocab)).any():
                bad = int(col[(col < 0) | (col >= vocab)][0])
                raise FormatError(f"line {line_no}: feature id {bad} out of range for field {j}")
    displayed = np.asarray(obj["displayed"], dtype=np.int64)
    clicks = np.asarray(obj["clicks"], dtype=np.int64)
    if displayed.shape != clicks.shape:
        raise FormatError(f"line {line_no}: displayed and clicks lengths differ")
    if ((displayed < 0) | (displayed >= len(items))).any():
        raise FormatError(f"line {line_no}: displayed index out of range")
    if len(np.unique(displayed)) != len(displayed):
        raise FormatError(f"line {line_no}: displayed indices repeat")
    if ((clicks != 0) & (clicks != 1)).any():
        raise FormatError(f"line {line_no}: clicks must be 0 or 1")
    behaviors = []
    ranks = []
    for beh in obj["behaviors"]:
        if "items_features" not in beh or "recency_rank" not in beh:
            raise FormatError(f"line {line_no}: behavior missing items_features/recency_rank")
        behaviors.append(np.asarray(beh["items_features"], dtype=np.int64))
        ranks.append(beh["recency_rank"])
    if ranks and list(ranks) != list(range(len(ranks))):
        raise FormatError(f"line {line_no}: recency ranks must be 0..{len(ranks) - 1} in order")
    return TrainingExample(
        request_id=int(obj["request_id"]),
        user_id=int(obj["user_id"]),
        items_features=feats,
        point_pctr=np.asarray(pctr, dtype=np.float64),
        displayed=displayed,
        clicks=clicks,
        behaviors=behaviors,
    )


def load_jsonl(path, meta=None):
    """Read a request log; any malformed line fails with its line number."""
    vocab = list(meta["vocab_sizes"]) if meta and "vocab_sizes" in meta else None
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"line {line_no}: invalid JSON ({e.msg})") from None
            records.append(_parse_record(obj, line_no, vocab))
    if meta is None:
        meta = {}
        if records:
            meta = {
                "n_display": int(len(records[0].displayed)),
                "n_candidates": int(records[0].items_features.shape[0]),
                "n_fields": int(records[0].items_features.shape[1]),
            }
    return Dataset(records=records, meta=dict(meta))
