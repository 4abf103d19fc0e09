"""Two-phase optimization of the re-ranking model.

Phase one pretrains the evaluator with a position-summed BCE on the
permutations users actually saw.  Phase two trains jointly: per batch the
hash selector picks the K candidates nearest each user's history, an equal
number of unselected candidates is sampled, and a contrastive term pushes
the mean predicted quality of the two groups apart.  Gradients reach the
evaluator parameters and the shared embedding table; hash banks and the
position encoding stay frozen.

Everything is seeded through named SeedSequence streams, so a joint run
with alpha = 0 is bit-identical to continuing pretraining: the data-order
stream depends only on (seed, epoch index), and the unselected-sampler
stream is consumed only when the contrastive term is active.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import fpsm
from . import numerics as nm
from . import ocpm as oc
from .embedding import EmbeddingTable, embed_features, make_table
from .errors import ContractError, NumericError
from .permgen import CandidateSet, enumeration_indices

# Independent named RNG streams, all derived from TrainConfig.seed.
_TAG_TABLE = 11
_TAG_PARAMS = 12
_TAG_HASH = 13
_TAG_ORDER = 14
_TAG_SAMPLER = 15
_TAG_BASE_TABLE = 16
_TAG_BASE_MLP = 17
_TAG_BASE_ORDER = 18


def _stream_seed(seed, *tags):
    return int(np.random.SeedSequence([int(seed)] + [int(t) for t in tags]).generate_state(1)[0])


def _stream_rng(seed, *tags):
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [int(t) for t in tags]))


@dataclass
class TrainConfig:
    alpha: float = 0.1
    k: int = 100  # selected count during joint training; serving budget
    learning_rate: float = 1e-3
    batch_size: int = 1024
    pretrain_epochs: int = 3
    joint_epochs: int = 2
    seed: int = 0
    dim: int = 8
    m_behaviors: int = 8
    hash_bits: int = 48
    gamma: float = 0.8
    chunk_size: int = 256
    signed_contrast: bool = False  # -sum(max(diff,0)^2) instead of -sum(diff^2)
    dtype: str = "float32"
    hidden_field: tuple = oc.HIDDEN_FIELD_MLP
    hidden_context: tuple = oc.HIDDEN_CONTEXT_MLP
    hidden_att: tuple = oc.HIDDEN_ATT_MLP
    hidden_head: tuple = oc.HIDDEN_HEAD_MLP
    use_oau: bool = True
    use_tau: bool = True
    baseline_hidden: tuple = (64, 32)
    baseline_epochs: int = 3

    def __post_init__(self):
        if self.alpha < 0:
            raise ContractError(f"alpha must be >= 0, got {self.alpha}")
        if self.k < 1:
            raise ContractError(f"k must be >= 1, got {self.k}")


@dataclass
class TrainingExample:
    request_id: int
    user_id: int
    items_features: np.ndarray  # (N_o, N_f)
    point_pctr: np.ndarray  # (N_o,)
    displayed: np.ndarray  # (N_d,) indices into the candidate list
    clicks: np.ndarray  # (N_d,) binary
    behaviors: list  # [(N_d, N_f)] clicked permutations, most recent first

    @property
    def candidate_set(self):
        return CandidateSet(features=self.items_features, point_pctr=self.point_pctr)


@dataclass
class Dataset:
    records: list
    meta: dict  # n_display, n_candidates, n_fields, vocab_sizes, n_users


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def init_adam(params):
    return AdamState(
        m={p.name: np.zeros_like(p.data) for p in params},
        v={p.name: np.zeros_like(p.data) for p in params},
    )


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update in the parameters' own dtype."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p in params:
        g = grads[p]
        g = g.data if isinstance(g, nm.Tensor) else g
        if g.dtype != p.data.dtype:
            g = g.astype(p.data.dtype)
        m = state.m[p.name]
        v = state.v[p.name]
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class ModelState:
    table: EmbeddingTable
    params: oc.OcpmParams
    family: fpsm.HashFamily
    time_weights: fpsm.TimeWeights
    meta: dict
    opt: AdamState = None
    epochs_done: int = 0

    def parameters(self):
        return list(self.table.fields) + self.params.all_parameters()

    def named_parameters(self):
        return [(t.name, t) for t in self.table.fields] + self.params.named_parameters()


def init_model_state(data_meta, config):
    dtype = np.dtype(config.dtype)
    vocab_sizes = list(data_meta["vocab_sizes"])
    table = make_table(vocab_sizes, config.dim, seed=_stream_seed(config.seed, _TAG_TABLE), dtype=dtype)
    params = oc.init_ocpm_params(
        n_fields=len(vocab_sizes),
        n_display=int(data_meta["n_display"]),
        dim=config.dim,
        seed=_stream_seed(config.seed, _TAG_PARAMS),
        hidden_field=tuple(config.hidden_field),
        hidden_context=tuple(config.hidden_context),
        hidden_att=tuple(config.hidden_att),
        hidden_head=tuple(config.hidden_head),
        dtype=dtype,
        use_oau=config.use_oau,
        use_tau=config.use_tau,
    )
    hash_seed = _stream_seed(config.seed, _TAG_HASH)
    family = fpsm.make_hash_family(config.m_behaviors, config.hash_bits, config.dim, seed=hash_seed)
    weights = fpsm.time_weights(config.m_behaviors, config.gamma)
    meta = {
        "dim": config.dim,
        "n_fields": len(vocab_sizes),
        "n_display": int(data_meta["n_display"]),
        "n_candidates": int(data_meta["n_candidates"]),
        "m_behaviors": config.m_behaviors,
        "hash_bits": config.hash_bits,
        "hash_seed": hash_seed,
        "gamma": config.gamma,
        "vocab_sizes": vocab_sizes,
    }
    state = ModelState(table=table, params=params, family=family, time_weights=weights, meta=meta)
    state.opt = init_adam(state.parameters())
    return state


# ---------------------------------------------------------------------------
# Losses


def _pred_tensor(pred):
    return pred.pctr if isinstance(pred, oc.ListwisePrediction) else pred


def _bce_terms(pred, labels):
    # Logs run in 64-bit so the 1e-12 clamp survives float32 predictions.
    y = np.asarray(labels, dtype=np.float64)
    p = nm.clip(nm.cast(pred, np.float64), 1e-12, 1.0 - 1e-12)
    yt = nm.tensor(y)
    one_minus = nm.tensor(1.0 - y)
    ll = nm.add(nm.mul(yt, nm.log(p)), nm.mul(one_minus, nm.log(nm.sub(nm.tensor(1.0), p))))
    return nm.neg(ll)


def loss_bce(pred, labels):
    """Position-summed binary cross entropy for one permutation."""
    pred = _pred_tensor(pred)
    labels = np.asarray(labels)
    if pred.shape != labels.shape:
        raise ContractError(f"prediction shape {pred.shape} != label shape {labels.shape}")
    return nm.sum_all(_bce_terms(pred, labels))


def bce_rows(pred, labels):
    """Per-example BCE sums: (R, N_d) predictions -> (R,) losses."""
    return nm.sum_axis(_bce_terms(pred, np.asarray(labels)), axis=-1)


def loss_contrastive(selected_preds, unselected_preds, signed=False):
    """Negative sum of squared gaps between index-aligned group means."""
    if len(selected_preds) != len(unselected_preds):
        raise ContractError(
            f"{len(selected_preds)} selected vs {len(unselected_preds)} unselected predictions"
        )
    if not selected_preds:
        raise ContractError("contrastive loss needs at least one pair")
    ms = nm.mean_axis(nm.stack([_pred_tensor(p) for p in selected_preds], axis=0), axis=-1)
    mu = nm.mean_axis(nm.stack([_pred_tensor(p) for p in unselected_preds], axis=0), axis=-1)
    d = nm.sub(ms, mu)
    if signed:
        d = nm.relu(d)
    return nm.neg(nm.sum_all(nm.mul(d, d)))


def combined_loss(l1, l2, alpha):
    """Batch mean of l1 + alpha * l2 over per-example loss vectors."""
    if alpha < 0:
        raise ContractError(f"alpha must be >= 0, got {alpha}")
    if l2 is None:
        return nm.mean_all(l1)
    if l1.shape != l2.shape:
        raise ContractError(f"loss vectors disagree: {l1.shape} vs {l2.shape}")
    return nm.mean_all(nm.add(l1, nm.scale(l2, float(alpha))))


# ---------------------------------------------------------------------------
# Batch assembly


def _display_arrays(records):
    ids = np.stack([r.items_features[np.asarray(r.displayed)] for r in records])
    labels = np.stack([np.asarray(r.clicks, dtype=np.float64) for r in records])
    scores = np.stack([np.asarray(r.point_pctr)[np.asarray(r.displayed)] for r in records])
    return ids, labels, scores


def _behavior_lists(records, m):
    return [list(r.behaviors[:m]) for r in records]


def display_loss_rows(state, records, m_behaviors):
    """Per-example BCE on the displayed permutations of a record chunk."""
    ids, labels, scores = _display_arrays(records)
    bids, owner = oc.pack_behaviors(_behavior_lists(records, m_behaviors))
    pred = oc.predict_batch(state.table, state.params, ids, scores, bids, owner)
    return bce_rows(pred, labels)


def contrastive_loss_rows(state, records, sel_idx, uns_idx, enum_idx, signed=False):
    """Per-example contrastive term for a chunk.

    sel_idx / uns_idx: (c, K) rows into enum_idx chosen for each example.
    One forward pass covers both groups; behavior contexts are computed
    once per example and shared across its 2K permutations.
    """
    c, k = sel_idx.shape
    n_d = enum_idx.shape[1]
    params = state.params

    cand_rows = np.concatenate([sel_idx, uns_idx], axis=1)  # (c, 2K)
    item_idx = np.take(enum_idx, cand_rows, axis=0)  # (c, 2K, N_d)
    items = np.stack([r.items_features for r in records])
    pctr = np.stack([np.asarray(r.point_pctr) for r in records])
    ar = np.arange(c)[:, None, None]
    perm_ids = items[ar, item_idx]  # (c, 2K, N_d, N_f)
    scores = pctr[ar, item_idx]  # (c, 2K, N_d)

    n_rows = c * 2 * k
    flat_ids = perm_ids.reshape(n_rows, n_d, items.shape[-1])
    tfields = embed_features(state.table, flat_ids)
    u = oc.oau_forward_batch(tfields, params)

    beh_lists = _behavior_lists(records, state.meta["m_behaviors"])
    lens = np.array([len(b) for b in beh_lists], dtype=np.int64)
    bids, _ = oc.pack_behaviors(beh_lists)
    if bids is not None and params.use_tau:
        ub = oc.oau_forward_batch(embed_features(state.table, bids), params)
        offsets = np.concatenate([[0], np.cumsum(lens)[:-1]])
        per_row = np.repeat(lens, 2 * k)  # behaviors per permutation row
        pair_perm = np.repeat(np.arange(n_rows), per_row)
        seg_start = np.cumsum(per_row) - per_row
        within = np.arange(per_row.sum()) - np.repeat(seg_start, per_row)
        pair_beh = np.repeat(np.repeat(offsets, 2 * k), per_row) + within
        ub_exp = nm.gather_rows(ub, pair_beh)
        w = oc.tau_forward_batch(u, ub_exp, pair_perm, n_rows, params)
    else:
        w = nm.tensor(np.zeros((n_rows, params.d_u), dtype=u.dtype))

    pred = oc.cpu_forward_batch(u, w, scores.reshape(n_rows, n_d), tfields, params)
    means = nm.mean_axis(pred, axis=-1)  # (n_rows,)
    base = np.arange(c)[:, None] * 2 * k
    ms = nm.reshape(nm.gather_rows(means, (base + np.arange(k)).ravel()), (c, k))
    mu = nm.reshape(nm.gather_rows(means, (base + k + np.arange(k)).ravel()), (c, k))
    d = nm.sub(ms, mu)
    if signed:
        d = nm.relu(d)
    return nm.neg(nm.sum_axis(nm.mul(d, d), axis=1))


def batch_loss(state, records, config, sel_idx=None, uns_idx=None, enum_idx=None, scale_n=None):
    """Scalar chunk loss plus the per-example loss vectors.

    scale_n divides the chunk sum so accumulating chunk gradients equals a
    full-batch mean; it defaults to the chunk length.
    """
    n = float(scale_n if scale_n is not None else len(records))
    l1 = display_loss_rows(state, records, state.meta["m_behaviors"])
    l2 = None
    if sel_idx is not None:
        l2 = contrastive_loss_rows(state, records, sel_idx, uns_idx, enum_idx, config.signed_contrast)
        total = nm.add(nm.sum_all(l1), nm.scale(nm.sum_all(l2), float(config.alpha)))
    else:
        total = nm.sum_all(l1)
    return nm.scale(total, 1.0 / n), l1, l2


def _check_finite(l1, records, step):
    bad = ~np.isfinite(l1.data)
    if bad.any():
        rid = records[int(np.flatnonzero(bad)[0])].request_id
        raise NumericError(f"non-finite loss at step {step}: request {rid}")


def _run_batch(state, records, config, step, selection=None):
    params = state.parameters()
    acc = {}
    total = 0.0
    for start in range(0, len(records), config.chunk_size):
        chunk = records[start : start + config.chunk_size]
        if selection is not None:
            sel, uns, enum_idx = selection
            sl = slice(start, start + len(chunk))
            scalar, l1, _ = batch_loss(
                state, chunk, config, sel[sl], uns[sl], enum_idx, scale_n=len(records)
            )
        else:
            scalar, l1, _ = batch_loss(state, chunk, config, scale_n=len(records))
        _check_finite(l1, chunk, step)
        if not np.isfinite(scalar.data):
            raise NumericError(f"non-finite loss at step {step}: request {chunk[0].request_id}")
        grads = nm.backward(scalar, params)
        for p in params:
            g = grads[p].data
            acc[p] = g if p not in acc else acc[p] + g
        total += float(scalar.data)
    adam_step(params, acc, state.opt, config.learning_rate)
    return total


def _epoch_order(config, epoch_index, n):
    return _stream_rng(config.seed, _TAG_ORDER, epoch_index).permutation(n)


def pretrain_ocpm(dataset, config, state=None):
    """Phase one: BCE on displayed permutations.  Returns (state, curve)."""
    records = dataset.records
    if not records:
        raise ContractError("cannot train on an empty dataset")
    if state is None:
        state = init_model_state(dataset.meta, config)
    curve = []
    step = 0
    for _ in range(config.pretrain_epochs):
        order = _epoch_order(config, state.epochs_done, len(records))
        for start in range(0, len(order), config.batch_size):
            batch = [records[i] for i in order[start : start + config.batch_size]]
            curve.append(_run_batch(state, batch, config, step))
            step += 1
        state.epochs_done += 1
    return state, curve


def _sample_unselected(sel_idx, total, k, rng):
    uns = np.empty_like(sel_idx)
    for i in range(sel_idx.shape[0]):
        mask = np.ones(total, dtype=bool)
        mask[sel_idx[i]] = False
        uns[i] = rng.choice(np.flatnonzero(mask), size=k, replace=False)
    return uns


def joint_train(dataset, state, config):
    """Phase two: Loss1 on displays plus the contrastive selection loss.

    With alpha = 0 the selection and sampling work is skipped outright;
    because the sampler has its own RNG stream this is observationally
    identical to computing the contrastive term and ignoring it.
    """
    if state is None:
        raise ContractError("joint training requires a pretrained state")
    records = dataset.records
    if not records:
        raise ContractError("cannot train on an empty dataset")
    n_o = state.meta["n_candidates"]
    n_d = state.meta["n_display"]
    total = math.perm(n_o, n_d)
    if 2 * config.k > total:
        raise ContractError(
            f"k={config.k} exceeds half the candidate count {total}: cannot draw disjoint unselected permutations"
        )
    enum_idx = enumeration_indices(n_o, n_d)
    curve = []
    step = 0
    for _ in range(config.joint_epochs):
        order = _epoch_order(config, state.epochs_done, len(records))
        for start in range(0, len(order), config.batch_size):
            batch = [records[i] for i in order[start : start + config.batch_size]]
            selection = None
            if config.alpha > 0:
                items = np.stack([r.items_features for r in batch])
                beh = _behavior_lists(batch, state.meta["m_behaviors"])
                sel, _ = fpsm.select_top_k_batch(
                    items, enum_idx, beh, state.table, state.family, state.time_weights, config.k
                )
                rng = _stream_rng(config.seed, _TAG_SAMPLER, state.epochs_done, step)
                uns = _sample_unselected(sel, total, config.k, rng)
                selection = (sel, uns, enum_idx)
            curve.append(_run_batch(state, batch, config, step, selection))
            step += 1
        state.epochs_done += 1
    return state, curve


# ---------------------------------------------------------------------------
# Point-wise baseline


@dataclass
class PointwiseModel:
    table: EmbeddingTable  # item feature fields plus one user field
    mlp: tuple
    meta: dict

    def parameters(self):
        out = list(self.table.fields)
        for w, b, _ in self.mlp:
            out += [w, b]
        return out

    def predict_proba(self, items_features, user_ids):
        """Click probability per item, independent of list context."""
        items_features = np.asarray(items_features)
        user_ids = np.asarray(user_ids)
        ids = np.concatenate([items_features, user_ids[..., None]], axis=-1)
        x = nm.concat(embed_features(self.table, ids), axis=-1)
        logits = nm.mlp_forward(x, self.mlp)
        return 1.0 / (1.0 + np.exp(-logits.data[..., 0]))

    def forward(self, items_features, user_ids):
        ids = np.concatenate(
            [np.asarray(items_features), np.asarray(user_ids)[..., None]], axis=-1
        )
        x = nm.concat(embed_features(self.table, ids), axis=-1)
        return nm.sigmoid(nm.mlp_forward(x, self.mlp))


def init_pointwise_model(data_meta, config):
    dtype = np.dtype(config.dtype)
    vocab = list(data_meta["vocab_sizes"]) + [int(data_meta["n_users"])]
    table = make_table(vocab, config.dim, seed=_stream_seed(config.seed, _TAG_BASE_TABLE), dtype=dtype)
    rng = _stream_rng(config.seed, _TAG_BASE_MLP)
    layers = []
    cur = len(vocab) * config.dim
    sizes = tuple(config.baseline_hidden) + (1,)
    for i, n_out in enumerate(sizes):
        act = "identity" if i == len(sizes) - 1 else "relu"
        bound = np.sqrt(6.0 / (cur + n_out))
        w = nm.parameter(rng.uniform(-bound, bound, size=(cur, n_out)).astype(dtype), name=f"baseline.w{i}")
        b = nm.parameter(np.zeros(n_out, dtype=dtype), name=f"baseline.b{i}")
        layers.append((w, b, act))
        cur = n_out
    meta = {"dim": config.dim, "vocab_sizes": vocab, "n_users": int(data_meta["n_users"])}
    return PointwiseModel(table=table, mlp=tuple(layers), meta=meta)


def train_pointwise_baseline(dataset, config, epochs=None, model=None):
    """Single-item click model: BCE over every displayed (item, label) pair.

    Pass `model` to continue training an existing one (a warm start) instead
    of initializing fresh weights; the optimizer state still starts cold.
    """
    records = dataset.records
    if not records:
        raise ContractError("cannot train on an empty dataset")
    if model is None:
        model = init_pointwise_model(dataset.meta, config)
    item_ids = np.concatenate([r.items_features[np.asarray(r.displayed)] for r in records])
    users = np.concatenate([np.full(len(r.displayed), r.user_id) for r in records])
    labels = np.concatenate([np.asarray(r.clicks, dtype=np.float64) for r in records])
    params = model.parameters()
    opt = init_adam(params)
    curve = []
    n = len(labels)
    epochs = config.baseline_epochs if epochs is None else epochs
    for e in range(epochs):
        order = _stream_rng(config.seed, _TAG_BASE_ORDER, e).permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            pred = model.forward(item_ids[idx], users[idx])
            losses = _bce_terms(nm.reshape(pred, (len(idx),)), labels[idx])
            loss = nm.mean_all(losses)
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite baseline loss at epoch {e}, batch {start}")
            grads = nm.backward(loss, params)
            adam_step(params, grads, opt, config.learning_rate)
            curve.append(float(loss.data))
    return model, curve
