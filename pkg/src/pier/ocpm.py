"""Omnidirectional context-aware prediction of list-wise click probabilities.

Three stages share one parameter set:

* OAU: per-field self-attention over the displayed items (one independent
  Q/K/V triple per field), a shared MLP collapsing each attended field
  matrix to a field vector, inter-field self-attention over the stacked
  field vectors, and a second MLP producing the permutation context ``u``.
* TAU: target attention of ``u`` against the contexts of the user's past
  displayed permutations, pooled into an interest vector ``w``.
* CPU: a position-shared head mapping (u, w, point scores, item embedding
  row) to a per-position click probability.

The batched entry points carry an arbitrary leading batch axis and are the
training/eval hot path; the single-permutation wrappers exist for clarity
and tests.
"""

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from . import numerics as nm
from .embedding import EmbeddingTable, PermEmbedding, embed_features
from .errors import ContractError, DimensionError

HIDDEN_FIELD_MLP = (128, 64, 32)
HIDDEN_CONTEXT_MLP = (60, 32, 20)
HIDDEN_ATT_MLP = (32,)
HIDDEN_HEAD_MLP = (50, 20)


@dataclass
class OcpmParams:
    field_qkv: List[Tuple[nm.Tensor, nm.Tensor, nm.Tensor]]
    inter_qkv: Tuple[nm.Tensor, nm.Tensor, nm.Tensor]
    mlp1: tuple  # flattened field matrix -> field vector
    mlp2: tuple  # flattened attended field vectors -> u
    mlp_att: tuple  # (u, u_b, u*u_b, u-u_b) -> scalar attention weight
    mlp3: tuple  # (u, w, point scores, item row) -> logit
    dim: int
    n_fields: int
    n_display: int
    use_oau: bool = True
    use_tau: bool = True

    @property
    def z_width(self):
        return self.mlp1[-1][0].shape[1]

    @property
    def d_u(self):
        return self.mlp2[-1][0].shape[1]

    def named_parameters(self):
        out = []
        for wq, wk, wv in self.field_qkv:
            out += [wq, wk, wv]
        out += list(self.inter_qkv)
        for layers in (self.mlp1, self.mlp2, self.mlp_att, self.mlp3):
            for w, b, _ in layers:
                out += [w, b]
        return [(t.name, t) for t in out]

    def all_parameters(self):
        return [t for _, t in self.named_parameters()]


@dataclass
class PermContext:
    u: nm.Tensor


@dataclass
class InterestVector:
    w: nm.Tensor


@dataclass
class ListwisePrediction:
    pctr: nm.Tensor  # (N_d,), every entry in (0, 1)


def _glorot(rng, n_in, n_out, name, dtype):
    bound = np.sqrt(6.0 / (n_in + n_out))
    return nm.parameter(rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype), name=name)


def _make_mlp(rng, name, n_in, sizes, final_act, dtype):
    layers = []
    cur = n_in
    for i, n_out in enumerate(sizes):
        act = final_act if i == len(sizes) - 1 else "relu"
        w = _glorot(rng, cur, n_out, f"{name}.w{i}", dtype)
        b = nm.parameter(np.zeros(n_out, dtype=dtype), name=f"{name}.b{i}")
        layers.append((w, b, act))
        cur = n_out
    return tuple(layers)


def init_ocpm_params(
    n_fields,
    n_display,
    dim,
    seed,
    hidden_field=HIDDEN_FIELD_MLP,
    hidden_context=HIDDEN_CONTEXT_MLP,
    hidden_att=HIDDEN_ATT_MLP,
    hidden_head=HIDDEN_HEAD_MLP,
    dtype=np.float32,
    use_oau=True,
    use_tau=True,
):
    """Glorot-uniform parameter set; every tensor is named and seeded."""
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    z_width = hidden_field[-1]
    d_u = hidden_context[-1]
    field_qkv = [
        tuple(
            _glorot(rng, dim, dim, f"ocpm.field_{j}.w{nm_}", dtype)
            for nm_ in ("q", "k", "v")
        )
        for j in range(n_fields)
    ]
    inter_qkv = tuple(
        _glorot(rng, z_width, z_width, f"ocpm.inter.w{nm_}", dtype) for nm_ in ("q", "k", "v")
    )
    mlp1 = _make_mlp(rng, "ocpm.mlp1", n_display * dim, hidden_field, "relu", dtype)
    mlp2 = _make_mlp(rng, "ocpm.mlp2", n_fields * z_width, hidden_context, "relu", dtype)
    mlp_att = _make_mlp(rng, "ocpm.mlp_att", 4 * d_u, hidden_att + (1,), "identity", dtype)
    head_in = 2 * d_u + n_display + n_fields * dim
    mlp3 = _make_mlp(rng, "ocpm.mlp3", head_in, hidden_head + (1,), "identity", dtype)
    return OcpmParams(
        field_qkv=field_qkv,
        inter_qkv=inter_qkv,
        mlp1=mlp1,
        mlp2=mlp2,
        mlp_att=mlp_att,
        mlp3=mlp3,
        dim=dim,
        n_fields=n_fields,
        n_display=n_display,
        use_oau=use_oau,
        use_tau=use_tau,
    )


def _check_field_input(x, params, j):
    if x.shape[-1] != params.dim:
        raise DimensionError(
            f"field-attention: field {j} embedding dim {x.shape[-1]} != params dim {params.dim}"
        )
    if x.shape[-2] != params.n_display:
        raise DimensionError(
            f"field-attention: {x.shape[-2]} items per permutation, params built for {params.n_display}"
        )


def oau_forward_batch(field_embs, params):
    """Permutation context for a batch.

    field_embs: list (length N_f) of Tensors shaped (R, N_d, D).  Returns u
    with shape (R, D_u).  Projections run as one flat GEMM per weight; only
    the N_d x N_d attention products stay batched.
    """
    if len(field_embs) != params.n_fields:
        raise DimensionError(
            f"field-attention: {len(field_embs)} fields supplied, params built for {params.n_fields}"
        )
    r = field_embs[0].shape[0]
    n_d, d = params.n_display, params.dim

    def project(flat, w, rows, width):
        return nm.reshape(nm.matmul(flat, w), (r, rows, width))

    hs = []
    for j, x in enumerate(field_embs):
        _check_field_input(x, params, j)
        if params.use_oau:
            wq, wk, wv = params.field_qkv[j]
            flat = nm.reshape(x, (r * n_d, d))
            h = nm.scaled_dot_attention(
                project(flat, wq, n_d, d), project(flat, wk, n_d, d), project(flat, wv, n_d, d)
            )
        else:
            h = x
        hs.append(nm.mlp_forward(nm.reshape(h, (r, n_d * d)), params.mlp1))
    z = nm.stack(hs, axis=1)  # (R, N_f, z_width)
    if params.use_oau:
        zw = params.z_width
        wq2, wk2, wv2 = params.inter_qkv
        zflat = nm.reshape(z, (r * params.n_fields, zw))
        z = nm.scaled_dot_attention(
            project(zflat, wq2, params.n_fields, zw),
            project(zflat, wk2, params.n_fields, zw),
            project(zflat, wv2, params.n_fields, zw),
        )
    flat_z = nm.reshape(z, (r, params.n_fields * params.z_width))
    return nm.mlp_forward(flat_z, params.mlp2)


def tau_forward_batch(u_target, u_behavior, owner, n_targets, params):
    """Interest vectors for a batch of targets.

    u_target: (R, D_u).  u_behavior: (TB, D_u) contexts of all behaviors in
    the batch, with owner[t] naming the target row behavior t belongs to.
    Targets with no behaviors get the zero vector.
    """
    if u_behavior is None or u_behavior.shape[0] == 0 or not params.use_tau:
        return nm.tensor(np.zeros((n_targets, params.d_u), dtype=u_target.dtype))
    if u_behavior.shape[-1] != u_target.shape[-1]:
        raise DimensionError(
            f"target-attention: behavior context dim {u_behavior.shape[-1]} != target dim {u_target.shape[-1]}"
        )
    up = nm.gather_rows(u_target, owner)
    att_in = nm.concat([up, u_behavior, nm.mul(up, u_behavior), nm.sub(up, u_behavior)], axis=-1)
    weight = nm.mlp_forward(att_in, params.mlp_att)  # (TB, 1)
    return nm.segment_sum(nm.mul(weight, u_behavior), owner, n_targets)


def cpu_forward_batch(u, w, point_scores, field_embs, params):
    """Per-position click probabilities, one shared head across positions.

    u, w: (R, D_u).  point_scores: ndarray (R, N_d), constants.  field_embs:
    the same per-field embedding tensors given to oau_forward_batch.
    Returns a Tensor (R, N_d) with entries in (0, 1).
    """
    point_scores = np.asarray(point_scores)
    rows = nm.concat(field_embs, axis=-1)  # (R, N_d, N_f*D)
    r, n_d = rows.shape[0], rows.shape[1]
    if point_scores.shape != (r, n_d):
        raise DimensionError(
            f"prediction-head: point score shape {point_scores.shape} != {(r, n_d)}"
        )
    rows_flat = nm.reshape(rows, (r * n_d, params.n_fields * params.dim))
    u_rep = nm.repeat_rows(u, n_d)
    w_rep = nm.repeat_rows(w, n_d)
    scores_rep = nm.tensor(np.repeat(point_scores.astype(rows.dtype), n_d, axis=0))
    x = nm.concat([u_rep, w_rep, scores_rep, rows_flat], axis=-1)
    logits = nm.mlp_forward(x, params.mlp3)
    return nm.reshape(nm.sigmoid(logits), (r, n_d))


def predict_batch(table, params, target_ids, point_scores, behavior_ids=None, owner=None):
    """Full forward pass: feature ids in, list-wise pCTRs out.

    target_ids: (R, N_d, N_f) ints.  behavior_ids: (TB, N_d, N_f) with
    owner (TB,) mapping each behavior to its target row, or None.
    """
    target_ids = np.asarray(target_ids)
    r = target_ids.shape[0]
    tfields = embed_features(table, target_ids)
    u = oau_forward_batch(tfields, params)
    if behavior_ids is not None and len(behavior_ids) > 0 and params.use_tau:
        bfields = embed_features(table, np.asarray(behavior_ids))
        ub = oau_forward_batch(bfields, params)
        w = tau_forward_batch(u, ub, np.asarray(owner), r, params)
    else:
        w = nm.tensor(np.zeros((r, params.d_u), dtype=u.dtype))
    return cpu_forward_batch(u, w, point_scores, tfields, params)


def pack_behaviors(behavior_lists):
    """Flatten per-example behavior lists into (ids, owner) arrays."""
    ids, owner = [], []
    for i, behaviors in enumerate(behavior_lists):
        for b in behaviors:
            ids.append(b)
            owner.append(i)
    if not ids:
        return None, None
    return np.asarray(ids), np.asarray(owner, dtype=np.int64)


def _batch_of_one(m_emb):
    return [nm.reshape(s, (1,) + s.shape) for s in (m_emb.slab(j) for j in range(len(m_emb.fields)))]


def oau_forward(m_emb: PermEmbedding, params: OcpmParams) -> PermContext:
    u = oau_forward_batch(_batch_of_one(m_emb), params)
    return PermContext(u=nm.reshape(u, (params.d_u,)))


def tau_forward(u_target: PermContext, behavior_contexts, params: OcpmParams) -> InterestVector:
    ut = nm.reshape(u_target.u, (1, params.d_u))
    if not behavior_contexts:
        return InterestVector(w=nm.tensor(np.zeros(params.d_u, dtype=ut.dtype)))
    ub = nm.stack([c.u for c in behavior_contexts], axis=0)
    owner = np.zeros(len(behavior_contexts), dtype=np.int64)
    w = tau_forward_batch(ut, ub, owner, 1, params)
    return InterestVector(w=nm.reshape(w, (params.d_u,)))


def cpu_forward(u_target, w, point_scores, m_emb, params) -> ListwisePrediction:
    point_scores = np.asarray(point_scores, dtype=float)
    if point_scores.shape != (params.n_display,):
        raise DimensionError(
            f"prediction-head: expected {params.n_display} point scores, got shape {point_scores.shape}"
        )
    pred = cpu_forward_batch(
        nm.reshape(u_target.u, (1, params.d_u)),
        nm.reshape(w.w, (1, params.d_u)),
        point_scores[None, :],
        _batch_of_one(m_emb),
        params,
    )
    return ListwisePrediction(pctr=nm.reshape(pred, (params.n_display,)))


def predict_permutation(table, params, features, point_scores, behavior_features=()):
    """Single-permutation convenience wrapper returning ListwisePrediction."""
    from .embedding import embed_permutation

    m_emb = embed_permutation(np.asarray(features), table)
    u = oau_forward(m_emb, params)
    contexts = [oau_forward(embed_permutation(np.asarray(b), table), params) for b in behavior_features]
    w = tau_forward(u, contexts, params)
    return cpu_forward(u, w, point_scores, m_emb, params)


def ocpm_score(pred: ListwisePrediction) -> float:
    """Sum of per-position pCTRs; the permutation-ranking criterion."""
    if pred.pctr.data.size == 0:
        raise ContractError("ocpm_score: empty prediction")
    return float(pred.pctr.data.sum())
