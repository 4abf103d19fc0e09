"""Experiment orchestration: rerank pipelines, evaluation, and sweeps."""

import copy
import hashlib
import json
from dataclasses import dataclass, replace

import numpy as np

from .. import fpsm
from .. import numerics as nm
from .. import ocpm as oc
from ..data import best_permutation_for_record
from ..embedding import embed_features
from ..errors import ContractError
from ..permgen import beam_search_generate, enumeration_indices, random_generate
from ..training import _behavior_lists, _display_arrays, init_adam, joint_train, pretrain_ocpm
from . import metrics as mx

GENERATORS = ("full", "beam", "random", "fpsm")

_REPORT_KEYS = ("auc", "logloss", "hr_at_1", "mean_cost_ms", "p99_cost_ms", "config", "run_id")


@dataclass
class MetricsReport:
    auc: float = None
    logloss: float = None
    hr_at_1: float = None
    mean_cost_ms: float = None
    p99_cost_ms: float = None
    config: dict = None
    run_id: str = ""

    def __post_init__(self):
        for name in ("auc", "hr_at_1"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ContractError(f"{name}={v} outside [0, 1]")
        for name in ("mean_cost_ms", "p99_cost_ms"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ContractError(f"{name}={v} negative")
        if not self.run_id:
            self.run_id = run_id_for(self.to_dict(with_run_id=False))

    def to_dict(self, with_run_id=True):
        out = {k: getattr(self, k) for k in _REPORT_KEYS}
        if not with_run_id:
            del out["run_id"]
        return out


def run_id_for(payload):
    """Deterministic git-style hex id of a JSON-able payload."""
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha1(blob.encode("utf-8")).hexdigest()


def copy_state(state):
    """Independent deep copy: params, optimizer moments, epoch counter."""
    return copy.deepcopy(state)


# ---------------------------------------------------------------------------
# Forward passes without gradient bookkeeping kept


def predict_displayed(state, records, chunk=512):
    """List-wise pCTRs and labels of every displayed position: (N, N_d) each."""
    preds, labels = [], []
    m = state.meta["m_behaviors"]
    for start in range(0, len(records), chunk):
        batch = records[start : start + chunk]
        ids, lab, scores = _display_arrays(batch)
        bids, owner = oc.pack_behaviors(_behavior_lists(batch, m))
        out = oc.predict_batch(state.table, state.params, ids, scores, bids, owner)
        out = out.pctr if isinstance(out, oc.ListwisePrediction) else out
        preds.append(np.asarray(out.data, dtype=np.float64).copy())
        labels.append(lab)
    return np.concatenate(preds), np.concatenate(labels)


def predict_rows_for_record(state, record, rows_idx):
    """Scores for arbitrary arrangements of one record's candidates.

    Behavior contexts run once per distinct behavior, then fan out to all
    T arrangements, matching how training shares them.
    """
    params, table = state.params, state.table
    rows_idx = np.asarray(rows_idx)
    ids = np.asarray(record.items_features)[rows_idx]
    scores = np.asarray(record.point_pctr)[rows_idx]
    t = ids.shape[0]
    tfields = embed_features(table, ids)
    u = oc.oau_forward_batch(tfields, params)
    beh = list(record.behaviors[: state.meta["m_behaviors"]])
    if beh and params.use_tau:
        bfields = embed_features(table, np.asarray(beh))
        ub = oc.oau_forward_batch(bfields, params)
        n_b = len(beh)
        ub_exp = nm.gather_rows(ub, np.tile(np.arange(n_b), t))
        owner = np.repeat(np.arange(t), n_b)
        w = oc.tau_forward_batch(u, ub_exp, owner, t, params)
    else:
        w = nm.tensor(np.zeros((t, params.d_u), dtype=u.dtype))
    pred = oc.cpu_forward_batch(u, w, scores, tfields, params)
    pred = pred.pctr if isinstance(pred, oc.ListwisePrediction) else pred
    return np.asarray(pred.data, dtype=np.float64)


def make_pipeline(state, generator, k, seed=0):
    """Closure running generate -> select -> evaluate -> argmax on one record."""
    if generator not in GENERATORS:
        raise ContractError(f"unknown generator {generator!r}; choose from {GENERATORS}")

    def run(record):
        rows_idx = _selected_rows(state, record, generator, k, seed)
        preds = predict_rows_for_record(state, record, rows_idx)
        best = int(np.argmax(preds.sum(axis=1)))
        return tuple(int(i) for i in rows_idx[best])

    return run


def _selected_rows(state, record, generator, k, seed):
    """(T', N_d) candidate-index rows produced by the chosen generator."""
    n_d = state.meta["n_display"]
    feats = np.asarray(record.items_features)
    n_o = feats.shape[0]
    enum_idx = enumeration_indices(n_o, n_d)
    if generator == "full":
        return enum_idx
    if generator == "beam":
        result = beam_search_generate(record.candidate_set, n_d, k)
        return np.asarray([p.item_indices for p in result.permutations], dtype=np.int64)
    if generator == "random":
        perms = random_generate(
            record.candidate_set, n_d, min(k, len(enum_idx)), seed=[seed, int(record.request_id)]
        )
        return np.asarray([p.item_indices for p in perms], dtype=np.int64)
    sel, _ = fpsm.select_top_k(
        feats[enum_idx],
        list(record.behaviors[: state.meta["m_behaviors"]]),
        state.table,
        state.family,
        state.time_weights,
        k,
    )
    return enum_idx[np.asarray(sel)]


def hit_rate(state, records, truth, generator, k, seed=0, chunk=512):
    """Fraction of requests whose true best arrangement survives generation."""
    if generator not in GENERATORS:
        raise ContractError(f"unknown generator {generator!r}; choose from {GENERATORS}")
    if not records:
        raise ContractError("empty record list")
    n_d = state.meta["n_display"]
    n_o = np.asarray(records[0].items_features).shape[0]
    enum_idx = enumeration_indices(n_o, n_d)
    row_of = {tuple(int(i) for i in row): r for r, row in enumerate(enum_idx)}
    bests = [
        row_of[best_permutation_for_record(rec, truth, n_d).item_indices] for rec in records
    ]
    if generator == "full":
        return 1.0  # every arrangement is present by construction
    hits = 0
    if generator == "fpsm":
        m = state.meta["m_behaviors"]
        for start in range(0, len(records), chunk):
            batch = records[start : start + chunk]
            items = np.stack([np.asarray(r.items_features) for r in batch])
            beh = _behavior_lists(batch, m)
            sel, _ = fpsm.select_top_k_batch(
                items, enum_idx, beh, state.table, state.family, state.time_weights, k
            )
            for row, best in zip(sel, bests[start : start + chunk]):
                hits += int(best in set(int(j) for j in row))
        return hits / len(records)
    for rec, best in zip(records, bests):
        rows = _selected_rows(state, rec, generator, k, seed)
        hits += int(any(row_of[tuple(int(i) for i in row)] == best for row in rows))
    return hits / len(records)


def evaluate(state, dataset, truth=None, generator="fpsm", k=100, seed=0, config_snapshot=None):
    """Held-out metrics: AUC/LogLoss on displayed lists, HR@1 of the generator."""
    records = dataset.records
    if not records:
        raise ContractError("cannot evaluate on an empty dataset")
    preds, labels = predict_displayed(state, records)
    auc_val = mx.auc(preds.ravel(), labels.ravel())
    ll_val = mx.logloss(preds.ravel(), labels.ravel())
    hr_val = hit_rate(state, records, truth, generator, k, seed) if truth is not None else None
    snapshot = dict(config_snapshot or {})
    snapshot.setdefault("generator", generator)
    snapshot.setdefault("k", int(k))
    snapshot.setdefault("seed", int(seed))
    snapshot.setdefault("n_requests", len(records))
    return MetricsReport(
        auc=auc_val, logloss=ll_val, hr_at_1=hr_val, config=snapshot
    )


# ---------------------------------------------------------------------------
# Sweeps

ALPHA_GRID = (0.0, 0.01, 0.05, 0.1, 0.3, 0.5)
K_GRID = (50, 100, 200)


def train_full(train_ds, config, state=None, log=None):
    """Pretrain followed by joint training; returns (state, both curves)."""
    state, pre_curve = pretrain_ocpm(train_ds, config, state=state)
    if log:
        log("pretrain done: %d steps, last loss %.4f" % (len(pre_curve), pre_curve[-1]))
    state, joint_curve = joint_train(train_ds, state, config)
    if log:
        log("joint done: %d steps, last loss %.4f" % (len(joint_curve), joint_curve[-1]))
    return state, (pre_curve, joint_curve)


def sweep(
    train_ds,
    test_ds,
    truth,
    config,
    alphas=ALPHA_GRID,
    k_values=K_GRID,
    eval_k=100,
    bench_records=8,
    bench_reps=30,
    log=None,
):
    """One combined report: metrics per alpha, then HR/cost per K.

    Pretraining does not depend on alpha, so it runs once and every joint
    run continues from an identical deep copy.
    """
    base, _ = pretrain_ocpm(train_ds, config)
    alpha_rows = []
    keep = None
    keep_alpha = None
    for alpha in alphas:
        cfg = replace(config, alpha=float(alpha))
        state, _ = joint_train(train_ds, copy_state(base), cfg)
        rep = evaluate(state, test_ds, truth, generator="fpsm", k=eval_k, seed=config.seed)
        alpha_rows.append(
            {
                "alpha": float(alpha),
                "auc": rep.auc,
                "logloss": rep.logloss,
                "hr_at_1": rep.hr_at_1,
            }
        )
        if log:
            log(
                "alpha=%.2f auc=%.4f logloss=%.4f hr@1=%.4f"
                % (alpha, rep.auc, rep.logloss, rep.hr_at_1)
            )
        if keep_alpha is None or abs(alpha - 0.1) < abs(keep_alpha - 0.1):
            keep, keep_alpha = state, alpha
    k_rows = []
    slice_recs = test_ds.records[: max(1, bench_records)]
    for k in k_values:
        hr = hit_rate(keep, test_ds.records, truth, "fpsm", k, seed=config.seed)
        mean_ms, p99_ms = mx.bench_cost(
            make_pipeline(keep, "fpsm", k, seed=config.seed), slice_recs, bench_reps
        )
        k_rows.append(
            {"k": int(k), "hr_at_1": hr, "mean_cost_ms": mean_ms, "p99_cost_ms": p99_ms}
        )
        if log:
            log("k=%d hr@1=%.4f mean_cost=%.2fms" % (k, hr, mean_ms))
    payload = {
        "alpha_sweep": alpha_rows,
        "k_sweep": k_rows,
        "config": {
            "alphas": [float(a) for a in alphas],
            "k_values": [int(k) for k in k_values],
            "eval_k": int(eval_k),
            "seed": int(config.seed),
            "n_train": len(train_ds.records),
            "n_test": len(test_ds.records),
        },
    }
    payload["run_id"] = run_id_for(payload)
    return payload


def ensure_optimizer(state):
    if state.opt is None:
        state.opt = init_adam(state.parameters())
    return state


def format_table(rows, columns, title=None):
    """Aligned plain-text table; floats at 4 decimals."""
    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    body = [[fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    lines = []
    if title:
        lines.append(title)
    lines.append("  ".join(c.ljust(w) for c, w in zip(columns, widths)))
    lines.append("  ".join("-" * w for w in widths))
    for b in body:
        lines.append("  ".join(v.ljust(w) for v, w in zip(b, widths)))
    return "\n".join(lines)
