"""End-to-end acceptance checks for the re-ranking system.

Each test prints one PASS/FAIL line through the conftest collector.  The
expensive fixtures (dataset generation plus training) are session-scoped
and shared across tests; every numeric threshold is asserted at the
tolerance stated in the line it prints.

Budget note: the full module is several training runs end to end and takes
roughly an hour on one core.  Run `pytest tests/test_acceptance.py -v` on
its own when iterating.
"""

import copy
import json
import math
import os
import subprocess
import sys
import time
from dataclasses import replace

import numpy as np
import pytest

from pier import data as dt
from pier import fpsm
from pier import numerics as nm
from pier import training as tr
from pier.evalcli import metrics as mx
from pier.evalcli import pipeline as pl
from pier.permgen import CandidateSet, enumerate_permutations, enumeration_indices

from conftest import record_acceptance


# ---------------------------------------------------------------------------
# Shared experiment recipe.  One world, one training configuration; the
# sized-down variants reuse the same knobs on fewer requests.

BENCH_WORLD = dict()  # WorldConfig defaults ARE the benchmark world
BENCH_SEED = 0
N_CANDIDATES, N_DISPLAY, N_FIELDS = 10, 3, 3
VOCAB = (500, 20, 30)

TRAIN_KW = dict(
    learning_rate=3e-3,
    batch_size=512,
    chunk_size=128,
    k=100,
    pretrain_epochs=3,
    joint_epochs=1,
    m_behaviors=8,
)


def make_config(**over):
    kw = dict(TRAIN_KW)
    kw.update(over)
    return tr.TrainConfig(seed=BENCH_SEED, **kw)


def gen(n_requests, world=None, seed=BENCH_SEED):
    return dt.generate_synthetic_dataset(
        n_requests,
        N_CANDIDATES,
        N_DISPLAY,
        N_FIELDS,
        VOCAB,
        seed=seed,
        world=world or dt.WorldConfig(),
    )


def split(ds, n_train):
    train = tr.Dataset(ds.records[:n_train], dict(ds.meta))
    test = tr.Dataset(ds.records[n_train:], dict(ds.meta))
    return train, test


def verdict(num, name, ok, detail):
    line = f"criterion {num:>2} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    record_acceptance(line)
    assert ok, line


# ---------------------------------------------------------------------------
# Session fixtures


@pytest.fixture(scope="session")
def benchmark():
    """The default benchmark: 50k/5k requests, pretrain + joint at alpha=0.1."""
    t0 = time.monotonic()
    ds, truth = gen(55_000)
    train, test = split(ds, 50_000)
    cfg = make_config()
    baseline, _ = tr.train_pointwise_baseline(train, replace(cfg, baseline_epochs=6))
    pre, _ = tr.pretrain_ocpm(train, cfg)
    joint, _ = tr.joint_train(train, pl.copy_state(pre), cfg)
    out = {
        "train": train,
        "test": test,
        "truth": truth,
        "config": cfg,
        "baseline": baseline,
        "pretrained": pre,
        "joint": joint,
        "hr": {},
        "elapsed_s": 0.0,
    }
    for gen_name in ("full", "fpsm", "beam", "random"):
        out["hr"][gen_name] = pl.hit_rate(joint, test.records, truth, gen_name, k=100, seed=BENCH_SEED)
    out["elapsed_s"] = time.monotonic() - t0
    # alpha=0 twin of the joint run, same seed and pretrained state; joint
    # training without the contrastive term is just continued pretraining,
    # so this arm is cheap
    zero, _ = tr.joint_train(train, pl.copy_state(pre), replace(cfg, alpha=0.0))
    out["hr_alpha0"] = pl.hit_rate(zero, test.records, truth, "fpsm", k=100, seed=BENCH_SEED)
    return out


@pytest.fixture(scope="session")
def ablations():
    """Paired seeded runs at 20k/5k differing in exactly one knob each."""
    ds, truth = gen(25_000)
    train, test = split(ds, 20_000)
    cfg = make_config()

    def pretrain_auc(**over):
        state, _ = tr.pretrain_ocpm(train, make_config(**over))
        preds, labels = pl.predict_displayed(state, test.records)
        return mx.auc(preds.ravel(), labels.ravel())

    auc_full = pretrain_auc()
    auc_no_oau = pretrain_auc(use_oau=False)
    auc_no_tau = pretrain_auc(use_tau=False)

    pre, _ = tr.pretrain_ocpm(train, cfg)

    def joint_hr(**over):
        state, _ = tr.joint_train(train, pl.copy_state(pre), make_config(**over))
        return pl.hit_rate(state, test.records, truth, "fpsm", k=100, seed=BENCH_SEED)

    hr_timeaware = joint_hr(alpha=0.1)
    hr_uniform = joint_hr(alpha=0.1, gamma=1.0)
    return {
        "auc": {"full": auc_full, "no_oau": auc_no_oau, "no_tau": auc_no_tau},
        "hr": {"timeaware": hr_timeaware, "uniform_time": hr_uniform},
    }


@pytest.fixture(scope="session")
def alpha_sweep():
    """Reduced-size sweep (10k train) across the full alpha grid."""
    t0 = time.monotonic()
    ds, truth = gen(12_000)
    train, test = split(ds, 10_000)
    # two joint epochs: at 10k requests that is the same optimizer-step dose
    # as one epoch on the 20k ablation runs
    payload = pl.sweep(
        train,
        test,
        truth,
        make_config(joint_epochs=2),
        alphas=pl.ALPHA_GRID,
        k_values=(100,),
    )
    payload["elapsed_s"] = time.monotonic() - t0
    return payload


# ---------------------------------------------------------------------------
# Criteria


def test_criterion_1_permutation_counts():
    t0 = time.monotonic()
    rng = np.random.default_rng(0)

    def universe(n):
        return CandidateSet(
            features=rng.integers(0, 5, size=(n, N_FIELDS)),
            point_pctr=rng.uniform(0.1, 0.9, size=n),
        )

    n_55 = len(enumerate_permutations(universe(5), 5).permutations)
    n_103 = len(enumerate_permutations(universe(10), 3).permutations)
    took = time.monotonic() - t0
    ok = n_55 == 120 and n_103 == 720 and took < 1.0
    verdict(1, "permutation counts", ok, f"P(5,5)={n_55}, P(10,3)={n_103}, {took:.2f}s < 1s")


def test_criterion_2_full_enumeration_hr():
    t0 = time.monotonic()
    ds, truth = gen(1_000, seed=3)
    cfg = make_config(pretrain_epochs=0)
    state = tr.init_model_state(ds.meta, cfg)
    hr = pl.hit_rate(state, ds.records, truth, "full", k=100)
    took = time.monotonic() - t0
    ok = hr == 1.0 and took < 60
    verdict(2, "full-enumeration HR", ok, f"HR@1={hr:.2f} on 1000 requests, {took:.1f}s < 60s")


def test_criterion_3_hr_ordering(benchmark):
    hr = benchmark["hr"]
    took = benchmark["elapsed_s"]
    gaps = (
        hr["full"] - hr["fpsm"],
        hr["fpsm"] - hr["beam"],
        hr["beam"] - hr["random"],
    )
    ok = all(g >= 0.03 for g in gaps) and took < 1800
    verdict(
        3,
        "HR ordering",
        ok,
        "full=%.3f >= pier=%.3f >= beam=%.3f >= random=%.3f, gaps %.3f/%.3f/%.3f all >= 0.03, %.0fs < 1800s"
        % (hr["full"], hr["fpsm"], hr["beam"], hr["random"], *gaps, took),
    )


def test_criterion_4_context_modeling(benchmark):
    t0 = time.monotonic()
    preds, labels = pl.predict_displayed(benchmark["pretrained"], benchmark["test"].records)
    auc_ocpm = mx.auc(preds.ravel(), labels.ravel())
    recs = benchmark["test"].records
    bl = benchmark["baseline"]
    flat = np.concatenate([np.asarray(r.items_features)[np.asarray(r.displayed)] for r in recs])
    users = np.concatenate([np.full(len(r.displayed), r.user_id) for r in recs])
    auc_base = mx.auc(bl.predict_proba(flat, users), labels.ravel())
    gap_ctx = auc_ocpm - auc_base

    # control: same recipe, context channel off (no pair effects, no position
    # decay, no preference drift)
    flat_world = dt.WorldConfig(gamma_scale=0.0, decay_rate=1.0, drift_period=0)
    ds, _ = gen(25_000, world=flat_world, seed=BENCH_SEED)
    train, test = split(ds, 20_000)
    cfg = benchmark["config"]
    state, _ = tr.pretrain_ocpm(train, cfg)
    p2, l2 = pl.predict_displayed(state, test.records)
    b2, _ = tr.train_pointwise_baseline(train, replace(cfg, baseline_epochs=6))
    flat2 = np.concatenate([np.asarray(r.items_features)[np.asarray(r.displayed)] for r in test.records])
    users2 = np.concatenate([np.full(len(r.displayed), r.user_id) for r in test.records])
    gap_flat = mx.auc(p2.ravel(), l2.ravel()) - mx.auc(b2.predict_proba(flat2, users2), l2.ravel())
    took = time.monotonic() - t0
    ok = gap_ctx >= 0.01 and gap_flat < 0.01 and took < 1800
    verdict(
        4,
        "context modeling",
        ok,
        f"context gap={gap_ctx:+.4f} >= 0.01, no-context gap={gap_flat:+.4f} < 0.01, {took:.0f}s < 1800s",
    )


def test_criterion_5_ablation_directions(ablations, benchmark):
    auc, hr = ablations["auc"], ablations["hr"]
    hr_alpha01 = benchmark["hr"]["fpsm"]
    hr_alpha0 = benchmark["hr_alpha0"]
    checks = {
        "oau": auc["no_oau"] < auc["full"],
        "tau": auc["no_tau"] < auc["full"],
        "alpha": hr_alpha01 - hr_alpha0 >= 0.05,
        "time": hr["uniform_time"] <= hr["timeaware"],
    }
    ok = all(checks.values())
    verdict(
        5,
        "ablation directions",
        ok,
        "AUC full=%.4f > no_oau=%.4f,no_tau=%.4f; HR a0.1=%.3f - a0=%.3f >= 0.05; uniform-time HR %.3f <= %.3f"
        % (
            auc["full"],
            auc["no_oau"],
            auc["no_tau"],
            hr_alpha01,
            hr_alpha0,
            hr["uniform_time"],
            hr["timeaware"],
        ),
    )


def test_criterion_6_alpha_sweep_shape(alpha_sweep):
    rows = alpha_sweep["alpha_sweep"]
    took = alpha_sweep["elapsed_s"]
    hrs = [r["hr_at_1"] for r in rows]
    lo = [r["auc"] for r in rows if r["alpha"] <= 0.1]
    hi = [r["auc"] for r in rows if r["alpha"] >= 0.3]
    nondecreasing = all(b >= a for a, b in zip(hrs, hrs[1:]))
    auc_degrades = max(hi) < min(lo)
    ok = nondecreasing and auc_degrades and took < 7200
    verdict(
        6,
        "alpha sweep shape",
        ok,
        "HR %s nondecreasing=%s; max AUC(a>=0.3)=%.4f < min AUC(a<=0.1)=%.4f; %.0fs < 7200s"
        % (["%.3f" % h for h in hrs], nondecreasing, max(hi), min(lo), took),
    )


def test_criterion_7_gradient_correctness():
    t0 = time.monotonic()
    worst = 0.0
    for seed in (0, 1, 2):
        rng = np.random.default_rng(seed)
        n_cand, n_disp = 4, 2
        records = []
        for rid in range(3):
            feats = rng.integers(0, 6, size=(n_cand, 2))
            disp = rng.permutation(n_cand)[:n_disp]
            records.append(
                tr.TrainingExample(
                    request_id=rid,
                    user_id=int(rng.integers(0, 3)),
                    items_features=feats,
                    point_pctr=rng.uniform(0.05, 0.9, size=n_cand),
                    displayed=disp,
                    clicks=rng.integers(0, 2, size=n_disp),
                    behaviors=[rng.integers(0, 6, size=(n_disp, 2)) for _ in range(2)],
                )
            )
        meta = {
            "n_display": n_disp,
            "n_candidates": n_cand,
            "n_fields": 2,
            "vocab_sizes": (6, 6),
            "n_users": 3,
        }
        cfg = tr.TrainConfig(
            seed=seed,
            dim=4,
            m_behaviors=2,
            k=2,
            alpha=0.1,
            dtype="float64",
            chunk_size=8,
            hidden_field=(8,),
            hidden_context=(6,),
            hidden_att=(4,),
            hidden_head=(5,),
        )
        state = tr.init_model_state(meta, cfg)
        enum_idx = enumeration_indices(n_cand, n_disp)
        sel = np.stack([rng.permutation(len(enum_idx))[:2] for _ in records])
        uns = np.stack([rng.permutation(len(enum_idx))[2:4] for _ in records])
        params = state.parameters()

        def f():
            scalar, _, _ = tr.batch_loss(state, records, cfg, sel, uns, enum_idx)
            return scalar

        worst = max(worst, nm.grad_check(f, params, eps=1e-6))
    took = time.monotonic() - t0
    ok = worst < 1e-4 and took < 60
    verdict(7, "gradient correctness", ok, f"max rel err={worst:.2e} < 1e-4 over 3 states, {took:.1f}s < 60s")


def test_criterion_8_simhash_fidelity():
    t0 = time.monotonic()
    rng = np.random.default_rng(17)
    family = fpsm.make_hash_family(1, 48, 8, seed=29)
    bank = family.banks[0]
    n_pairs = 10_000
    a = rng.standard_normal((n_pairs, 8))
    b = rng.standard_normal((n_pairs, 8))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    theta = np.arccos(np.clip(np.sum(a * b, axis=1), -1.0, 1.0))
    bits_a = (a @ bank.T) >= 0
    bits_b = (b @ bank.T) >= 0
    frac = (bits_a != bits_b).mean(axis=1)
    bias = abs(float(np.mean(frac - theta / math.pi)))
    took = time.monotonic() - t0
    ok = bias < 0.02 and took < 10
    verdict(8, "simhash fidelity", ok, f"|mean(hamming/B - theta/pi)|={bias:.5f} < 0.02 at B=48, {took:.1f}s < 10s")


def test_criterion_9_oracle_equivalences():
    t0 = time.monotonic()
    rng = np.random.default_rng(5)
    ds, truth = gen(40, seed=11)
    cfg = make_config(pretrain_epochs=1)
    state, _ = tr.pretrain_ocpm(tr.Dataset(ds.records[:30], dict(ds.meta)), cfg)

    # (a) hash selection equals sorting every candidate by distance
    rec = ds.records[31]
    enum_idx = enumeration_indices(5, 5)[:120]
    feats = np.asarray(rec.items_features)[:5]
    perms = feats[enum_idx]
    beh = list(rec.behaviors[: state.meta["m_behaviors"]])
    sel, dist = fpsm.select_top_k(perms, beh, state.table, state.family, state.time_weights, 10)
    full_order = np.argsort(dist, kind="stable")[:10]
    sel_ok = list(sel) == list(full_order)

    # (b) evaluator argmax over all 720 arrangements equals a linear scan
    rec = ds.records[32]
    enum_all = enumeration_indices(10, 3)
    preds = pl.predict_rows_for_record(state, rec, enum_all)
    scores = preds.sum(axis=1)
    argmax_fast = int(np.argmax(scores))
    best, best_s = 0, -np.inf
    for i in range(len(scores)):
        s = float(scores[i])
        if s > best_s:
            best, best_s = i, s
    scan_ok = argmax_fast == best

    # (c) rank-statistic AUC against the O(n^2) pairwise oracle
    s = rng.uniform(0, 1, size=1000)
    y = rng.integers(0, 2, size=1000)
    wins = ties = 0
    pos = s[y == 1]
    neg = s[y == 0]
    for p in pos:
        wins += int((p > neg).sum())
        ties += int((p == neg).sum())
    auc_oracle = (wins + 0.5 * ties) / (len(pos) * len(neg))
    auc_fast = mx.auc(s, y)
    auc_ok = abs(auc_fast - auc_oracle) < 1e-12

    took = time.monotonic() - t0
    ok = sel_ok and scan_ok and auc_ok and took < 60
    verdict(
        9,
        "oracle equivalences",
        ok,
        f"hash-vs-sort={sel_ok}, argmax-vs-scan={scan_ok}, |auc delta|={abs(auc_fast - auc_oracle):.1e} < 1e-12, {took:.1f}s < 60s",
    )


def test_criterion_10_cost_direction(benchmark):
    t0 = time.monotonic()
    state = benchmark["joint"]
    recs = benchmark["test"].records[:8]
    mean_full, _ = mx.bench_cost(pl.make_pipeline(state, "full", 100), recs, 30)
    costs = {}
    for k in (50, 100, 200):
        costs[k], _ = mx.bench_cost(pl.make_pipeline(state, "fpsm", k), recs, 30)
    took = time.monotonic() - t0
    ok = mean_full > costs[100] and costs[50] < costs[100] < costs[200] and took < 300
    verdict(
        10,
        "cost direction",
        ok,
        "full=%.1fms > fpsm@100=%.1fms; fpsm %.1f/%.1f/%.1fms rises over K={50,100,200}; %.0fs < 300s"
        % (mean_full, costs[100], costs[50], costs[100], costs[200], took),
    )


def test_criterion_11_determinism(tmp_path):
    env = dict(os.environ, PYTHONHASHSEED="0")
    out = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        for cmd in (
            ["gen-data", "--n-train", "300", "--n-test", "100", "--seed", "5", "--out", str(d)],
            ["pretrain", "--data", str(d), "--epochs", "1", "--seed", "5", "--out", str(d)],
            [
                "eval",
                "--data", str(d),
                "--model", str(d / "pretrain.ckpt"),
                "--generator", "fpsm",
                "--k", "20",
                "--seed", "5",
                "--out", str(d),
            ],
        ):
            r = subprocess.run(
                [sys.executable, "-m", "pier.evalcli.cli"] + cmd,
                capture_output=True,
                text=True,
                env=env,
            )
            assert r.returncode == 0, r.stderr
        out.append(d)
    a, b = out
    same_data = (a / "train.jsonl").read_bytes() == (b / "train.jsonl").read_bytes()
    same_ckpt = (a / "pretrain.ckpt").read_bytes() == (b / "pretrain.ckpt").read_bytes()
    ra = json.loads((a / "report.json").read_text())
    rb = json.loads((b / "report.json").read_text())
    same_report = ra == rb
    ok = same_data and same_ckpt and same_report
    verdict(
        11,
        "determinism",
        ok,
        f"datasets identical={same_data}, checkpoints identical={same_ckpt}, reports identical={same_report}",
    )
