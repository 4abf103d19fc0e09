"""Paired ablation runs on one shared dataset.

Four paired comparisons, each differing from its partner in exactly one
switch: per-field/inter-field attention off, behavior attention off,
contrastive weight alpha 0 vs 0.1, and recency-decayed vs uniform history
weights.  Attention ablations compare held-out AUC; the other two compare
fpsm hit rate.  Prints one verdict line per pair.
"""

import argparse
import json
import sys
import time
from pathlib import Path

from pier.evalcli.cli import main as pier


def run(argv):
    t0 = time.time()
    argv = [str(a) for a in argv]
    rc = pier(argv)
    if rc != 0:
        raise SystemExit(f"step failed (exit {rc}): pier {' '.join(argv)}")
    print(f"[{time.time() - t0:6.1f}s] pier {' '.join(argv)}", file=sys.stderr)


def train_and_eval(out, data, seed, k, overrides, pretrained=None, joint=True):
    """One variant: (pre)train under `overrides`, return its eval report."""
    out.mkdir(parents=True, exist_ok=True)
    cfg = out / "config.json"
    with open(cfg, "w", encoding="utf-8") as fh:
        json.dump(overrides, fh, indent=2)
    if pretrained is None:
        run(["pretrain", "--data", data, "--out", out, "--seed", seed, "--config", cfg])
        model = out / "pretrain.ckpt"
    else:
        model = pretrained
    if joint:
        run(["train", "--data", data, "--out", out, "--seed", seed, "--config", cfg,
             "--init", model])
        model = out / "model.ckpt"
    run(["eval", "--data", data, "--model", model, "--generator", "fpsm",
         "--k", k, "--seed", seed, "--out", out, "--config", cfg])
    with open(out / "report.json", "r", encoding="utf-8") as fh:
        return json.load(fh)


def verdict(name, metric, lo, hi, margin=0.0):
    ok = hi - lo >= margin
    tag = "ok" if ok else "FAIL"
    need = f" (need >= {margin})" if margin else ""
    print(f"{tag:4} {name}: {metric} {lo:.4f} -> {hi:.4f} gap {hi - lo:+.4f}{need}")
    return ok


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/ablations")
    ap.add_argument("--data", default=None, help="existing dataset dir; generated when absent")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-train", type=int, default=20_000)
    ap.add_argument("--n-test", type=int, default=5_000)
    ap.add_argument("--k", type=int, default=100)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = Path(args.data) if args.data else out / "data"
    if not (data / "train.jsonl").exists():
        run(["gen-data", "--out", data, "--seed", args.seed,
             "--n-train", args.n_train, "--n-test", args.n_test])

    ev = lambda name, ov, **kw: train_and_eval(out / name, data, args.seed, args.k, ov, **kw)

    # attention ablations are visible after phase one already; skip the joint
    # phase so each pair differs in nothing else
    full_pre = ev("pre_full", {}, joint=False)
    no_oau = ev("no_oau", {"use_oau": False}, joint=False)
    no_tau = ev("no_tau", {"use_tau": False}, joint=False)

    pre_ckpt = out / "pre_full" / "pretrain.ckpt"
    alpha0 = ev("alpha0", {"alpha": 0.0}, pretrained=pre_ckpt)
    alpha01 = ev("alpha01", {"alpha": 0.1}, pretrained=pre_ckpt)
    uniform = ev("uniform_w", {"alpha": 0.1, "gamma": 1.0}, pretrained=pre_ckpt)

    print()
    ok = verdict("per-field/inter-field attention", "auc", no_oau["auc"], full_pre["auc"])
    ok &= verdict("behavior attention", "auc", no_tau["auc"], full_pre["auc"])
    ok &= verdict("contrastive weight 0 vs 0.1", "hr@1", alpha0["hr_at_1"], alpha01["hr_at_1"], 0.05)
    ok &= verdict("uniform vs decayed history weights", "hr@1",
                  uniform["hr_at_1"], alpha01["hr_at_1"])
    sys.exit(0 if ok else 1)


if __name__ == "__main__":
    main()
