"""End-to-end benchmark: synthesize a click log, train both phases, then
compare the full / fpsm / beam / random generators on held-out requests.

Writes everything under --out and prints one combined table.  Stages are
plain `pier` CLI invocations, so any step can be re-run by hand.
"""

import argparse
import json
import sys
import time
from pathlib import Path

from pier.evalcli.cli import main as pier

GENERATOR_ORDER = ("full", "fpsm", "beam", "random")


def run(argv):
    t0 = time.time()
    argv = [str(a) for a in argv]
    rc = pier(argv)
    if rc != 0:
        raise SystemExit(f"step failed (exit {rc}): pier {' '.join(argv)}")
    print(f"[{time.time() - t0:6.1f}s] pier {' '.join(argv)}", file=sys.stderr)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/benchmark")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-train", type=int, default=None)
    ap.add_argument("--n-test", type=int, default=None)
    ap.add_argument("--alpha", type=float, default=None)
    ap.add_argument("--k", type=int, default=100, help="generator budget at eval time")
    ap.add_argument("--pretrain-epochs", type=int, default=None)
    ap.add_argument("--joint-epochs", type=int, default=None)
    ap.add_argument("--reuse-data", action="store_true", help="skip gen-data if train.jsonl exists")
    ap.add_argument("--reuse-model", action="store_true", help="skip training if model.ckpt exists")
    ap.add_argument("--bench", action="store_true", help="also time each generator pipeline")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if not (args.reuse_data and (out / "train.jsonl").exists()):
        cmd = ["gen-data", "--out", out, "--seed", args.seed]
        if args.n_train is not None:
            cmd += ["--n-train", args.n_train]
        if args.n_test is not None:
            cmd += ["--n-test", args.n_test]
        run(cmd)

    model = out / "model.ckpt"
    if not (args.reuse_model and model.exists()):
        run(["pretrain", "--data", out, "--out", out, "--seed", args.seed]
            + (["--epochs", args.pretrain_epochs] if args.pretrain_epochs is not None else []))
        cmd = ["train", "--data", out, "--out", out, "--seed", args.seed,
               "--init", out / "pretrain.ckpt"]
        if args.alpha is not None:
            cmd += ["--alpha", args.alpha]
        if args.joint_epochs is not None:
            cmd += ["--epochs", args.joint_epochs]
        run(cmd)

    rows = {}
    for gen in GENERATOR_ORDER:
        gen_dir = out / f"eval_{gen}"
        run(["eval", "--data", out, "--model", model, "--generator", gen,
             "--k", args.k, "--seed", args.seed, "--out", gen_dir])
        if args.bench:
            run(["bench", "--data", out, "--model", model, "--generator", gen,
                 "--k", args.k, "--seed", args.seed, "--out", gen_dir])
        with open(gen_dir / "report.json", "r", encoding="utf-8") as fh:
            rows[gen] = json.load(fh)
        if args.bench:
            with open(gen_dir / "bench.json", "r", encoding="utf-8") as fh:
                rows[gen].update(json.load(fh))

    print(f"\ngenerator comparison (K={args.k}, seed={args.seed})")
    cols = ["hr_at_1", "auc", "logloss"] + (["mean_cost_ms", "p99_cost_ms"] if args.bench else [])
    print(f"{'generator':<10}" + "".join(f"{c:>14}" for c in cols))
    for gen in GENERATOR_ORDER:
        cells = "".join(
            f"{rows[gen].get(c):>14.4f}" if rows[gen].get(c) is not None else f"{'-':>14}"
            for c in cols
        )
        print(f"{gen:<10}{cells}")

    hr = [rows[g]["hr_at_1"] for g in GENERATOR_ORDER]
    gaps = [hr[i] - hr[i + 1] for i in range(len(hr) - 1)]
    print("adjacent HR gaps full>fpsm>beam>random:", " ".join(f"{g:+.4f}" for g in gaps))


if __name__ == "__main__":
    main()
