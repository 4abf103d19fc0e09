"""Alpha and K sweep on a reduced dataset: the hit-rate / AUC trade-off
table as the contrastive weight grows, plus selection-budget timings."""

import argparse
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


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-train", type=int, default=10_000)
    ap.add_argument("--n-test", type=int, default=2_000)
    ap.add_argument("--k", type=int, default=100)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not (out / "train.jsonl").exists():
        run(["gen-data", "--out", out, "--seed", args.seed,
             "--n-train", args.n_train, "--n-test", args.n_test])
    run(["sweep", "--data", out, "--out", out, "--seed", args.seed, "--k", args.k])
    sys.stdout.write((out / "sweep.txt").read_text(encoding="utf-8"))


if __name__ == "__main__":
    main()
