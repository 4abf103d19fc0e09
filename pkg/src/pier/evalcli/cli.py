"""Command-line surface: gen-data, pretrain, train, eval, bench, sweep.

Settings resolve in three layers: built-in defaults, then a JSON --config
file, then explicit flags.  A flag that contradicts the config file wins
and logs a notice.  PIER_LOG in {error, info, debug} controls verbosity.
Anticipated failures exit 1 with a single machine-parsable line on stderr;
argparse usage problems exit 2.
"""

import argparse
import concurrent.futures
import csv
import json
import logging
import os
import sys
import time
from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np

from .. import data as dt
from ..errors import ContractError, FormatError, PierError
from ..training import TrainConfig, joint_train, pretrain_ocpm
from . import checkpoint as ck
from . import metrics as mx
from . import pipeline as pl

log = logging.getLogger("pier")

_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging():
    raw = os.environ.get("PIER_LOG", "info").lower()
    logging.basicConfig(
        level=_LEVELS.get(raw, logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    if raw not in _LEVELS:
        log.warning("unknown PIER_LOG=%r, using info", raw)


def _load_config_file(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as e:
        raise FormatError(f"cannot read config {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"config {path} is not valid JSON ({e.msg})") from None
    if not isinstance(cfg, dict):
        raise FormatError(f"config {path} must hold a JSON object")
    return cfg


def _merged_settings(args):
    """defaults < config file < flags; conflicting flags win with a notice."""
    cfg = _load_config_file(args.config) if getattr(args, "config", None) else {}
    merged = dict(cfg)
    skip = {"config", "func", "command"}
    for dest, value in vars(args).items():
        if dest in skip or value is None:
            continue
        if dest in cfg and cfg[dest] != value:
            log.warning(
                "flag --%s=%r overrides config value %r", dest.replace("_", "-"), value, cfg[dest]
            )
        merged[dest] = value
    return merged


_TUPLE_KEYS = ("hidden_field", "hidden_context", "hidden_att", "hidden_head", "baseline_hidden")


def _train_config(settings):
    names = {f.name for f in dc_fields(TrainConfig)}
    kw = {k: v for k, v in settings.items() if k in names}
    for key in _TUPLE_KEYS:
        if key in kw:
            kw[key] = tuple(kw[key])
    return TrainConfig(**kw)


def _world_config(settings):
    names = {f.name for f in dc_fields(dt.WorldConfig)}
    kw = {k: v for k, v in settings.items() if k in names}
    if "pref_strength" in kw:
        kw["pref_strength"] = tuple(kw["pref_strength"])
    preset = settings.get("world", "default")
    if preset == "pointwise":
        return dt.pointwise_world(**kw)
    if preset != "default":
        raise FormatError(f"unknown world preset {preset!r}; use default or pointwise")
    return dt.WorldConfig(**kw)


def _out_dir(args):
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_meta(data_dir):
    path = Path(data_dir) / "meta.json"
    if not path.exists():
        raise FormatError(f"missing {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _load_split(data_dir, name, meta):
    path = Path(data_dir) / f"{name}.jsonl"
    if not path.exists():
        raise FormatError(f"missing {path}")
    return dt.load_jsonl(path, meta=meta)


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=False)
        fh.write("\n")


def _write_curve(path, curves):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase", "step", "loss"])
        for phase, curve in curves:
            for step, loss in enumerate(curve):
                writer.writerow([phase, step, f"{loss:.6f}"])


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_data(args):
    settings = _merged_settings(args)
    seed = int(settings.get("seed", 0))
    n_train = int(settings.get("n_train", 50_000))
    n_test = int(settings.get("n_test", 5_000))
    n_candidates = int(settings.get("n_candidates", 10))
    n_display = int(settings.get("n_display", 3))
    vocab_sizes = [int(v) for v in settings.get("vocab_sizes", (500, 20, 30))]
    world = _world_config(settings)
    out = _out_dir(args)
    log.info(
        "generating %d+%d requests (N_o=%d, N_d=%d, seed=%d)",
        n_train, n_test, n_candidates, n_display, seed,
    )
    ds, truth = dt.generate_synthetic_dataset(
        n_train + n_test, n_candidates, n_display, len(vocab_sizes), vocab_sizes, seed, world=world
    )
    train = type(ds)(records=ds.records[:n_train], meta=dict(ds.meta))
    test = type(ds)(records=ds.records[n_train:], meta=dict(ds.meta))
    dt.write_jsonl(train, out / "train.jsonl")
    dt.write_jsonl(test, out / "test.jsonl")
    truth.save(out / "ground_truth.json")
    meta = dict(ds.meta)
    meta.update({"n_train": n_train, "n_test": n_test})
    _write_json(out / "meta.json", meta)
    log.info("wrote %s", out)
    return 0


def cmd_pretrain(args):
    settings = _merged_settings(args)
    config = _train_config(settings)
    meta = _read_meta(args.data)
    train = _load_split(args.data, "train", meta)
    out = _out_dir(args)
    state, curve = pretrain_ocpm(train, config)
    ck.save_checkpoint(state, out / "pretrain.ckpt")
    _write_curve(out / "pretrain_loss.csv", [("pretrain", curve)])
    log.info("pretrain: %d steps, final batch loss %.4f", len(curve), curve[-1])
    return 0


def cmd_train(args):
    settings = _merged_settings(args)
    config = _train_config(settings)
    meta = _read_meta(args.data)
    train = _load_split(args.data, "train", meta)
    out = _out_dir(args)
    curves = []
    if args.init:
        state = pl.ensure_optimizer(ck.load_checkpoint(args.init))
        log.info("continuing from %s (epochs_done=%d)", args.init, state.epochs_done)
    else:
        state, pre = pretrain_ocpm(train, config)
        curves.append(("pretrain", pre))
    state, joint = joint_train(train, state, config)
    curves.append(("joint", joint))
    ck.save_checkpoint(state, out / "model.ckpt")
    _write_curve(out / "train_loss.csv", curves)
    log.info("joint: %d steps, final batch loss %.4f", len(joint), joint[-1])
    return 0


def _load_truth(args, required=False):
    path = Path(args.truth) if args.truth else Path(args.data) / "ground_truth.json"
    if path.exists():
        return dt.GroundTruthModel.load(path)
    if required:
        raise FormatError(f"missing ground truth file {path}")
    log.warning("no ground truth at %s; HR@1 will be null", path)
    return None


def cmd_eval(args):
    settings = _merged_settings(args)
    generator = settings.get("generator", "fpsm")
    k = int(settings.get("k", 100))
    seed = int(settings.get("seed", 0))
    meta = _read_meta(args.data)
    test = _load_split(args.data, args.split, meta)
    state = ck.load_checkpoint(args.model)
    truth = _load_truth(args)
    out = _out_dir(args)
    report = pl.evaluate(
        state,
        test,
        truth,
        generator=generator,
        k=k,
        seed=seed,
        config_snapshot={"generator": generator, "k": k, "seed": seed, "model": str(args.model)},
    )
    _write_json(out / "report.json", report.to_dict())
    table = pl.format_table(
        [
            {
                "generator": generator,
                "hr@1": report.hr_at_1,
                "auc": report.auc,
                "logloss": report.logloss,
                "cost(ms)": report.mean_cost_ms,
            }
        ],
        ["generator", "hr@1", "auc", "logloss", "cost(ms)"],
        title="held-out metrics",
    )
    (out / "report.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_bench(args):
    settings = _merged_settings(args)
    generator = settings.get("generator", "fpsm")
    k = int(settings.get("k", 100))
    seed = int(settings.get("seed", 0))
    reps = int(settings.get("repetitions", 30))
    n_requests = int(settings.get("n_requests", 8))
    meta = _read_meta(args.data)
    test = _load_split(args.data, args.split, meta)
    state = ck.load_checkpoint(args.model)
    out = _out_dir(args)
    records = test.records[:n_requests]
    pipe = pl.make_pipeline(state, generator, k, seed=seed)
    if args.parallel:
        mean_ms, p99_ms = _bench_parallel(pipe, records, reps)
    else:
        mean_ms, p99_ms = mx.bench_cost(pipe, records, reps)
    payload = {
        "generator": generator,
        "k": k,
        "repetitions": reps,
        "n_requests": len(records),
        "parallel": bool(args.parallel),
        "mean_cost_ms": mean_ms,
        "p99_cost_ms": p99_ms,
    }
    payload["run_id"] = pl.run_id_for(payload)
    _write_json(out / "bench.json", payload)
    line = f"{generator} k={k}: mean {mean_ms:.2f} ms, p99 {p99_ms:.2f} ms"
    print(line)
    return 0


def _bench_parallel(pipe, records, reps):
    """Thread-pool variant; per-request latency still timed inside the call."""
    if reps < 30:
        raise ContractError(f"repetitions must be >= 30, got {reps}")
    if not records:
        raise ContractError("empty dataset slice")

    def timed(req):
        t0 = time.perf_counter()
        pipe(req)
        return time.perf_counter() - t0

    for req in records[:5]:
        pipe(req)
    with concurrent.futures.ThreadPoolExecutor() as pool:
        samples = list(pool.map(timed, [r for _ in range(reps) for r in records]))
    arr = np.asarray(samples) * 1e3
    return float(arr.mean()), float(np.percentile(arr, 99))


def cmd_sweep(args):
    settings = _merged_settings(args)
    config = _train_config(settings)
    alphas = settings.get("alphas", list(pl.ALPHA_GRID))
    k_values = settings.get("k_values", list(pl.K_GRID))
    meta = _read_meta(args.data)
    train = _load_split(args.data, "train", meta)
    test = _load_split(args.data, "test", meta)
    truth = _load_truth(args, required=True)
    out = _out_dir(args)
    payload = pl.sweep(
        train,
        test,
        truth,
        config,
        alphas=tuple(float(a) for a in alphas),
        k_values=tuple(int(k) for k in k_values),
        eval_k=int(settings.get("k", 100)),
        log=log.info,
    )
    _write_json(out / "sweep.json", payload)
    text = "\n\n".join(
        [
            pl.format_table(payload["alpha_sweep"], ["alpha", "hr_at_1", "auc", "logloss"], "alpha sweep"),
            pl.format_table(payload["k_sweep"], ["k", "hr_at_1", "mean_cost_ms", "p99_cost_ms"], "K sweep"),
        ]
    )
    (out / "sweep.txt").write_text(text + "\n")
    print(text)
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pier",
        description="Two-stage permutation re-ranking: data synthesis, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON settings file; flags override it")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory (default: cwd)")

    p = sub.add_parser("gen-data", help="synthesize a click log with ground truth")
    common(p)
    p.add_argument("--n-train", dest="n_train", type=int, default=None)
    p.add_argument("--n-test", dest="n_test", type=int, default=None)
    p.add_argument("--n-candidates", dest="n_candidates", type=int, default=None)
    p.add_argument("--n-display", dest="n_display", type=int, default=None)
    p.add_argument("--world", choices=("default", "pointwise"), default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="phase-one training on displayed lists")
    common(p)
    p.add_argument("--data", required=True, help="directory with train.jsonl + meta.json")
    p.add_argument("--epochs", dest="pretrain_epochs", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="joint training with the contrastive objective")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--init", default=None, help="checkpoint to continue from")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--epochs", dest="joint_epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="held-out metrics for one generator")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--truth", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--generator", choices=pl.GENERATORS, default=None)
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="per-request latency of a rerank pipeline")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--generator", choices=pl.GENERATORS, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--repetitions", type=int, default=None)
    p.add_argument("--n-requests", dest="n_requests", type=int, default=None)
    p.add_argument("--parallel", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="alpha and K grids, one combined report")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--truth", default=None)
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except PierError as e:
        print(f'error code={e.code} message="{e}"', file=sys.stderr)
        return 1
    except OSError as e:
        print(f'error code=io message="{e}"', file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
