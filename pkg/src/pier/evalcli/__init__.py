"""Metrics, checkpoints, experiment orchestration, and the CLI."""

from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import auc, bench_cost, hr_at_1, logloss
from .pipeline import (
    ALPHA_GRID,
    GENERATORS,
    K_GRID,
    MetricsReport,
    copy_state,
    evaluate,
    hit_rate,
    make_pipeline,
    predict_displayed,
    predict_rows_for_record,
    run_id_for,
    sweep,
    train_full,
)

__all__ = [
    "ALPHA_GRID",
    "GENERATORS",
    "K_GRID",
    "MetricsReport",
    "auc",
    "bench_cost",
    "copy_state",
    "evaluate",
    "hit_rate",
    "hr_at_1",
    "load_checkpoint",
    "logloss",
    "make_pipeline",
    "predict_displayed",
    "predict_rows_for_record",
    "run_id_for",
    "save_checkpoint",
    "sweep",
    "train_full",
]
