"""Checkpoint evaluation and the ablation runner."""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Sequence

from . import numerics as nx
from .config import ABLATIONS, Config
from .data import DatasetSplit, Scene
from .errors import ConfigError
from .metrics import MetricsReport, rmse_per_horizon, write_plot
from .model import predict_batch
from .training import train


def evaluate(scenes: Sequence[Scene], params: nx.ParamStore, cfg: Config, K: int | None = None, seed: int | None = None, tag: str = "") -> MetricsReport:
    """First-sample and min-over-K RMSE of sampled predictions on ``scenes``."""
    K = cfg.model.K if K is None else K
    seed = cfg.train.seed if seed is None else seed
    preds = predict_batch(scenes, params, cfg.model, K, seed)
    return rmse_per_horizon(preds, scenes, tag)


def write_report(report: MetricsReport, csv_path, plot_path=None) -> Path:
    """Write the report CSV and its SVG plot (``<csv stem>.svg`` unless given)."""
    csv_path = Path(csv_path)
    report.write_csv(csv_path)
    plot_path = csv_path.with_suffix(".svg") if plot_path is None else Path(plot_path)
    write_plot(report, plot_path)
    return plot_path


def ablated_config(base: Config, spec: str | None) -> Config:
    if spec is not None and spec not in ABLATIONS:
        raise ConfigError(f"unknown ablation {spec!r}; expected one of {ABLATIONS} or none")
    if base.model.ablate is not None and spec is not None and spec != base.model.ablate:
        raise ConfigError("only one component may be disabled per run")
    model = dataclasses.replace(base.model, ablate=spec if spec is not None else base.model.ablate)
    return Config(model, dataclasses.replace(base.train))


def run_ablation(split: DatasetSplit, base: Config, spec: str | None, out_dir=None, eval_on: str = "val") -> MetricsReport:
    """Train with ``spec`` disabled (``None`` = full model) and report on the chosen split.

    The best-validation parameters are evaluated.
    """
    cfg = ablated_config(base, spec)
    res = train(split, cfg, out_dir=out_dir)
    scenes = {"val": split.val, "test": split.test, "train": split.train}[eval_on] or split.train
    return evaluate(scenes, res.best_params, cfg, tag=spec or "full")
