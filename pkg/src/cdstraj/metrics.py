"""Per-horizon RMSE reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import Scene
from .errors import ContractError

HORIZON_STEPS = (5, 10, 15, 20, 25)  # 1..5 s at 5 Hz
REPORT_HEADER = ("horizon_s", "rmse_m", "min_over_k_rmse_m")


@dataclass
class MetricsReport:
    rmse_per_second: list[float]
    min_over_k: list[float]
    scene_count: int
    model_tag: str = ""
    extra: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for s, (r, m) in enumerate(zip(self.rmse_per_second, self.min_over_k), start=1):
            w.writerow([s, f"{r:.6f}", f"{m:.6f}"])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def horizon_errors(means: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Euclidean errors at the 1..5 s steps; means (..., 25, 2) vs truth broadcastable."""
    idx = np.array(HORIZON_STEPS) - 1
    return np.linalg.norm(means[..., idx, :] - truth[..., idx, :], axis=-1)


def rmse_per_horizon(predictions: Mapping[str, np.ndarray], scenes: Sequence[Scene], model_tag: str = "") -> MetricsReport:
    """RMSE at 1..5 s over scenes.

    ``predictions`` maps scene id to a (K, 25, 2) array of mean positions
    (a list of PredictedTrajectory also works). Sample 0 gives the headline
    RMSE. ``min_over_k`` picks, for each scene and horizon, the sample with
    the smallest error at that horizon's endpoint.
    """
    if not scenes:
        raise ContractError("rmse_per_horizon needs at least one scene")
    first, best = [], []
    for s in scenes:
        if s.scene_id not in predictions:
            raise ContractError(f"missing predictions for scene {s.scene_id!r}")
        p = predictions[s.scene_id]
        if not isinstance(p, np.ndarray):
            p = np.stack([t.mu for t in p])
        p = np.asarray(p, dtype=np.float64)
        if p.ndim == 2:
            p = p[None]
        err = horizon_errors(p, s.target_future[None])  # (K, 5)
        first.append(err[0])
        best.append(err.min(axis=0))
    first = np.array(first)
    best = np.array(best)
    rmse = np.sqrt(np.mean(first**2, axis=0))
    min_k = np.sqrt(np.mean(best**2, axis=0))
    return MetricsReport([float(v) for v in rmse], [float(v) for v in min_k], len(scenes), model_tag)


def write_plot(report: MetricsReport, path) -> None:
    """SVG line chart of RMSE against horizon."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "cdstraj"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    hs = list(range(1, 6))
    ax.plot(hs, report.rmse_per_second, marker="o", label="first sample")
    ax.plot(hs, report.min_over_k, marker="s", linestyle="--", label="min over K")
    ax.set_xlabel("prediction horizon (s)")
    ax.set_ylabel("RMSE (m)")
    ax.set_xticks(hs)
    if report.model_tag:
        ax.set_title(report.model_tag)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
