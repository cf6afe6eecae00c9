"""Trajectory ingestion, synthetic scenarios and fixed-window scene assembly.

Scenes are 16 observed + 25 future steps at 5 Hz, translated so the target's
last observed position is the origin.
"""

from __future__ import annotations

import csv
import json
import zlib
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, SchemaError

HIST_LEN = 16
FUT_LEN = 25
WINDOW = HIST_LEN + FUT_LEN
DT = 0.2
FEET_TO_M = 0.3048

REQUIRED_COLUMNS = ("Vehicle_ID", "Frame_ID", "Local_X", "Local_Y")


@dataclass
class Trajectory:
    agent_id: int
    frames: np.ndarray  # int64, strictly increasing
    xy: np.ndarray  # (len, 2) meters

    def __len__(self) -> int:
        return len(self.frames)

    def position_at(self, frame: int) -> np.ndarray | None:
        i = np.searchsorted(self.frames, frame)
        if i < len(self.frames) and self.frames[i] == frame:
            return self.xy[i]
        return None


@dataclass
class Scene:
    scene_id: str
    target_history: np.ndarray  # (16, 2)
    target_future: np.ndarray  # (25, 2)
    neighbor_histories: np.ndarray  # (n_max, 16, 2)
    neighbor_futures: np.ndarray  # (n_max, 25, 2)
    neighbor_mask: np.ndarray  # (n_max,) bool
    origin: tuple[float, float] = (0.0, 0.0)

    @property
    def n_max(self) -> int:
        return len(self.neighbor_mask)

    def without_neighbors(self) -> "Scene":
        return Scene(
            self.scene_id,
            self.target_history.copy(),
            self.target_future.copy(),
            np.zeros_like(self.neighbor_histories),
            np.zeros_like(self.neighbor_futures),
            np.zeros_like(self.neighbor_mask),
            self.origin,
        )

    def to_record(self) -> dict:
        return {
            "sceneId": self.scene_id,
            "origin": [float(self.origin[0]), float(self.origin[1])],
            "targetHistory": self.target_history.tolist(),
            "neighborHistories": self.neighbor_histories.tolist(),
            "neighborMask": [bool(m) for m in self.neighbor_mask],
            "targetFuture": self.target_future.tolist(),
            "neighborFutures": self.neighbor_futures.tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Scene":
        try:
            mask = np.asarray(rec["neighborMask"], dtype=bool)
            n = len(mask)
            scene = cls(
                scene_id=str(rec["sceneId"]),
                target_history=np.asarray(rec["targetHistory"], dtype=np.float64).reshape(HIST_LEN, 2),
                target_future=np.asarray(rec["targetFuture"], dtype=np.float64).reshape(FUT_LEN, 2),
                neighbor_histories=np.asarray(rec["neighborHistories"], dtype=np.float64).reshape(n, HIST_LEN, 2),
                neighbor_futures=np.asarray(rec["neighborFutures"], dtype=np.float64).reshape(n, FUT_LEN, 2),
                neighbor_mask=mask,
                origin=(float(rec["origin"][0]), float(rec["origin"][1])),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"malformed scene record: {exc}") from exc
        return scene


@dataclass
class DatasetSplit:
    train: list[Scene]
    val: list[Scene]
    test: list[Scene]
    seed: int = 0


@dataclass
class SkipReport:
    short_agents: int = 0
    windows: int = 0
    neighbors_without_coverage: int = 0


# ----------------------------------------------------------------------------
# ingestion


def ingest_csv(path, units: str = "feet") -> list[Trajectory]:
    """Read an NGSIM-style CSV into per-vehicle trajectories in meters.

    Only Vehicle_ID, Frame_ID, Local_X and Local_Y are read; other columns are
    ignored. Frames must strictly increase per vehicle in file order.
    """
    if units not in ("feet", "meters"):
        raise ConfigError(f"units must be 'feet' or 'meters', got {units!r}")
    scale = FEET_TO_M if units == "feet" else 1.0
    rows: dict[int, list[tuple[int, float, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        for col in REQUIRED_COLUMNS:
            if col not in header:
                raise SchemaError(f"missing column {col!r} in {path}")
        reader.fieldnames = header
        for lineno, row in enumerate(reader, start=2):
            try:
                vid = int(row["Vehicle_ID"])
                frame = int(row["Frame_ID"])
                x = float(row["Local_X"]) * scale
                y = float(row["Local_Y"]) * scale
            except (TypeError, ValueError) as exc:
                raise DataError(f"line {lineno}: bad value ({exc})") from exc
            if not (np.isfinite(x) and np.isfinite(y)):
                raise DataError(f"line {lineno}: non-finite coordinate")
            pts = rows.setdefault(vid, [])
            if pts and frame <= pts[-1][0]:
                raise DataError(f"vehicle {vid}: frames not strictly increasing ({pts[-1][0]} then {frame})")
            pts.append((frame, x, y))
    out = []
    for vid in sorted(rows):
        pts = rows[vid]
        out.append(
            Trajectory(
                agent_id=vid,
                frames=np.array([p[0] for p in pts], dtype=np.int64),
                xy=np.array([[p[1], p[2]] for p in pts], dtype=np.float64),
            )
        )
    return out


def resample_5hz(traj: Trajectory, frame_origin: int | None = None) -> Trajectory:
    """Decimate a 10 Hz trajectory to 5 Hz.

    Keeps frames on the even grid counted from ``frame_origin`` (default: the
    trajectory's first frame) and renumbers them ``(frame - origin) // 2``.
    Passing a shared origin keeps several agents on one clock.
    """
    if len(traj) < 2:
        raise DataError(f"vehicle {traj.agent_id}: need at least 2 points to resample, got {len(traj)}")
    if np.any(np.diff(traj.frames) != 1):
        raise DataError(f"vehicle {traj.agent_id}: frames are not uniform 10 Hz (gaps present)")
    origin = int(traj.frames[0]) if frame_origin is None else int(frame_origin)
    keep = (traj.frames - origin) % 2 == 0
    return Trajectory(traj.agent_id, (traj.frames[keep] - origin) // 2, traj.xy[keep].copy())


def resample_all(trajs: Sequence[Trajectory]) -> list[Trajectory]:
    """Resample every trajectory on a common 5 Hz clock; drops agents left with < 1 point."""
    if not trajs:
        return []
    origin = int(min(t.frames[0] for t in trajs))
    out = []
    for t in trajs:
        if len(t) < 2:
            continue
        r = resample_5hz(t, origin)
        if len(r):
            out.append(r)
    return out


# ----------------------------------------------------------------------------
# scene assembly


def _window(traj: Trajectory, start: int) -> np.ndarray | None:
    i = np.searchsorted(traj.frames, start)
    j = i + WINDOW
    if j > len(traj.frames) or traj.frames[i] != start or traj.frames[j - 1] != start + WINDOW - 1:
        return None
    return traj.xy[i:j]


def assemble_scene(
    scene_id: str,
    target: np.ndarray,
    others: Sequence[np.ndarray],
    radius_m: float,
    n_max: int,
) -> Scene:
    """Build one normalized Scene from absolute 41-step windows.

    Neighbors are the ``others`` within ``radius_m`` of the target at the
    last observed step, nearest first, capped at ``n_max``.
    """
    origin = target[HIST_LEN - 1].copy()
    cands = []
    for k, other in enumerate(others):
        dist = float(np.hypot(*(other[HIST_LEN - 1] - origin)))
        if dist <= radius_m:
            cands.append((dist, k))
    cands.sort()
    chosen = [others[k] for _, k in cands[:n_max]]

    nh = np.zeros((n_max, HIST_LEN, 2))
    nf = np.zeros((n_max, FUT_LEN, 2))
    mask = np.zeros(n_max, dtype=bool)
    for slot, w in enumerate(chosen):
        rel = w - origin
        nh[slot] = rel[:HIST_LEN]
        nf[slot] = rel[HIST_LEN:]
        mask[slot] = True
    rel = target - origin
    return Scene(scene_id, rel[:HIST_LEN].copy(), rel[HIST_LEN:].copy(), nh, nf, mask, (float(origin[0]), float(origin[1])))


def build_scenes(
    trajs: Sequence[Trajectory],
    radius_m: float = 30.0,
    n_max: int = 8,
    stride: int = 1,
    source: str = "scene",
    report: SkipReport | None = None,
) -> list[Scene]:
    """Slide a 41-step window over every agent with full coverage.

    Neighbors need full coverage of the same window; agents or neighbors
    without it are skipped and counted in ``report``.
    """
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    report = report if report is not None else SkipReport()
    scenes = []
    for target in trajs:
        if len(target) < WINDOW:
            report.short_agents += 1
            continue
        for start in range(int(target.frames[0]), int(target.frames[-1]) - WINDOW + 2, stride):
            tw = _window(target, start)
            if tw is None:
                report.windows += 1
                continue
            last = start + HIST_LEN - 1
            others = []
            for other in trajs:
                if other.agent_id == target.agent_id or other.position_at(last) is None:
                    continue
                ow = _window(other, start)
                if ow is None:
                    report.neighbors_without_coverage += 1
                    continue
                others.append(ow)
            scenes.append(assemble_scene(f"{source}:{target.agent_id}:{start}", tw, others, radius_m, n_max))
    return scenes


# ----------------------------------------------------------------------------
# synthetic scenarios

SYNTHETIC_KINDS = ("constant_velocity", "lane_change", "braking_interaction")
LANE_WIDTH = 3.5
LEADER_DECEL = 3.0  # m/s^2
STOP_MARGIN = 5.0  # m left between follower and leader once both have stopped


def _cv_track(x0: float, y0: float, v: float) -> np.ndarray:
    t = np.arange(WINDOW) * DT
    return np.stack([x0 + v * t, np.full(WINDOW, y0)], axis=1)


def _braking_track(x0: float, y0: float, v0: float, t_start: float | None, decel: float) -> np.ndarray:
    t = np.arange(WINDOW) * DT
    if t_start is None:
        return np.stack([x0 + v0 * t, np.full(WINDOW, y0)], axis=1)
    t_stop = t_start + v0 / decel
    tau = np.clip(t - t_start, 0.0, None)
    tau = np.minimum(tau, t_stop - t_start)
    x = x0 + v0 * np.minimum(t, t_start) + v0 * tau - 0.5 * decel * tau**2
    return np.stack([x, np.full(WINDOW, y0)], axis=1)


def _side_traffic(rng: np.random.Generator, count: int, x_ref: float, v_ref: float) -> list[np.ndarray]:
    tracks = []
    for _ in range(count):
        lane = rng.choice([-1.0, 1.0]) * LANE_WIDTH
        x0 = x_ref + rng.uniform(-15.0, 15.0)
        v = float(np.clip(v_ref + rng.uniform(-3.0, 3.0), 1.0, None))
        tracks.append(_cv_track(x0, lane, v))
    return tracks


def gen_synthetic(
    kind: str,
    count: int,
    seed: int,
    noise_std: float = 0.05,
    n_max: int = 8,
    radius_m: float = 30.0,
) -> list[Scene]:
    """Seeded synthetic highway scenes.

    constant_velocity: straight motion at 5-30 m/s with 0-2 vehicles in
    adjacent lanes. lane_change: a 3.5 m lateral sigmoid shift. braking_interaction:
    a leader that may brake at 3 m/s^2 early in the observed window and a
    follower (the target) that brakes after a 1.6-2.0 s reaction delay, hard
    enough to stop 5 m behind the leader. The follower's braking starts near
    the end of its history, so its future is read off the leader's history.
    """
    if kind not in SYNTHETIC_KINDS:
        raise ConfigError(f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")
    if count < 1:
        raise ConfigError("count must be >= 1")
    rng = np.random.default_rng(seed)
    scenes = []
    for i in range(count):
        x_ref = rng.uniform(0.0, 500.0)
        if kind == "constant_velocity":
            v = rng.uniform(5.0, 30.0)
            target = _cv_track(x_ref, 0.0, v)
            others = _side_traffic(rng, int(rng.integers(0, 3)), x_ref, v)
        elif kind == "lane_change":
            v = rng.uniform(10.0, 30.0)
            target = _cv_track(x_ref, 0.0, v)
            t_mid = rng.uniform(2.0, 6.0)
            width = rng.uniform(0.3, 0.6)
            direction = rng.choice([-1.0, 1.0])
            t = np.arange(WINDOW) * DT
            target[:, 1] = direction * LANE_WIDTH / (1.0 + np.exp(-(t - t_mid) / width))
            others = _side_traffic(rng, int(rng.integers(0, 3)), x_ref, v)
        else:
            v0 = rng.uniform(12.0, 25.0)
            gap = rng.uniform(15.0, 25.0)
            brakes = rng.random() < 0.5
            t_brake = rng.uniform(0.8, 1.6) if brakes else None
            delay = rng.uniform(1.6, 2.0)
            leader = _braking_track(x_ref + gap, 0.0, v0, t_brake, LEADER_DECEL)
            if t_brake is None:
                target = _braking_track(x_ref, 0.0, v0, None, LEADER_DECEL)
            else:
                # brake just hard enough to stop STOP_MARGIN behind the leader's stopping point
                room = gap + v0**2 / (2 * LEADER_DECEL) - v0 * delay - STOP_MARGIN
                decel = float(np.clip(v0**2 / (2 * max(room, 1e-6)), 1.0, 9.0))
                target = _braking_track(x_ref, 0.0, v0, t_brake + delay, decel)
            others = [leader] + _side_traffic(rng, int(rng.integers(0, 2)), x_ref, v0)
        if noise_std > 0:
            target = target + rng.normal(0.0, noise_std, target.shape)
            others = [o + rng.normal(0.0, noise_std, o.shape) for o in others]
        scenes.append(assemble_scene(f"{kind}:{seed}:{i}", target, others, radius_m, n_max))
    return scenes


# ----------------------------------------------------------------------------
# splits and persistence


def split_dataset(scenes: Sequence[Scene], fractions=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    """Seeded shuffle, then floor-sized val/test with the remainder going to train."""
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three positive numbers summing to 1, got {fractions}")
    n = len(scenes)
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(np.floor(fr[1] * n))
    n_test = int(np.floor(fr[2] * n))
    n_train = n - n_val - n_test
    pick = [scenes[i] for i in order]
    return DatasetSplit(pick[:n_train], pick[n_train : n_train + n_val], pick[n_train + n_val :], seed)


def save_scenes(scenes: Iterable[Scene], path) -> None:
    with open(path, "w") as fh:
        for s in scenes:
            fh.write(json.dumps(s.to_record()) + "\n")


def load_scenes(path) -> list[Scene]:
    scenes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            scenes.append(Scene.from_record(rec))
    return scenes


def scene_key(scene_id: str) -> int:
    """Stable 32-bit key used to derive per-scene RNG streams."""
    return zlib.crc32(scene_id.encode("utf-8"))


def pad_neighbors(scene: Scene, n_max: int) -> Scene:
    """Return ``scene`` with neighbor slots truncated or zero-padded to ``n_max``."""
    n = scene.n_max
    if n == n_max:
        return scene
    nh = np.zeros((n_max, HIST_LEN, 2))
    nf = np.zeros((n_max, FUT_LEN, 2))
    mask = np.zeros(n_max, dtype=bool)
    k = min(n, n_max)
    nh[:k] = scene.neighbor_histories[:k]
    nf[:k] = scene.neighbor_futures[:k]
    mask[:k] = scene.neighbor_mask[:k]
    return Scene(scene.scene_id, scene.target_history, scene.target_future, nh, nf, mask, scene.origin)
