from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdstraj import data
from cdstraj.data import FUT_LEN, HIST_LEN, WINDOW, Scene, Trajectory
from cdstraj.errors import ConfigError, DataError, SchemaError

FIXTURE = Path(__file__).parent / "fixtures" / "ngsim_small.csv"


def write_csv(path, header, rows):
    path.write_text(",".join(header) + "\n" + "".join(",".join(map(str, r)) + "\n" for r in rows))
    return path


def line_track(agent_id, n, x0=0.0, y0=0.0, vx=1.0, vy=0.0, frame0=0):
    t = np.arange(n, dtype=float)
    return Trajectory(agent_id, np.arange(frame0, frame0 + n), np.stack([x0 + vx * t, y0 + vy * t], axis=1))


class TestIngest:
    def test_feet_conversion(self, tmp_path):
        p = write_csv(tmp_path / "a.csv", ["Vehicle_ID", "Frame_ID", "Local_X", "Local_Y"], [(1, 1, 3.2808, 0), (1, 2, 3.2808, 0)])
        (traj,) = data.ingest_csv(p, units="feet")
        assert traj.xy[0, 0] == pytest.approx(1.0, abs=1e-4)

    def test_meters_untouched(self, tmp_path):
        p = write_csv(tmp_path / "a.csv", ["Vehicle_ID", "Frame_ID", "Local_X", "Local_Y"], [(1, 1, 3.5, 2.0)])
        (traj,) = data.ingest_csv(p, units="meters")
        assert traj.xy.tolist() == [[3.5, 2.0]]

    def test_non_monotone_frames(self, tmp_path):
        p = write_csv(tmp_path / "a.csv", ["Vehicle_ID", "Frame_ID", "Local_X", "Local_Y"], [(7, 1, 0, 0), (7, 3, 0, 0), (7, 2, 0, 0)])
        with pytest.raises(DataError, match="vehicle 7"):
            data.ingest_csv(p)

    def test_missing_column_named(self, tmp_path):
        p = write_csv(tmp_path / "a.csv", ["Vehicle_ID", "Frame_ID", "Local_X"], [(1, 1, 0)])
        with pytest.raises(SchemaError, match="Local_Y"):
            data.ingest_csv(p)

    def test_bad_units(self):
        with pytest.raises(ConfigError):
            data.ingest_csv(FIXTURE, units="furlongs")

    def test_fixture_lengths_match_row_counts(self):
        counts = {}
        for line in FIXTURE.read_text().splitlines()[1:]:
            vid = int(line.split(",")[0])
            counts[vid] = counts.get(vid, 0) + 1
        trajs = data.ingest_csv(FIXTURE)
        assert len(trajs) == 3
        assert {t.agent_id: len(t) for t in trajs} == counts


class TestResample:
    def test_decimates_even_indices(self):
        tr = line_track(1, 10, frame0=40)
        out = data.resample_5hz(tr)
        assert len(out) == 5
        np.testing.assert_array_equal(out.xy, tr.xy[::2])
        np.testing.assert_array_equal(out.frames, np.arange(5))

    def test_constant_position(self):
        tr = Trajectory(1, np.arange(6), np.tile([[4.0, -1.0]], (6, 1)))
        np.testing.assert_array_equal(data.resample_5hz(tr).xy, np.tile([[4.0, -1.0]], (3, 1)))

    def test_linear_motion(self):
        tr = line_track(1, 20, vx=0.1)  # x = 0.1 * frame
        out = data.resample_5hz(tr)
        np.testing.assert_allclose(out.xy[:, 0], 0.2 * out.frames, atol=1e-12)

    def test_too_short(self):
        with pytest.raises(DataError):
            data.resample_5hz(line_track(1, 1))

    def test_gap_rejected(self):
        tr = Trajectory(1, np.array([0, 1, 3, 4]), np.zeros((4, 2)))
        with pytest.raises(DataError):
            data.resample_5hz(tr)

    def test_shared_clock_keeps_agents_aligned(self):
        a, b = line_track(1, 10, frame0=100), line_track(2, 10, frame0=101)
        ra, rb = data.resample_all([a, b])
        # b starts on an odd frame of the shared clock, so its first kept sample is frame 102
        assert rb.frames[0] == 1 and ra.frames[1] == 1
        np.testing.assert_array_equal(rb.xy[0], b.xy[1])


class TestBuildScenes:
    def test_isolated_agent(self):
        (scene,) = data.build_scenes([line_track(1, WINDOW)], radius_m=30, n_max=4)
        assert not scene.neighbor_mask.any()
        assert scene.target_history.shape == (HIST_LEN, 2)
        assert scene.target_future.shape == (FUT_LEN, 2)

    def test_symmetric_inclusion(self):
        a, b = line_track(1, WINDOW), line_track(2, WINDOW, y0=5.0)
        scenes = {s.scene_id.split(":")[1]: s for s in data.build_scenes([a, b], radius_m=10, n_max=4)}
        assert scenes["1"].neighbor_mask.sum() == 1 and scenes["2"].neighbor_mask.sum() == 1
        np.testing.assert_allclose(scenes["1"].neighbor_histories[0, -1], [0.0, 5.0])
        np.testing.assert_allclose(scenes["2"].neighbor_histories[0, -1], [0.0, -5.0])

    def test_nearest_first_truncated(self):
        target = line_track(0, WINDOW)
        others = [line_track(i + 1, WINDOW, y0=d) for i, d in enumerate([12.0, 2.0, 8.0])]
        (scene,) = [s for s in data.build_scenes([target] + others, radius_m=10, n_max=2) if s.scene_id.endswith(":0:0")]
        assert scene.neighbor_mask.tolist() == [True, True]
        np.testing.assert_allclose(scene.neighbor_histories[:, -1, 1], [2.0, 8.0])

    def test_window_count_and_stride(self):
        tr = line_track(1, WINDOW + 4)
        assert len(data.build_scenes([tr])) == 5
        assert len(data.build_scenes([tr], stride=2)) == 3

    def test_partial_neighbor_skipped_and_counted(self):
        target = line_track(1, WINDOW)
        partial = line_track(2, 20, y0=3.0)  # present at last history step, gone later
        report = data.SkipReport()
        (scene,) = [s for s in data.build_scenes([target, partial], report=report) if s.scene_id.endswith(":1:0")]
        assert not scene.neighbor_mask.any()
        assert report.neighbors_without_coverage == 1
        assert report.short_agents == 1

    def test_fixture_pipeline(self):
        trajs = data.resample_all(data.ingest_csv(FIXTURE))
        report = data.SkipReport()
        scenes = data.build_scenes(trajs, report=report)
        # 90 rows -> 45 steps -> 5 windows; 84 rows -> 42 steps -> 2 windows; 29 rows too short
        assert len(scenes) == 7
        assert report.short_agents == 1
        again = data.build_scenes(data.resample_all(data.ingest_csv(FIXTURE)))
        assert [s.to_record() for s in scenes] == [s.to_record() for s in again]

    def test_bad_stride(self):
        with pytest.raises(ConfigError):
            data.build_scenes([], stride=0)


def check_scene_invariants(s: Scene, radius=None):
    assert s.target_history.shape == (HIST_LEN, 2) and s.target_future.shape == (FUT_LEN, 2)
    assert np.abs(s.target_history[-1]).max() <= 1e-9
    off = ~s.neighbor_mask
    assert np.all(s.neighbor_histories[off] == 0.0) and np.all(s.neighbor_futures[off] == 0.0)
    # unmasked slots are packed first and sorted by distance at the last history step
    k = int(s.neighbor_mask.sum())
    assert s.neighbor_mask[:k].all()
    dist = np.hypot(*s.neighbor_histories[:k, -1].T)
    assert np.all(np.diff(dist) >= 0)
    if radius is not None:
        assert np.all(dist <= radius + 1e-9)


@settings(max_examples=30, deadline=None)
@given(
    n_agents=st.integers(1, 6),
    seed=st.integers(0, 10_000),
    radius=st.floats(2.0, 40.0),
    n_max=st.integers(0, 4),
)
def test_build_scenes_invariants(n_agents, seed, radius, n_max):
    rng = np.random.default_rng(seed)
    trajs = []
    for i in range(n_agents):
        n = int(rng.integers(WINDOW - 5, WINDOW + 6))
        trajs.append(line_track(i, n, x0=rng.uniform(-20, 20), y0=rng.uniform(-20, 20), vx=rng.uniform(0, 2), frame0=int(rng.integers(0, 4))))
    for s in data.build_scenes(trajs, radius_m=radius, n_max=n_max):
        check_scene_invariants(s, radius)
        assert s.n_max == n_max


class TestSynthetic:
    @pytest.mark.parametrize("kind", data.SYNTHETIC_KINDS)
    def test_deterministic_and_valid(self, kind):
        a = data.gen_synthetic(kind, 20, 3)
        b = data.gen_synthetic(kind, 20, 3)
        assert [s.to_record() for s in a] == [s.to_record() for s in b]
        for s in a:
            check_scene_invariants(s, 30.0)

    def test_noiseless_constant_velocity_kinematics(self):
        for s in data.gen_synthetic("constant_velocity", 10, 1, noise_std=0.0):
            v = (s.target_history[-1] - s.target_history[-2]) / data.DT
            k = np.arange(1, FUT_LEN + 1)[:, None]
            np.testing.assert_allclose(s.target_future, s.target_history[-1] + v * k * data.DT, atol=1e-9)
            assert 5.0 <= v[0] <= 30.0

    def test_lane_change_shifts_one_lane(self):
        for s in data.gen_synthetic("lane_change", 10, 2, noise_std=0.0):
            y = np.concatenate([s.target_history[:, 1], s.target_future[:, 1]])
            assert abs(y[-1] - y[0]) <= data.LANE_WIDTH + 1e-9
            assert abs(y[-1] - y[0]) > 0.5

    @staticmethod
    def leader(s):
        # the only neighbor in the target's own lane
        (k,) = [k for k in np.flatnonzero(s.neighbor_mask) if abs(s.neighbor_histories[k, -1, 1]) < 1e-9]
        return k

    def test_braking_leader_ahead_in_lane(self):
        for s in data.gen_synthetic("braking_interaction", 20, 4, noise_std=0.0):
            lead = s.neighbor_histories[self.leader(s), -1]
            assert 0.0 < lead[0] <= 25.0 + 1e-9  # initial gap 15-25 m, may close while braking

    def test_braking_follower_reacts_to_leader(self):
        # in the scenes where the leader brakes during the history, the follower later decelerates
        braked = 0
        for s in data.gen_synthetic("braking_interaction", 60, 5, noise_std=0.0):
            lead_v = np.diff(s.neighbor_histories[self.leader(s), :, 0]) / data.DT
            fut_v = np.diff(s.target_future[:, 0]) / data.DT
            if lead_v[-1] < lead_v[0] - 1e-6:
                braked += 1
                assert fut_v[-1] < fut_v[0] - 0.5
            else:
                np.testing.assert_allclose(fut_v, fut_v[0], atol=1e-9)
        assert braked > 10

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            data.gen_synthetic("teleport", 3, 0)

    def test_zero_count(self):
        with pytest.raises(ConfigError):
            data.gen_synthetic("constant_velocity", 0, 0)


class TestSplit:
    def scenes(self, n):
        return data.gen_synthetic("constant_velocity", n, 0, n_max=1)

    def test_sizes(self):
        sp = data.split_dataset(self.scenes(10), (0.8, 0.1, 0.1), seed=1)
        assert (len(sp.train), len(sp.val), len(sp.test)) == (8, 1, 1)

    def test_seeded_and_partition(self):
        sc = self.scenes(23)
        a = data.split_dataset(sc, seed=5)
        b = data.split_dataset(sc, seed=5)
        ids = lambda xs: [s.scene_id for s in xs]  # noqa: E731
        assert ids(a.train) == ids(b.train) and ids(a.val) == ids(b.val)
        parts = [set(ids(a.train)), set(ids(a.val)), set(ids(a.test))]
        assert parts[0] | parts[1] | parts[2] == set(ids(sc))
        assert sum(map(len, parts)) == len(sc)

    @pytest.mark.parametrize("fr", [(0.5, 0.5, 0.1), (1.0, 0.0, 0.0), (0.9, 0.1)])
    def test_bad_fractions(self, fr):
        with pytest.raises(ConfigError):
            data.split_dataset(self.scenes(3), fr)


class TestPersistence:
    def test_roundtrip_exact(self, tmp_path):
        sc = data.gen_synthetic("braking_interaction", 5, 9)
        data.save_scenes(sc, tmp_path / "s.ndjson")
        back = data.load_scenes(tmp_path / "s.ndjson")
        assert [s.to_record() for s in back] == [s.to_record() for s in sc]

    def test_record_keys(self):
        rec = data.gen_synthetic("constant_velocity", 1, 0)[0].to_record()
        assert set(rec) == {"sceneId", "origin", "targetHistory", "neighborHistories", "neighborMask", "targetFuture", "neighborFutures"}

    def test_malformed(self, tmp_path):
        p = tmp_path / "bad.ndjson"
        p.write_text('{"sceneId": "x"}\n')
        with pytest.raises(DataError):
            data.load_scenes(p)
        p.write_text("{not json\n")
        with pytest.raises(DataError, match=":1:"):
            data.load_scenes(p)

    def test_pad_and_truncate(self):
        s = data.gen_synthetic("braking_interaction", 1, 0, n_max=3)[0]
        wide = data.pad_neighbors(s, 5)
        assert wide.n_max == 5 and not wide.neighbor_mask[3:].any()
        narrow = data.pad_neighbors(s, 1)
        np.testing.assert_array_equal(narrow.neighbor_histories[0], s.neighbor_histories[0])

    def test_scene_key_stable(self):
        assert data.scene_key("abc") == data.scene_key("abc") == 891568578
