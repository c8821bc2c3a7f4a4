import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from objdrive import datapipe as dp
from objdrive.controller import Control, action_index, action_name
from objdrive.datapipe import CollectConfig, FormatError, FrameRecord


@pytest.fixture(scope="module")
def minute_episode():
    cfg = CollectConfig(kinds=("urban",), seeds=(3,), duration_s=61.0)
    return dp.collect(cfg)


def synthetic_frames(speeds, yaw=None, ident=0):
    yaw = np.zeros(len(speeds)) if yaw is None else yaw
    img = np.zeros((3, 4, 4), dtype=np.uint8)
    return [FrameRecord(ident, t, img, [], 4, Control(), float(v), float(r)) for t, (v, r) in enumerate(zip(speeds, yaw))]


def files(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


# ---------------------------------------------------------------------------
# labels


def test_discretize_action_examples():
    assert dp.discretize_action(0.0, 5.5) == action_index("straight", "fast")
    assert dp.discretize_action(0.35, 0.0) == action_index("left", "stop")
    assert dp.discretize_action(0.1, 2.0) == action_index("straight", "slow")
    assert dp.discretize_action(-0.1000001, 2.0) == action_index("right", "slow")


def test_discretize_action_inverts_expert_targets():
    for a in range(9):
        assert dp.discretize_action(*dp.expert_targets(a)) == a


def test_speed_angle_bins():
    assert dp.discretize_speed_angle(0.0, -1.0) == 0
    assert dp.discretize_speed_angle(2.778, 0.0) == 15 * 30 + 15 == 465
    assert dp.discretize_speed_angle(5.556, 1.0) == 899
    assert dp.discretize_speed_angle(40.0, 7.0) == 899
    assert dp.discretize_speed_angle(-1.0, -9.0) == 0


@settings(max_examples=200, deadline=None)
@given(st.floats(-10, 10, allow_nan=False), st.floats(-3, 3, allow_nan=False))
def test_speed_angle_total_and_in_range(v, r):
    b = dp.discretize_speed_angle(v, r)
    assert 0 <= b < 900
    assert b == dp.discretize_speed_angle(v, r)


def test_speed_angle_surjective():
    speeds = (np.arange(30) + 0.5) * dp.SPEED_RANGE[1] / 30
    angles = -1 + (np.arange(30) + 0.5) * 2 / 30
    assert {dp.discretize_speed_angle(v, r) for v in speeds for r in angles} == set(range(900))


@settings(max_examples=200, deadline=None)
@given(st.floats(-1, 1, allow_nan=False), st.floats(0, 6, allow_nan=False))
def test_discretize_action_total(offset, speed):
    steer, spd = action_name(dp.discretize_action(offset, speed))
    assert (steer == "left") == (offset > 0.1) and (steer == "right") == (offset < -0.1)
    assert (spd == "stop") == (speed < 0.5) and (spd == "fast") == (speed > 3.5)


def test_future_targets_constant_episode():
    labels = dp.future_targets(synthetic_frames([3.0] * 20))
    assert len({l for l in labels if l is not None}) == 1


def test_future_targets_counts():
    labels = dp.future_targets(synthetic_frames(np.full(732, 1.0)))
    assert sum(l is not None for l in labels) == 728
    assert labels[-4:] == [None] * 4
    assert all(l is None for l in dp.future_targets(synthetic_frames([1.0] * 4)))


def test_future_targets_shifted_ramp():
    # a ramp crossing one speed bin per frame: the label at t must be the bin of frame t+4
    width = dp.SPEED_RANGE[1] / 30
    speeds = (np.arange(30) + 0.5) * width
    labels = dp.future_targets(synthetic_frames(speeds))
    for t in range(26):
        assert labels[t] // 30 == t + 4
    # changing anything but frame t+4 leaves label t alone
    other = speeds.copy()
    other[:10] = 0.0
    other[11:] = 0.0
    assert dp.future_targets(synthetic_frames(other))[6] == labels[6]


# ---------------------------------------------------------------------------
# collection


def test_noise_schedule():
    assert dp.noise_schedule(732, 30.0) == [360]
    assert dp.noise_schedule(733, 30.0) == [360, 720]
    assert dp.noise_schedule(1440, 0.0) == []


def test_minute_episode_counts(minute_episode):
    frames = list(minute_episode.frames())
    assert len(frames) == 732
    noisy = [f.index for f in frames if f.noise]
    assert noisy == list(range(360, 373))
    assert len(dp.training_frames(minute_episode)) == 719
    assert not any(f.intervention for f in frames)


def test_noise_perturbs_executed_steer_only(minute_episode):
    frames = minute_episode.episodes[0].frames
    clean = dp.collect(CollectConfig(kinds=("urban",), seeds=(3,), duration_s=61.0, noise_period_s=0.0))
    other = clean.episodes[0].frames
    # identical until the noise starts, then the trajectory diverges
    assert all(a.image.tobytes() == b.image.tobytes() for a, b in zip(frames[:361], other[:361]))
    assert any(a.image.tobytes() != b.image.tobytes() for a, b in zip(frames[362:380], other[362:380]))
    assert len(dp.training_frames(clean)) == 732


def test_no_training_frame_flagged(minute_episode):
    assert not any(f.flagged for f in dp.training_frames(minute_episode))
    assert not any(f.flagged for f, _ in dp.offline_examples(minute_episode.episodes))


def test_offline_examples_count(minute_episode):
    ex = dp.offline_examples(minute_episode.episodes)
    assert len(ex) == 728 - 13
    assert all(0 <= lab < 900 for _, lab in ex)


def test_collect_deterministic_and_worker_independent(tmp_path):
    cfg = CollectConfig(kinds=("urban", "highway"), seeds=(1,), duration_s=5.0)
    a = dp.write_dataset(dp.collect(cfg), tmp_path / "a")
    b = dp.write_dataset(dp.collect(cfg, jobs=2), tmp_path / "b")
    assert files(a) == files(b)


def test_config_hash_tracks_fields():
    assert CollectConfig().hash() == CollectConfig().hash()
    assert CollectConfig().hash() != CollectConfig(noise_steer=0.4).hash()


def test_config_validation():
    with pytest.raises(ValueError):
        CollectConfig(duration_s=0)


# ---------------------------------------------------------------------------
# container


def test_round_trip_bytes(minute_episode, tmp_path):
    a = dp.write_dataset(minute_episode, tmp_path / "a")
    back = dp.read_dataset(a)
    b = dp.write_dataset(back, tmp_path / "b")
    assert files(a) == files(b)
    for f, g in zip(minute_episode.frames(), back.frames()):
        assert f.image.tobytes() == g.image.tobytes() and len(f.boxes) == len(g.boxes)


def test_read_equals_canonical(minute_episode, tmp_path):
    back = dp.read_dataset(dp.write_dataset(minute_episode, tmp_path / "a"))
    canon = dp.canonicalize(minute_episode)
    for f, g in zip(canon.frames(), back.frames()):
        assert (f.speed, f.angular_velocity, f.control, f.action, f.noise) == \
               (g.speed, g.angular_velocity, g.control, g.action, g.noise)


def test_empty_dataset_round_trips(tmp_path):
    ds = dp.Dataset(dp.make_manifest([], "none"), [])
    a = dp.write_dataset(ds, tmp_path / "a")
    b = dp.write_dataset(dp.read_dataset(a), tmp_path / "b")
    assert files(a) == files(b)


def test_manifest_count_corruption(minute_episode, tmp_path):
    path = dp.write_dataset(minute_episode, tmp_path / "a")
    m = json.loads((path / "manifest.json").read_text())
    m["frame_count"] += 1
    (path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(FormatError) as info:
        dp.read_dataset(path)
    assert info.value.code == "count_mismatch"


@pytest.mark.parametrize("field, value, code", [
    ("version", 2, "version_mismatch"),
    ("binning", {"speed_bins": 10}, "binning_mismatch"),
    ("episode_count", 5, "count_mismatch"),
])
def test_manifest_field_corruption(tmp_path, field, value, code):
    ep = dp.Episode(0, "urban", 0, synthetic_frames([1.0, 2.0]))
    ds = dp.Dataset(dp.make_manifest([ep], "x"), [ep])
    path = dp.write_dataset(ds, tmp_path / "a")
    m = json.loads((path / "manifest.json").read_text())
    m[field] = value
    (path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(FormatError) as info:
        dp.read_dataset(path)
    assert info.value.code == code


@pytest.mark.parametrize("mutate, code", [
    (lambda r: b"XXXX" + r[4:], "bad_magic"),
    (lambda r: r[:4] + b"\x09\x00" + r[6:], "version_mismatch"),
    (lambda r: r[:-5], "truncated"),
    (lambda r: r + b"\x00", "trailing_data"),
    (lambda r: r[:8], "truncated"),
])
def test_episode_corruption(mutate, code):
    raw = dp.encode_episode(synthetic_frames([1.0, 2.0]), (3, 4, 4))
    with pytest.raises(FormatError) as info:
        dp.decode_episode(mutate(raw), 0)
    assert info.value.code == code


def test_missing_manifest(tmp_path):
    with pytest.raises(FormatError) as info:
        dp.read_dataset(tmp_path)
    assert info.value.code == "missing_manifest"


def test_frame_record_validation():
    with pytest.raises(ValueError):
        FrameRecord(0, 0, np.zeros((3, 4, 4), dtype=np.uint8), [], 9, Control(), 0.0, 0.0)
    with pytest.raises(ValueError):
        FrameRecord(0, 0, np.zeros((3, 4, 4)), [], 0, Control(), 0.0, 0.0)
