"""Expert demonstration collection, label discretization, and the episode file format.

A dataset is a directory holding ``manifest.json`` plus one little-endian
binary file per episode under ``episodes/``.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .controller import Control, action_index, decode
from .perception import BoundingBox
from .simworld.render import IMAGE_SIZE, ground_truth_boxes, render
from .simworld.expert import expert_control
from .simworld.world import DT, FPS, SPEED_CAP, collision_check, intervention, spawn_scenario, step

MAGIC = b"OBJD"
FORMAT_VERSION = 1
MANIFEST_VERSION = 1

FLAG_NOISE = 1
FLAG_INTERVENTION = 2

BOX_CLASSES = ("vehicle", "pedestrian")

STEER_THRESHOLD = 0.1
STOP_BELOW = 0.5
FAST_ABOVE = 3.5

SPEED_BINS = 30
ANGLE_BINS = 30
SPEED_RANGE = (0.0, SPEED_CAP)
ANGULAR_RANGE = (-1.0, 1.0)
FUTURE_HORIZON = 4

_HEADER = struct.Struct("<4sHIHHH")
_FRAME = struct.Struct("<IBBfffffH")
_BOX = struct.Struct("<Bffff")


class FormatError(Exception):
    """Structured container error; ``code`` names what went wrong."""

    def __init__(self, code: str, path, detail: str):
        super().__init__(f"{code}: {path}: {detail}")
        self.code = code
        self.path = str(path)
        self.detail = detail


# ---------------------------------------------------------------------------
# records


@dataclass
class FrameRecord:
    episode: int
    index: int
    image: np.ndarray               # (C, H, W) uint8
    boxes: list[BoundingBox]
    action: int
    control: Control
    speed: float
    angular_velocity: float
    noise: bool = False
    intervention: bool = False

    def __post_init__(self):
        if not 0 <= int(self.action) < 9:
            raise ValueError(f"action {self.action} outside [0, 8]")
        if self.image.dtype != np.uint8 or self.image.ndim != 3:
            raise ValueError("image must be a (C, H, W) uint8 array")

    @property
    def flagged(self) -> bool:
        return self.noise or self.intervention

    def image_float(self) -> np.ndarray:
        return self.image.astype(np.float64) / 255.0


@dataclass
class Episode:
    ident: int
    kind: str
    seed: int
    frames: list[FrameRecord]


@dataclass
class DatasetManifest:
    version: int
    image_shape: tuple[int, int, int]
    frame_count: int
    episode_count: int
    dt: float
    binning: dict
    config_hash: str
    episodes: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        return json.dumps(d, indent=1, sort_keys=True) + "\n"


@dataclass
class Dataset:
    manifest: DatasetManifest
    episodes: list[Episode]

    def frames(self):
        for ep in self.episodes:
            yield from ep.frames


def quantize_image(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def binning_spec() -> dict:
    return {"speed_bins": SPEED_BINS, "speed_range": list(SPEED_RANGE), "angle_bins": ANGLE_BINS,
            "angular_range": list(ANGULAR_RANGE), "horizon": FUTURE_HORIZON,
            "steer_threshold": STEER_THRESHOLD, "stop_below": STOP_BELOW, "fast_above": FAST_ABOVE}


# ---------------------------------------------------------------------------
# discretization


def discretize_action(heading_offset: float, target_speed: float) -> int:
    if heading_offset > STEER_THRESHOLD:
        steer = "left"
    elif heading_offset < -STEER_THRESHOLD:
        steer = "right"
    else:
        steer = "straight"
    if target_speed < STOP_BELOW:
        speed = "stop"
    elif target_speed > FAST_ABOVE:
        speed = "fast"
    else:
        speed = "slow"
    return action_index(steer, speed)


def _bin(x: float, lo: float, hi: float, n: int) -> int:
    x = min(max(x, lo), hi)
    return min(n - 1, int(math.floor((x - lo) / (hi - lo) * n)))


def discretize_speed_angle(speed: float, angular_velocity: float) -> int:
    """Joint 30x30 bin of (speed, angular velocity), inputs clipped to range."""
    sb = _bin(speed, *SPEED_RANGE, SPEED_BINS)
    ab = _bin(angular_velocity, *ANGULAR_RANGE, ANGLE_BINS)
    return sb * ANGLE_BINS + ab


def future_targets(frames: list[FrameRecord], horizon: int = FUTURE_HORIZON) -> list[int | None]:
    """900-way label per frame from the motion ``horizon`` frames later; None at the tail."""
    n = len(frames)
    out: list[int | None] = [None] * n
    for t in range(n - horizon):
        f = frames[t + horizon]
        out[t] = discretize_speed_angle(f.speed, f.angular_velocity)
    return out


# ---------------------------------------------------------------------------
# collection


@dataclass(frozen=True)
class CollectConfig:
    kinds: tuple[str, ...] = ("urban", "highway")
    seeds: tuple[int, ...] = tuple(range(8))
    duration_s: float = 120.0
    noise_period_s: float = 30.0     # 0 disables noise injection
    noise_frames: int = 6
    drop_after: int = 7
    noise_steer: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(self.kinds))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.duration_s <= 0 or self.noise_period_s < 0 or self.noise_frames < 0 or self.drop_after < 0:
            raise ValueError("collection lengths must be nonnegative (duration positive)")

    @property
    def n_frames(self) -> int:
        return int(round(self.duration_s * FPS))

    def hash(self) -> str:
        raw = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(raw).hexdigest()[:16]


def noise_schedule(n_frames: int, period_s: float, noise_frames: int = 6, drop_after: int = 7) -> list[int]:
    """Start frames of noise events: every period, only if the whole flagged window fits."""
    if period_s <= 0 or noise_frames == 0:
        return []
    period = int(round(period_s * FPS))
    window = noise_frames + drop_after
    return [t for t in range(period, n_frames, period) if t + window <= n_frames]


def collect_episode(kind: str, seed: int, ident: int, cfg: CollectConfig) -> Episode:
    w = spawn_scenario(kind, seed)
    n = cfg.n_frames
    noise_rng = np.random.default_rng([seed, 7919])
    starts = noise_schedule(n, cfg.noise_period_s, cfg.noise_frames, cfg.drop_after)
    offsets = {t: float(noise_rng.uniform(-cfg.noise_steer, cfg.noise_steer)) for t in starts}
    frames = []
    offset = 0.0
    noisy_until = flagged_until = -1
    for t in range(n):
        if t in offsets:
            offset = offsets[t]
            noisy_until = t + cfg.noise_frames
            flagged_until = noisy_until + cfg.drop_after
        img = quantize_image(render(w))
        boxes = ground_truth_boxes(w)
        speed, yaw = w.ego.speed, w.ego.yaw_rate
        was_intervening = w.intervention.active
        control, label = expert_control(w)
        executed = control
        if t < noisy_until:
            executed = Control(control.throttle, control.brake, control.steer + offset).clamped()
        step(w, executed)
        events = collision_check(w)
        events += intervention(w, bool(events))
        frames.append(FrameRecord(ident, t, img, boxes, label, control, speed, yaw,
                                  noise=t < flagged_until, intervention=was_intervening or bool(events)))
    return Episode(ident, kind, seed, frames)


def _collect_job(args):
    return collect_episode(*args)


def collect(cfg: CollectConfig, jobs: int = 1) -> Dataset:
    """Expert demonstrations for every (kind, seed); episode ids follow that order."""
    plan = [(kind, seed, i, cfg) for i, (kind, seed) in enumerate((k, s) for k in cfg.kinds for s in cfg.seeds)]
    if jobs > 1 and len(plan) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            episodes = list(ex.map(_collect_job, plan))
    else:
        episodes = [_collect_job(p) for p in plan]
    return Dataset(make_manifest(episodes, cfg.hash()), episodes)


def make_manifest(episodes: list[Episode], config_hash: str) -> DatasetManifest:
    shape = tuple(int(v) for v in episodes[0].frames[0].image.shape) if episodes and episodes[0].frames \
        else (3, IMAGE_SIZE, IMAGE_SIZE)
    entries = [{"id": ep.ident, "kind": ep.kind, "seed": ep.seed, "frames": len(ep.frames),
                "file": f"episodes/ep_{ep.ident}.bin"} for ep in episodes]
    return DatasetManifest(MANIFEST_VERSION, shape, sum(len(e.frames) for e in episodes), len(episodes),
                           DT, binning_spec(), config_hash, entries)


def training_frames(ds: Dataset) -> list[FrameRecord]:
    return [f for f in ds.frames() if not f.flagged]


def offline_examples(episodes: list[Episode]) -> list[tuple[FrameRecord, int]]:
    """(frame, 900-way label) pairs with flagged and unlabeled frames removed."""
    out = []
    for ep in episodes:
        for f, lab in zip(ep.frames, future_targets(ep.frames)):
            if lab is not None and not f.flagged:
                out.append((f, lab))
    return out


# ---------------------------------------------------------------------------
# binary container


def encode_episode(frames: list[FrameRecord], shape: tuple[int, int, int]) -> bytes:
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(frames), *shape)]
    for f in frames:
        if tuple(f.image.shape) != tuple(shape):
            raise ValueError(f"frame {f.index} image shape {f.image.shape} != {shape}")
        flags = (FLAG_NOISE if f.noise else 0) | (FLAG_INTERVENTION if f.intervention else 0)
        c = f.control
        parts.append(_FRAME.pack(f.index, f.action, flags, f.speed, f.angular_velocity,
                                 c.throttle, c.brake, c.steer, len(f.boxes)))
        for b in f.boxes:
            parts.append(_BOX.pack(BOX_CLASSES.index(b.cls), b.x_min, b.y_min, b.x_max, b.y_max))
        parts.append(f.image.tobytes())
    return b"".join(parts)


def _f32(x: float) -> float:
    return float(np.float32(x))


def decode_episode(raw: bytes, ident: int, path="<bytes>") -> tuple[list[FrameRecord], tuple[int, int, int]]:
    if len(raw) < _HEADER.size:
        raise FormatError("truncated", path, "file shorter than header")
    magic, version, count, c, h, w = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError("bad_magic", path, f"magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError("version_mismatch", path, f"version {version}, expected {FORMAT_VERSION}")
    shape = (c, h, w)
    img_bytes = c * h * w
    pos = _HEADER.size
    frames = []
    try:
        for _ in range(count):
            idx, action, flags, speed, yaw, thr, brk, st, nbox = _FRAME.unpack_from(raw, pos)
            pos += _FRAME.size
            boxes = []
            for _ in range(nbox):
                cls, x0, y0, x1, y1 = _BOX.unpack_from(raw, pos)
                pos += _BOX.size
                if cls >= len(BOX_CLASSES):
                    raise FormatError("bad_record", path, f"box class {cls}")
                boxes.append(BoundingBox(BOX_CLASSES[cls], x0, y0, x1, y1))
            if pos + img_bytes > len(raw):
                raise struct.error("image truncated")
            img = np.frombuffer(raw, dtype=np.uint8, count=img_bytes, offset=pos).reshape(shape).copy()
            pos += img_bytes
            if action > 8 or flags > 3:
                raise FormatError("bad_record", path, f"frame {idx}: action {action} flags {flags}")
            frames.append(FrameRecord(ident, idx, img, boxes, action, Control(thr, brk, st), speed, yaw,
                                      noise=bool(flags & FLAG_NOISE), intervention=bool(flags & FLAG_INTERVENTION)))
    except struct.error as e:
        raise FormatError("truncated", path, f"after {len(frames)} of {count} frames: {e}") from None
    if pos != len(raw):
        raise FormatError("trailing_data", path, f"{len(raw) - pos} unread bytes")
    return frames, shape


def _canonical_frame(f: FrameRecord) -> FrameRecord:
    """Round float fields to what the container stores."""
    c = f.control
    return FrameRecord(f.episode, f.index, f.image, f.boxes, f.action,
                       Control(_f32(c.throttle), _f32(c.brake), _f32(c.steer)), _f32(f.speed),
                       _f32(f.angular_velocity), f.noise, f.intervention)


def write_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    (path / "episodes").mkdir(parents=True, exist_ok=True)
    shape = tuple(ds.manifest.image_shape)
    for ep, entry in zip(ds.episodes, ds.manifest.episodes):
        (path / entry["file"]).write_bytes(encode_episode(ep.frames, shape))
    (path / "manifest.json").write_text(ds.manifest.to_json())
    return path


def read_dataset(path) -> Dataset:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise FormatError("missing_manifest", mpath, "no manifest.json")
    try:
        raw = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise FormatError("bad_manifest", mpath, str(e)) from None
    if raw.get("version") != MANIFEST_VERSION:
        raise FormatError("version_mismatch", mpath, f"manifest version {raw.get('version')!r}")
    try:
        manifest = DatasetManifest(raw["version"], tuple(raw["image_shape"]), raw["frame_count"],
                                   raw["episode_count"], raw["dt"], raw["binning"], raw["config_hash"],
                                   raw["episodes"])
    except KeyError as e:
        raise FormatError("bad_manifest", mpath, f"missing field {e}") from None
    if manifest.binning != binning_spec():
        raise FormatError("binning_mismatch", mpath, "stored binning differs from this build")
    if manifest.episode_count != len(manifest.episodes):
        raise FormatError("count_mismatch", mpath,
                          f"episode_count {manifest.episode_count} vs {len(manifest.episodes)} entries")
    episodes = []
    total = 0
    for entry in manifest.episodes:
        fpath = path / entry["file"]
        if not fpath.exists():
            raise FormatError("missing_episode", fpath, "episode file absent")
        frames, shape = decode_episode(fpath.read_bytes(), entry["id"], fpath)
        if shape != tuple(manifest.image_shape):
            raise FormatError("shape_mismatch", fpath, f"{shape} vs manifest {manifest.image_shape}")
        if len(frames) != entry["frames"]:
            raise FormatError("count_mismatch", fpath, f"{len(frames)} frames vs manifest {entry['frames']}")
        total += len(frames)
        episodes.append(Episode(entry["id"], entry["kind"], entry["seed"], frames))
    if total != manifest.frame_count:
        raise FormatError("count_mismatch", mpath, f"frame_count {manifest.frame_count} vs {total} stored")
    return Dataset(manifest, episodes)


def canonicalize(ds: Dataset) -> Dataset:
    """Dataset with floats rounded to storage precision, as read back from disk."""
    eps = [Episode(e.ident, e.kind, e.seed, [_canonical_frame(f) for f in e.frames]) for e in ds.episodes]
    return Dataset(ds.manifest, eps)


def expert_targets(label: int) -> tuple[float, float]:
    """(heading offset, target speed) commanded by an expert label."""
    speed, offset = decode(label)
    return offset, speed
