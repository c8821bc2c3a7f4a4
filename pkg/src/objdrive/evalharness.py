"""Closed-loop rollouts, driving metrics, comparison tables, low-data sweeps, annotated frames."""
from __future__ import annotations

import csv
import io
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .controller import PidState, action_name, pid_step, reset
from .datapipe import Episode, FormatError, offline_examples
from .objectcentric import ObjectSet
from .policy import TrainConfig, evaluate_perplexity, predict, train
from .simworld.expert import expert_control, route_heading_error
from .simworld.render import NOISY_DETECTOR, DetectorNoiseConfig, ground_truth_boxes, perturb_detections, render
from .simworld.world import DT, FPS, collision_check, intervention, spawn_scenario, step

LOG_MAGIC = b"OBJR"
LOG_VERSION = 1
EXPERT = "expert"
CONDITIONS = ("gt", "noisy")

EVENT_TYPES = ("collision", "intervention_start", "intervention_end")
REASONS = ("", "collision", "offroad", "stuck")

_LOG_HEADER = struct.Struct("<4sHIIIdHH")
_LOG_FRAME = struct.Struct("<dddddBB")
_LOG_EVENT = struct.Struct("<BdiB")


@dataclass
class RolloutLog:
    variant: str
    kind: str
    seed: int
    box_condition: str
    duration_s: float
    time: np.ndarray          # (T,) s, after the step
    pose: np.ndarray          # (T, 3) x, y, heading after the step
    speed: np.ndarray         # (T,)
    action: np.ndarray        # (T,) uint8 executed discrete action
    flag: np.ndarray          # (T,) bool, frame driven by the autopilot
    events: list[dict] = field(default_factory=list)
    start: tuple[float, float] = (0.0, 0.0)

    @property
    def n_frames(self) -> int:
        return len(self.time)

    def distance(self) -> float:
        """Distance driven by the policy; autopilot frames contribute nothing."""
        xy = np.vstack([np.asarray(self.start)[None], self.pose[:, :2]])
        step_len = np.hypot(*np.diff(xy, axis=0).T)
        return float(step_len[~self.flag].sum())

    def count(self, kind: str) -> int:
        return sum(1 for e in self.events if e["type"] == kind)


# ---------------------------------------------------------------------------
# rollouts


def _noise_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 31337])


def run_rollout(params, cfg: TrainConfig | None, kind: str, seed: int, duration_s: float = 120.0,
                noise: DetectorNoiseConfig | None = None, variant: str | None = None,
                on_frame=None, pid_gains: dict | None = None) -> RolloutLog:
    """Drive one scenario with the learned policy (``params is None`` means the expert drives).

    ``on_frame(t, image, boxes, info, action)`` is called for every frame; ``info`` is None
    while the autopilot drives.
    """
    noise = noise or DetectorNoiseConfig()
    w = spawn_scenario(kind, seed)
    if variant is None:
        variant = EXPERT if params is None else cfg.representation.variant.value
    pid = PidState(**(pid_gains or {}))
    rng = _noise_rng(seed)
    n = int(round(duration_s * FPS))
    start = (w.ego.x, w.ego.y)
    time_ = np.zeros(n)
    pose = np.zeros((n, 3))
    speed = np.zeros(n)
    actions = np.zeros(n, dtype=np.uint8)
    flags = np.zeros(n, dtype=bool)
    events: list[dict] = []
    for t in range(n):
        autopilot = w.intervention.active
        if params is None or autopilot:
            control, action = expert_control(w)
            if on_frame is not None:
                on_frame(t, render(w), ground_truth_boxes(w), None, action)
        else:
            image = render(w)
            boxes = perturb_detections(ground_truth_boxes(w), noise, rng)
            logits, info = predict(image, boxes, params, cfg, return_info=True)
            action = int(np.argmax(logits))
            if on_frame is not None:
                on_frame(t, image, boxes, info, action)
            control = pid_step(pid, action, w.ego.speed, route_heading_error(w), DT)
        step(w, control)
        ev = collision_check(w, record=not autopilot)
        ev += intervention(w, bool(ev))
        if any(e["type"] == "intervention_end" for e in ev):
            reset(pid)
        events.extend(ev)
        time_[t] = w.time
        pose[t] = (w.ego.x, w.ego.y, w.ego.heading)
        speed[t] = w.ego.speed
        actions[t] = action
        flags[t] = autopilot
    condition = "gt" if noise.is_zero else "noisy"
    return RolloutLog(variant, kind, seed, condition, duration_s, time_, pose, speed, actions, flags, events, start)


# ---------------------------------------------------------------------------
# log container


def encode_log(log: RolloutLog) -> bytes:
    kind = log.kind.encode()
    variant = log.variant.encode()
    cond = log.box_condition.encode()
    parts = [_LOG_HEADER.pack(LOG_MAGIC, LOG_VERSION, log.n_frames, len(log.events), log.seed,
                              log.duration_s, len(kind), len(variant)),
             kind, variant, struct.pack("<H", len(cond)), cond, struct.pack("<dd", *log.start)]
    for i in range(log.n_frames):
        parts.append(_LOG_FRAME.pack(log.time[i], *log.pose[i], log.speed[i], int(log.action[i]),
                                     int(log.flag[i])))
    for e in log.events:
        parts.append(_LOG_EVENT.pack(EVENT_TYPES.index(e["type"]), e["time"], int(e.get("agent", -1)),
                                     REASONS.index(e.get("reason", ""))))
    return b"".join(parts)


def decode_log(raw: bytes, path="<bytes>") -> RolloutLog:
    if len(raw) < _LOG_HEADER.size:
        raise FormatError("truncated", path, "file shorter than header")
    magic, version, n, n_ev, seed, duration, lk, lv = _LOG_HEADER.unpack_from(raw, 0)
    if magic != LOG_MAGIC:
        raise FormatError("bad_magic", path, f"magic {magic!r}")
    if version != LOG_VERSION:
        raise FormatError("version_mismatch", path, f"version {version}, expected {LOG_VERSION}")
    try:
        pos = _LOG_HEADER.size
        kind = raw[pos:pos + lk].decode()
        pos += lk
        variant = raw[pos:pos + lv].decode()
        pos += lv
        (lc,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        cond = raw[pos:pos + lc].decode()
        pos += lc
        start = struct.unpack_from("<dd", raw, pos)
        pos += 16
        need = pos + n * _LOG_FRAME.size + n_ev * _LOG_EVENT.size
        if need != len(raw):
            kind_err = "truncated" if need > len(raw) else "trailing_data"
            raise FormatError(kind_err, path, f"expected {need} bytes, found {len(raw)}")
        frames = np.array([_LOG_FRAME.unpack_from(raw, pos + i * _LOG_FRAME.size) for i in range(n)],
                          dtype=np.float64).reshape(n, 7)
        pos += n * _LOG_FRAME.size
        events = []
        for i in range(n_ev):
            et, tm, agent, reason = _LOG_EVENT.unpack_from(raw, pos + i * _LOG_EVENT.size)
            if et >= len(EVENT_TYPES) or reason >= len(REASONS):
                raise FormatError("bad_record", path, f"event {i}: type {et} reason {reason}")
            e = {"type": EVENT_TYPES[et], "time": tm}
            if et == 0:
                e["agent"] = agent
            else:
                e["reason"] = REASONS[reason]
            events.append(e)
    except (UnicodeDecodeError, struct.error) as e:
        raise FormatError("truncated", path, str(e)) from None
    if np.any(frames[:, 5] > 8) or np.any(frames[:, 6] > 1):
        raise FormatError("bad_record", path, "action or flag out of range")
    return RolloutLog(variant, kind, seed, cond, duration, frames[:, 0].copy(), frames[:, 1:4].copy(),
                      frames[:, 4].copy(), frames[:, 5].astype(np.uint8), frames[:, 6].astype(bool), events,
                      (start[0], start[1]))


def write_log(log: RolloutLog, path) -> None:
    Path(path).write_bytes(encode_log(log))


def read_log(path) -> RolloutLog:
    return decode_log(Path(path).read_bytes(), path)


def pose_csv(log: RolloutLog) -> str:
    buf = io.StringIO()
    buf.write("time,x,y,heading,speed,action,intervention\n")
    for i in range(log.n_frames):
        buf.write(f"{log.time[i]:.6f},{log.pose[i, 0]:.6f},{log.pose[i, 1]:.6f},{log.pose[i, 2]:.6f},"
                  f"{log.speed[i]:.6f},{int(log.action[i])},{int(log.flag[i])}\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# metrics


METRIC_COLUMNS = ("variant", "scenario", "box_condition", "seeds", "total_m", "interventions", "collisions",
                  "dist_between_m", "interv_per_100m", "coll_per_100m")


@dataclass
class MetricsRow:
    variant: str
    scenario: str
    box_condition: str
    seeds: int
    total_m: float
    interventions: int
    collisions: int

    @property
    def dist_between_m(self) -> float:
        """Total distance over max(1, interventions), so a clean run reports its full distance."""
        return self.total_m / max(1, self.interventions)

    @property
    def interv_per_100m(self) -> float | None:
        return None if self.total_m <= 0 else self.interventions * 100.0 / self.total_m

    @property
    def coll_per_100m(self) -> float | None:
        return None if self.total_m <= 0 else self.collisions * 100.0 / self.total_m

    def as_record(self) -> dict:
        return {c: getattr(self, c) for c in METRIC_COLUMNS}


def compute_metrics(logs: list[RolloutLog]) -> list[MetricsRow]:
    """Pool counts and distances per (variant, scenario, box condition), in sorted key order."""
    if not logs:
        raise ValueError("no rollout logs to summarize")
    groups: dict[tuple[str, str, str], list[RolloutLog]] = {}
    for log in logs:
        groups.setdefault((log.variant, log.kind, log.box_condition), []).append(log)
    rows = []
    for key in sorted(groups):
        g = groups[key]
        rows.append(MetricsRow(*key, seeds=len({lg.seed for lg in g}), total_m=sum(lg.distance() for lg in g),
                               interventions=sum(lg.count("intervention_start") for lg in g),
                               collisions=sum(lg.count("collision") for lg in g)))
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def metrics_csv(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for r in rows:
        writer.writerow([_fmt(r.as_record()[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def read_metrics_csv(text: str) -> list[MetricsRow]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        missing = [c for c in METRIC_COLUMNS if c not in rec]
        if missing:
            raise ValueError(f"metrics CSV lacks columns {missing}")
        rows.append(MetricsRow(rec["variant"], rec["scenario"], rec["box_condition"], int(rec["seeds"]),
                               float(rec["total_m"]), int(rec["interventions"]), int(rec["collisions"])))
    return rows


# ---------------------------------------------------------------------------
# comparison


def _rollout_job(job):
    params, cfg, kind, seed, duration, noise, variant, gains = job
    return run_rollout(params, cfg, kind, seed, duration, noise, variant, pid_gains=gains)


def rollout_jobs(policies: dict, kinds, seeds, conditions=CONDITIONS, duration_s: float = 120.0,
                 noise: DetectorNoiseConfig | None = None, include_expert: bool = True,
                 pid_gains: dict | None = None) -> list[tuple]:
    """Deterministically ordered rollout plan; ``policies`` maps variant -> (params, cfg)."""
    for name, entry in policies.items():
        if entry is None or entry[0] is None:
            raise KeyError(f"missing checkpoint for variant {name!r}")
    noisy = noise or NOISY_DETECTOR
    jobs = []
    for name in sorted(policies):
        params, cfg = policies[name]
        for kind in kinds:
            for cond in conditions:
                for seed in seeds:
                    jobs.append((params, cfg, kind, seed, duration_s,
                                 noisy if cond == "noisy" else DetectorNoiseConfig(), name, pid_gains))
    if include_expert:
        for kind in kinds:
            for seed in seeds:
                jobs.append((None, None, kind, seed, duration_s, DetectorNoiseConfig(), EXPERT, None))
    return jobs


def run_jobs(jobs: list[tuple], n_workers: int = 1) -> list[RolloutLog]:
    if n_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as ex:
            return list(ex.map(_rollout_job, jobs))
    return [_rollout_job(j) for j in jobs]


def compare(policies: dict, kinds, seeds, conditions=CONDITIONS, duration_s: float = 120.0,
            noise: DetectorNoiseConfig | None = None, include_expert: bool = True, jobs: int = 1,
            pid_gains: dict | None = None):
    """Evaluate every (variant, kind, condition, seed); returns (logs, rows, csv text)."""
    plan = rollout_jobs(policies, kinds, seeds, conditions, duration_s, noise, include_expert, pid_gains)
    logs = run_jobs(plan, jobs)
    rows = compute_metrics(logs)
    return logs, rows, metrics_csv(rows)


# ---------------------------------------------------------------------------
# low-data sweep


LOWDATA_FRACTIONS = (0.05, 0.10, 0.25, 0.50, 1.00)


def nested_subsets(episodes: list[Episode], fractions, seed: int) -> dict[float, list[Episode]]:
    """Episode subsets that grow with the fraction; every subset is a prefix of one seeded order."""
    order = np.random.default_rng([seed, 15485863]).permutation(len(episodes))
    out = {}
    for f in fractions:
        if not 0 < f <= 1:
            raise ValueError(f"fraction {f} outside (0, 1]")
        k = int(math.floor(f * len(episodes) + 1e-9))
        if k == 0:
            raise ValueError(f"fraction {f} of {len(episodes)} episodes selects none")
        out[f] = [episodes[i] for i in order[:k]]
    return out


@dataclass
class SweepRow:
    variant: str
    fraction: float
    episodes: int
    frames: int
    perplexity: float


def lowdata_sweep(train_episodes: list[Episode], test_episodes: list[Episode], cfgs: dict[str, TrainConfig],
                  fractions=LOWDATA_FRACTIONS, seed: int = 0, log=None) -> list[SweepRow]:
    """Held-out offline perplexity per (variant, fraction) on the 900-way head."""
    test = offline_examples(test_episodes)
    if not test:
        raise ValueError("held-out split has no labeled frames")
    subsets = nested_subsets(train_episodes, fractions, seed)
    rows = []
    for name in sorted(cfgs):
        cfg = cfgs[name]
        if cfg.head != "offline900":
            raise ValueError(f"variant {name!r} must use the offline900 head")
        for f in fractions:
            examples = offline_examples(subsets[f])
            result = train(examples, cfg)
            ppl = evaluate_perplexity(result.params, cfg, test)
            rows.append(SweepRow(name, f, len(subsets[f]), len(examples), ppl))
            if log is not None:
                log(rows[-1])
    return rows


def sweep_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    buf.write("variant,fraction,episodes,frames,perplexity\n")
    for r in rows:
        buf.write(f"{r.variant},{r.fraction:g},{r.episodes},{r.frames},{r.perplexity:.6f}\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# annotated frames


ANNOTATION_SCALE = 4
_SQUARE = 10


def weight_color(w: float) -> tuple[int, int, int]:
    """Red for weight 1, blue for weight 0."""
    w = min(max(float(w), 0.0), 1.0)
    return int(round(255 * w)), 0, int(round(255 * (1 - w)))


def action_squares(action: int) -> dict[str, bool]:
    steer, speed = action_name(action)
    return {"accelerate": speed == "fast", "left": steer == "left", "brake": speed == "stop",
            "right": steer == "right"}


def square_origins(height: int, width: int) -> dict[str, tuple[int, int]]:
    """Top-left pixel of each action square: an arrow-key cluster in the bottom-right corner."""
    q = _SQUARE
    return {"accelerate": (height - 2 * q - 5, width - 2 * q - 4), "left": (height - q - 2, width - 3 * q - 6),
            "brake": (height - q - 2, width - 2 * q - 4), "right": (height - q - 2, width - q - 2)}


def annotate_frame(image: np.ndarray, objects: ObjectSet | None, attention: np.ndarray | None,
                   action: int) -> np.ndarray:
    """(H*4, W*4, 3) uint8 picture: scene, attention brightness, weighted boxes, action squares."""
    c, h, w = image.shape
    rgb = np.zeros((h, w, 3))
    rgb[..., 0] = image[1]
    rgb[..., 1] = image[2]
    rgb[..., 2] = 0.35 * image[0]
    rgb = 0.15 + 0.85 * rgb
    if attention is not None:
        att = np.asarray(attention, dtype=np.float64)
        peak = att.max()
        rel = att / peak if peak > 0 else np.ones_like(att)
        ry, rx = h // att.shape[0], w // att.shape[1]
        rgb *= (0.4 + 0.6 * np.kron(rel, np.ones((ry, rx))))[..., None]
    s = ANNOTATION_SCALE
    out = np.kron(np.clip(rgb, 0, 1), np.ones((s, s, 1)))
    out = np.round(out * 255).astype(np.uint8)
    if objects is not None:
        for b, wt in zip(objects.boxes, objects.weights):
            color = weight_color(wt)
            x0, y0 = int(math.floor(b.x_min * s)), int(math.floor(b.y_min * s))
            x1, y1 = min(w * s - 1, int(math.ceil(b.x_max * s)) - 1), min(h * s - 1, int(math.ceil(b.y_max * s)) - 1)
            out[y0:y1 + 1, [x0, x1]] = color
            out[[y0, y1], x0:x1 + 1] = color
    q = _SQUARE
    spots = square_origins(h * s, w * s)
    for name, on in action_squares(action).items():
        r0, c0 = spots[name]
        patch = out[r0:r0 + q, c0:c0 + q]
        patch[[0, -1], :] = 255
        patch[:, [0, -1]] = 255
        if on:
            patch[:] = 255
    return out


def ppm_bytes(pixels: np.ndarray) -> bytes:
    h, w, _ = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()


def read_ppm(raw: bytes) -> np.ndarray:
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6" or parts[2] != b"255":
        raise ValueError("not an 8-bit binary PPM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)
