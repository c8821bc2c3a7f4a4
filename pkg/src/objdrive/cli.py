"""Command-line entry point: collect -> train -> eval-drive / eval-offline -> report -> annotate.

Every command writes ``config.json`` (the fully merged configuration, input
paths included) next to its outputs; passing that file back through
``--config`` reproduces the outputs byte for byte.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .controller import PidState
from .datapipe import CollectConfig, FormatError, collect, offline_examples, read_dataset, write_dataset
from .evalharness import (CONDITIONS, LOWDATA_FRACTIONS, MetricsRow, annotate_frame, compute_metrics, metrics_csv,
                          nested_subsets, pose_csv, ppm_bytes, read_log, read_metrics_csv, rollout_jobs, run_jobs,
                          run_rollout, sweep_csv, lowdata_sweep, write_log)
from .objectcentric import Variant
from .policy import TrainConfig, check_params, train, train_config_from_dict
from .simworld.render import DetectorNoiseConfig

CONFIG_VERSION = 1
log = logging.getLogger("objdrive")


class UsageError(Exception):
    """Bad flags, config, or inputs: exit code 2."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class CollectSection:
    kinds: list[str] = field(default_factory=lambda: ["urban", "highway"])
    episodes_per_kind: int = 8
    duration_s: float = 120.0
    noise_period_s: float = 30.0
    noise_frames: int = 6
    drop_after: int = 7
    noise_steer: float = 0.5


@dataclass
class TrainSection:
    variant: str = Variant.SPARSE_SUM.value
    k: int = 5
    selector_uses_global: bool = True
    head: str = "action9"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 20
    zero_head: bool = False


@dataclass
class PidSection:
    kp: float = 0.5
    ki: float = 0.1
    kd: float = 0.05
    ks: float = 1.0


@dataclass
class EvalSection:
    kinds: list[str] = field(default_factory=lambda: ["urban", "highway"])
    rollouts: int = 10
    seed_offset: int = 10000
    duration_s: float = 120.0
    conditions: list[str] = field(default_factory=lambda: list(CONDITIONS))
    include_expert: bool = True


@dataclass
class NoiseSection:
    jitter_px: float = 2.0
    drop_prob: float = 0.1
    false_positive_rate: float = 0.1


@dataclass
class SweepSection:
    fractions: list[float] = field(default_factory=lambda: list(LOWDATA_FRACTIONS))
    variants: list[str] = field(default_factory=lambda: [Variant.GLOBAL_ONLY.value, Variant.SPARSE_SUM.value])
    test_episodes: int = 4


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    collect: CollectSection = field(default_factory=CollectSection)
    train: TrainSection = field(default_factory=TrainSection)
    pid: PidSection = field(default_factory=PidSection)
    eval: EvalSection = field(default_factory=EvalSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    inputs: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def train_config(self) -> TrainConfig:
        t = self.train
        return train_config_from_dict({
            "lr": t.lr, "weight_decay": t.weight_decay, "batch_size": t.batch_size, "epochs": t.epochs,
            "seed": self.seed, "head": t.head, "zero_head": t.zero_head,
            "representation": {"variant": t.variant, "k": t.k, "selector_uses_global": t.selector_uses_global}})

    def collect_config(self) -> CollectConfig:
        c = self.collect
        seeds = tuple(self.seed + i for i in range(c.episodes_per_kind))
        return CollectConfig(kinds=tuple(c.kinds), seeds=seeds, duration_s=c.duration_s,
                             noise_period_s=c.noise_period_s, noise_frames=c.noise_frames,
                             drop_after=c.drop_after, noise_steer=c.noise_steer)

    def eval_seeds(self) -> list[int]:
        return [self.seed + self.eval.seed_offset + i for i in range(self.eval.rollouts)]

    def noise_config(self) -> DetectorNoiseConfig:
        return DetectorNoiseConfig(**asdict(self.noise))


_SECTIONS = {"collect": CollectSection, "train": TrainSection, "pid": PidSection, "eval": EvalSection,
             "noise": NoiseSection, "sweep": SweepSection}


def _section(cls, raw, name: str):
    if not isinstance(raw, dict):
        raise UsageError(f"config section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise UsageError(f"unknown keys in section {name!r}: {unknown}")
    return cls(**raw)


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(raw, dict) or "version" not in raw:
        raise UsageError("config must be a JSON object with a 'version' field")
    if raw["version"] != CONFIG_VERSION:
        raise UsageError(f"config version {raw['version']!r} not supported (want {CONFIG_VERSION})")
    unknown = sorted(set(raw) - {"version", "seed", "inputs", *_SECTIONS})
    if unknown:
        raise UsageError(f"unknown top-level config keys: {unknown}")
    cfg = RunConfig(version=raw["version"], seed=int(raw.get("seed", 0)), inputs=dict(raw.get("inputs", {})))
    for name, cls in _SECTIONS.items():
        if name in raw:
            setattr(cfg, name, _section(cls, raw[name], name))
    return cfg


def validate(cfg: RunConfig) -> None:
    """Surface bad values as usage errors before any work starts."""
    try:
        cfg.train_config()
        cfg.collect_config()
        cfg.noise_config()
        PidState(**asdict(cfg.pid))
    except (ValueError, TypeError) as e:
        raise UsageError(f"invalid configuration: {e}") from None
    for kind in set(cfg.collect.kinds) | set(cfg.eval.kinds):
        if kind not in ("urban", "highway"):
            raise UsageError(f"unknown scenario kind {kind!r}")
    for cond in cfg.eval.conditions:
        if cond not in CONDITIONS:
            raise UsageError(f"unknown box condition {cond!r}")
    for v in cfg.sweep.variants:
        if v not in {x.value for x in Variant}:
            raise UsageError(f"unknown variant {v!r}")


# ---------------------------------------------------------------------------
# helpers


def _out_dir(path: str | None) -> Path:
    if path is None:
        raise UsageError("--out is required")
    out = Path(path)
    if not out.is_dir():
        raise UsageError(f"output directory {out} does not exist")
    return out


def _refuse_overwrite(paths: list[Path], force: bool) -> None:
    present = [str(p) for p in paths if p.exists()]
    if present and not force:
        raise UsageError(f"refusing to overwrite {present}; pass --force")


def _archive(cfg: RunConfig, out: Path) -> None:
    (out / "config.json").write_text(cfg.to_json())


def _input(cfg: RunConfig, key: str):
    value = cfg.inputs.get(key)
    if value in (None, "", []):
        raise UsageError(f"missing input {key!r} (flag --{key.replace('_', '-')} or config inputs.{key})")
    return value


def load_policy(ckpt_dir) -> tuple[dict, TrainConfig]:
    """(params, TrainConfig) from a directory written by ``train``."""
    ckpt_dir = Path(ckpt_dir)
    if not (ckpt_dir / "checkpoint.ckpt").exists():
        raise UsageError(f"no checkpoint in {ckpt_dir}")
    cfg = load_config(str(ckpt_dir / "config.json")).train_config()
    params = dc.load_checkpoint(ckpt_dir / "checkpoint.ckpt")
    try:
        check_params(params, cfg)
    except ValueError as e:
        raise UsageError(f"checkpoint {ckpt_dir} does not match its config: {e}") from None
    return params, cfg


# ---------------------------------------------------------------------------
# commands


def cmd_collect(cfg: RunConfig, out: Path, args) -> None:
    _refuse_overwrite([out / "manifest.json"], args.force)
    ds = collect(cfg.collect_config(), jobs=args.jobs)
    write_dataset(ds, out)
    _archive(cfg, out)
    log.info("collected %d frames in %d episodes", ds.manifest.frame_count, ds.manifest.episode_count)


def cmd_train(cfg: RunConfig, out: Path, args) -> None:
    _refuse_overwrite([out / "checkpoint.ckpt"], args.force)
    tcfg = cfg.train_config()
    ds = read_dataset(_input(cfg, "dataset"))
    if tcfg.head == "action9":
        examples = [(f, f.action) for f in ds.frames() if not f.flagged]
    else:
        examples = offline_examples(ds.episodes)
    result = train(examples, tcfg, log=lambda e, v: log.info("epoch %d loss %.4f", e, v))
    dc.save_checkpoint(out / "checkpoint.ckpt", result.params)
    (out / "loss.csv").write_text(result.loss_csv())
    _archive(cfg, out)


def cmd_eval_drive(cfg: RunConfig, out: Path, args) -> None:
    _refuse_overwrite([out / "metrics.csv"], args.force)
    policies = {}
    for d in _input(cfg, "checkpoints"):
        params, tcfg = load_policy(d)
        name = tcfg.representation.variant.value
        if name in policies:
            raise UsageError(f"two checkpoints for variant {name!r}")
        policies[name] = (params, tcfg)
    plan = rollout_jobs(policies, cfg.eval.kinds, cfg.eval_seeds(), cfg.eval.conditions, cfg.eval.duration_s,
                        cfg.noise_config(), cfg.eval.include_expert, asdict(cfg.pid))
    logs = run_jobs(plan, args.jobs)
    (out / "logs").mkdir(exist_ok=True)
    for lg in logs:
        stem = f"{lg.variant}_{lg.kind}_{lg.box_condition}_{lg.seed}"
        write_log(lg, out / "logs" / f"{stem}.bin")
        (out / "logs" / f"{stem}.csv").write_text(pose_csv(lg))
    (out / "metrics.csv").write_text(metrics_csv(compute_metrics(logs)))
    _archive(cfg, out)


def cmd_eval_offline(cfg: RunConfig, out: Path, args) -> None:
    _refuse_overwrite([out / "sweep.csv"], args.force)
    ds = read_dataset(_input(cfg, "dataset"))
    n_test = cfg.sweep.test_episodes
    if not 0 < n_test < len(ds.episodes):
        raise UsageError(f"test_episodes must leave both splits nonempty ({len(ds.episodes)} episodes)")
    order = np.random.default_rng([cfg.seed, 2]).permutation(len(ds.episodes))
    test = [ds.episodes[i] for i in order[:n_test]]
    train_eps = [ds.episodes[i] for i in order[n_test:]]
    base = cfg.train_config()
    cfgs = {}
    for v in cfg.sweep.variants:
        d = base.to_dict()
        d["head"] = "offline900"
        d["representation"]["variant"] = v
        cfgs[v] = train_config_from_dict(d)
    try:
        nested_subsets(train_eps, cfg.sweep.fractions, cfg.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    rows = lowdata_sweep(train_eps, test, cfgs, cfg.sweep.fractions, cfg.seed,
                         log=lambda r: log.info("%s %.0f%%: %.4f", r.variant, 100 * r.fraction, r.perplexity))
    (out / "sweep.csv").write_text(sweep_csv(rows))
    _archive(cfg, out)


def merge_rows(rows: list[MetricsRow]) -> list[MetricsRow]:
    """Pool rows sharing (variant, scenario, box condition)."""
    pooled: dict[tuple, MetricsRow] = {}
    for r in rows:
        key = (r.variant, r.scenario, r.box_condition)
        if key in pooled:
            p = pooled[key]
            pooled[key] = MetricsRow(*key, p.seeds + r.seeds, p.total_m + r.total_m,
                                     p.interventions + r.interventions, p.collisions + r.collisions)
        else:
            pooled[key] = r
    return [pooled[k] for k in sorted(pooled)]


def cmd_report(cfg: RunConfig, out: Path, args) -> None:
    _refuse_overwrite([out / "report.csv"], args.force)
    rows = []
    for p in _input(cfg, "metrics"):
        path = Path(p)
        if path.is_dir():
            path = path / "metrics.csv"
        try:
            rows += read_metrics_csv(path.read_text())
        except FileNotFoundError:
            raise UsageError(f"metrics file {path} not found") from None
    (out / "report.csv").write_text(metrics_csv(merge_rows(rows)))
    _archive(cfg, out)


def cmd_annotate(cfg: RunConfig, out: Path, args) -> None:
    params, tcfg = load_policy(_input(cfg, "checkpoint"))
    lg = read_log(_input(cfg, "log"))
    if lg.variant != tcfg.representation.variant.value:
        raise UsageError(f"log was produced by {lg.variant!r}, checkpoint is {tcfg.representation.variant.value!r}")
    noise = cfg.noise_config() if lg.box_condition == "noisy" else DetectorNoiseConfig()
    names = [out / f"frame_{t:05d}.ppm" for t in range(lg.n_frames)]
    _refuse_overwrite(names[:1], args.force)
    seen = {}

    def keep(t, image, boxes, info, action):
        if info is None:
            seen[t] = annotate_frame(image, None, None, action)
        else:
            attention = None if info.attention is None else info.attention[0]
            seen[t] = annotate_frame(image, info.objects[0], attention, action)

    replay = run_rollout(params, tcfg, lg.kind, lg.seed, lg.duration_s, noise, lg.variant, on_frame=keep,
                         pid_gains=asdict(cfg.pid))
    if not np.array_equal(replay.pose, lg.pose):
        raise UsageError("replayed rollout diverges from the log; wrong checkpoint or config?")
    for t in range(lg.n_frames):
        names[t].write_bytes(ppm_bytes(seen[t]))
    _archive(cfg, out)


COMMANDS = {"collect": cmd_collect, "train": cmd_train, "eval-drive": cmd_eval_drive,
            "eval-offline": cmd_eval_offline, "report": cmd_report, "annotate": cmd_annotate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="objdrive", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration (must carry a 'version' field)")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", help="existing output directory")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train", "eval-offline"):
            p.add_argument("--dataset", help="dataset directory written by collect")
        if name == "train":
            p.add_argument("--variant", choices=[v.value for v in Variant])
            p.add_argument("--head", choices=["action9", "offline900"])
            p.add_argument("--epochs", type=int)
        if name == "eval-drive":
            p.add_argument("--checkpoint", action="append", dest="checkpoints",
                           help="training output directory (repeatable)")
        if name == "annotate":
            p.add_argument("--checkpoint", help="training output directory")
            p.add_argument("--log", help="rollout log (.bin) written by eval-drive")
        if name == "report":
            p.add_argument("--metrics", action="append", help="metrics CSV or eval-drive directory (repeatable)")
    return parser


def _apply_flags(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    for key in ("dataset", "checkpoints", "checkpoint", "log", "metrics"):
        value = getattr(args, key, None)
        if value is not None:
            if isinstance(value, list):
                value = [str(Path(v).resolve()) for v in value]
            else:
                value = str(Path(value).resolve())
            cfg.inputs[key] = value
    for key in ("variant", "head", "epochs"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg.train, key, value)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = _apply_flags(load_config(args.config), args)
        validate(cfg)
        out = _out_dir(args.out)
        COMMANDS[args.command](cfg, out, args)
    except (UsageError, FormatError, dc.CheckpointError) as e:
        print(f"objdrive {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        log.exception("internal error")
        print(f"objdrive {args.command}: internal error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
