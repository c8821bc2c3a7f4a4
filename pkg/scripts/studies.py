"""Driving and low-data studies behind the acceptance checks.

Run directly to write a JSON summary, e.g.

    python3 scripts/studies.py driving --out results/driving.json
    python3 scripts/studies.py lowdata --out results/lowdata.json
"""
from __future__ import annotations

import argparse
import json
import logging
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from objdrive import datapipe as dp
from objdrive import evalharness as ev
from objdrive import policy as pl
from objdrive.objectcentric import RepresentationConfig, Variant
from objdrive.simworld.render import NOISY_DETECTOR

log = logging.getLogger("studies")


@dataclass(frozen=True)
class DrivingStudy:
    collect_seeds: tuple[int, ...] = tuple(range(200, 208))
    collect_duration_s: float = 60.0
    variants: tuple[str, ...] = ("global_only", "sparse_sum", "heuristic_sparse_sum")
    train_seeds: tuple[int, ...] = (0, 1, 2)
    epochs: int = 8
    eval_seeds: tuple[int, ...] = tuple(range(10000, 10010))
    eval_duration_s: float = 120.0
    noisy_variant: str = "sparse_sum"


@dataclass(frozen=True)
class LowDataStudy:
    train_seeds: tuple[int, ...] = tuple(range(300, 320))
    test_seeds: tuple[int, ...] = tuple(range(400, 404))
    kinds: tuple[str, ...] = ("urban",)
    duration_s: float = 30.0
    fractions: tuple[float, ...] = (0.05, 0.10, 0.25, 0.50, 1.00)
    variants: tuple[str, ...] = ("global_only", "sparse_sum")
    epochs: int = 6
    seed: int = 0


def _row_dict(r: ev.MetricsRow) -> dict:
    return r.as_record()


def run_driving(study: DrivingStudy = DrivingStudy()) -> dict:
    """Train every (variant, seed) on one urban dataset, then drive the evaluation seeds."""
    t0 = time.process_time()
    ds = dp.collect(dp.CollectConfig(kinds=("urban",), seeds=study.collect_seeds,
                                     duration_s=study.collect_duration_s))
    examples = [(f, f.action) for f in dp.training_frames(ds)]
    log.info("collected %d training frames", len(examples))
    out = {"study": asdict(study), "frames": len(examples), "runs": [], "cpu_s": {"collect": time.process_time() - t0}}
    for seed in study.train_seeds:
        for variant in study.variants:
            start = time.process_time()
            cfg = pl.TrainConfig(representation=RepresentationConfig(variant), epochs=study.epochs, seed=seed)
            result = pl.train(examples, cfg)
            logs = [ev.run_rollout(result.params, cfg, "urban", s, study.eval_duration_s) for s in study.eval_seeds]
            [row] = ev.compute_metrics(logs)
            run = {"variant": variant, "train_seed": seed, "losses": result.epoch_losses, "gt": _row_dict(row)}
            if variant == study.noisy_variant and seed == study.train_seeds[0]:
                noisy = [ev.run_rollout(result.params, cfg, "urban", s, study.eval_duration_s, NOISY_DETECTOR)
                         for s in study.eval_seeds]
                [nrow] = ev.compute_metrics(noisy)
                run["noisy"] = _row_dict(nrow)
            run["cpu_s"] = time.process_time() - start
            log.info("%s seed %d: %s", variant, seed, run["gt"])
            out["runs"].append(run)
    out["cpu_s"]["total"] = time.process_time() - t0
    return out


def run_lowdata(study: LowDataStudy = LowDataStudy()) -> dict:
    """Held-out 900-way perplexity for each variant at each data fraction."""
    t0 = time.process_time()
    train_ds = dp.collect(dp.CollectConfig(kinds=study.kinds, seeds=study.train_seeds, duration_s=study.duration_s))
    test_ds = dp.collect(dp.CollectConfig(kinds=study.kinds, seeds=study.test_seeds, duration_s=study.duration_s))
    cfgs = {v: pl.TrainConfig(representation=RepresentationConfig(v), head="offline900", epochs=study.epochs,
                              seed=study.seed) for v in study.variants}
    rows = ev.lowdata_sweep(train_ds.episodes, test_ds.episodes, cfgs, study.fractions, study.seed,
                            log=lambda r: log.info("%s %.0f%%: %.4f", r.variant, 100 * r.fraction, r.perplexity))
    return {"study": asdict(study), "rows": [asdict(r) for r in rows], "cpu_s": time.process_time() - t0}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("study", choices=["driving", "lowdata"])
    parser.add_argument("--out", required=True)
    parser.add_argument("--epochs", type=int, help="override the training epochs")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    study = DrivingStudy() if args.study == "driving" else LowDataStudy()
    if args.epochs is not None:
        study = replace(study, epochs=args.epochs)
    result = run_driving(study) if args.study == "driving" else run_lowdata(study)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(result, indent=1) + "\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
