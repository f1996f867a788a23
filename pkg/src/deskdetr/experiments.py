"""Run directories, cached training runs and ablation sweeps."""

from __future__ import annotations

import hashlib
import json
import os
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset
from .estimator import DETRDetector, detector_from_config
from .exceptions import ConfigurationError
from .train import MetricLog

RUN_ROOT_ENV = "DESKDETR_RUN_ROOT"
LAYOUT_VERSION = 1
CONFIG_FILE = "config.json"
CHECKPOINT_FILE = "model.ckpt"
METRICS_FILE = "metrics.csv"
REPORT_FILE = "report.json"


def run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def source_hash() -> str:
    """Digest of the package sources; cached runs are invalid once code changes."""
    digest = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()[:16]


def default_run_dir(est: DETRDetector, name: str = "run") -> Path:
    return run_root() / f"{name}-{est.config_hash()}-s{est.seed}"


def train_run(est: DETRDetector, train: Dataset, val: Dataset, run_dir, data_source: str = "benchmark") -> dict:
    """Fit ``est`` and write config, checkpoint, metrics and report under ``run_dir``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    params = est.get_params()
    (run_dir / CONFIG_FILE).write_text(json.dumps(params, indent=2, sort_keys=True))
    start = time.perf_counter()
    est.fit(train.images, train.gts, eval_set=(val.images, val.gts), run_dir=run_dir)
    wall = time.perf_counter() - start
    est.history_.to_csv(run_dir / METRICS_FILE)
    est.save(run_dir / CHECKPOINT_FILE)
    report = {
        "layout_version": LAYOUT_VERSION,
        "config_hash": est.config_hash(),
        "source_hash": source_hash(),
        "seed": est.seed,
        "data": data_source,
        "final": est.history_.rows[-1] if est.history_.rows else None,
        "parameters": est.model_.num_parameters(),
        "inference_parameters": int(sum(p.size for p in est.model_.inference_parameters())),
        "wall_seconds": wall,
    }
    (run_dir / REPORT_FILE).write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


def cached_run(est: DETRDetector, train: Dataset, val: Dataset, run_dir, data_source: str = "benchmark") -> MetricLog:
    """Reuse ``run_dir`` when it holds a finished run of the same config, data and code."""
    run_dir = Path(run_dir)
    report_path = run_dir / REPORT_FILE
    if report_path.exists():
        report = json.loads(report_path.read_text())
        if (report.get("config_hash") == est.config_hash() and report.get("source_hash") == source_hash()
                and report.get("data") == data_source):
            log = MetricLog.from_csv(run_dir / METRICS_FILE)
            log.config_hash, log.seed = report["config_hash"], report["seed"]
            return log
    train_run(est, train, val, run_dir, data_source)
    return MetricLog.from_csv(run_dir / METRICS_FILE)


def ablation_variants(kind: str, base: dict) -> dict[str, dict]:
    if kind == "placement":
        flip = {**base, "aug_mode": "feataug_flip"}
        return {"backbone": {**flip, "placement": "backbone"}, "encoder": {**flip, "placement": "encoder"}}
    if kind == "projector":
        mode = base.get("aug_mode", "none")
        crop = {**base, "aug_mode": mode if mode in ("feataug_crop", "feataug_fc") else "feataug_fc"}
        return {"separate": {**crop, "projector": "separate"}, "none": {**crop, "projector": "none"}}
    if kind == "main":
        return {"baseline": {**base, "aug_mode": "none"}, "feataug_flip": {**base, "aug_mode": "feataug_flip"}}
    raise ConfigurationError(f"unknown ablation {kind!r}")


def run_ablation(kind: str, base: dict, seeds: Sequence[int], train: Dataset, val: Dataset, root,
                 data_source: str = "benchmark") -> dict:
    """Train every variant for every seed; returns final APs and their means."""
    root = Path(root)
    results: dict[str, dict[int, float]] = {}
    for name, params in ablation_variants(kind, base).items():
        results[name] = {}
        for seed in seeds:
            est = detector_from_config(params, seed=seed)
            log = cached_run(est, train, val, root / name / f"seed{seed}", data_source)
            results[name][seed] = log.final_ap
    summary = {
        "ablation": kind,
        "seeds": list(seeds),
        "final_ap": {name: {str(s): ap for s, ap in runs.items()} for name, runs in results.items()},
        "mean_final_ap": {name: float(np.mean(list(runs.values()))) for name, runs in results.items()},
    }
    root.mkdir(parents=True, exist_ok=True)
    (root / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary
