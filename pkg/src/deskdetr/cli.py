"""Command-line entry point: ``deskdetr <subcommand> --help`` documents every flag."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .data import Dataset, desk_benchmark, load_dataset, save_dataset
from .estimator import DETRDetector, detector_from_config
from .exceptions import DeskDetrError
from .experiments import RUN_ROOT_ENV, default_run_dir, run_ablation, run_root, train_run
from .train import pilot_study, query_stats, write_query_stats

logger = logging.getLogger("deskdetr")


def _load_split(data: str | None, split: str, n_train: int, n_val: int, seed: int) -> tuple[Dataset, str]:
    if data:
        return load_dataset(Path(data) / split), f"dir:{Path(data).resolve()}"
    train, val = desk_benchmark(n_train, n_val, seed)
    return (train if split == "train" else val), f"benchmark:{n_train}/{n_val}/{seed}"


def _load_pair(args) -> tuple[Dataset, Dataset, str]:
    if args.data:
        root = Path(args.data)
        return load_dataset(root / "train"), load_dataset(root / "val"), f"dir:{root.resolve()}"
    train, val = desk_benchmark(args.n_train, args.n_val, args.data_seed)
    return train, val, f"benchmark:{args.n_train}/{args.n_val}/{args.data_seed}"


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        config = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DeskDetrError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(config, dict):
        raise DeskDetrError(f"config {path} must hold a JSON object")
    return config


def _write_json(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, default=float)
    if out:
        Path(out).write_text(text + "\n")
    print(text)


def _checkpoint_data(args, split: str) -> Dataset:
    """Split named by ``--data`` or, by default, the data the checkpoint was trained on."""
    if args.data:
        return load_dataset(Path(args.data) / split)
    report = Path(args.checkpoint).with_name("report.json")
    source = json.loads(report.read_text())["data"] if report.exists() else "benchmark:2000/500/0"
    kind, _, rest = source.partition(":")
    if kind == "dir":
        return load_dataset(Path(rest) / split)
    n_train, n_val, seed = (int(v) for v in rest.split("/"))
    return _load_split(None, split, n_train, n_val, seed)[0]


# -- subcommands ----------------------------------------------------------------------
def cmd_gen_data(args) -> int:
    train, val = desk_benchmark(args.n_train, args.n_val, args.data_seed)
    save_dataset(train, Path(args.out) / "train")
    save_dataset(val, Path(args.out) / "val")
    print(f"wrote {len(train)} train / {len(val)} val images to {args.out}")
    return 0


def cmd_train(args) -> int:
    est = detector_from_config(_read_config(args.config), seed=args.seed, epochs=args.epochs)
    est.build()  # validate before generating data
    train, val, source = _load_pair(args)
    run_dir = Path(args.run_dir) if args.run_dir else default_run_dir(est, Path(args.config or "run").stem)
    report = train_run(est, train, val, run_dir, source)
    report["run_dir"] = str(run_dir)
    _write_json(report, None)
    return 0


def cmd_eval(args) -> int:
    est = DETRDetector.load(args.checkpoint)
    data = _checkpoint_data(args, args.split)
    report = est.evaluate(data.images, data.gts)
    _write_json({"split": args.split, "ap": report.ap, "ap50": report.ap50, "ap75": report.ap75,
                 "per_class": report.per_class}, args.out)
    return 0


def cmd_pilot(args) -> int:
    est = DETRDetector.load(args.checkpoint)
    data = _checkpoint_data(args, args.split)
    images = data.float_images(dtype=est.model_.config.np_dtype)
    report = pilot_study(est.model_, images, data.gts, args.transform, seed=args.seed,
                         weights=est.loss_weights())
    _write_json(report, args.out)
    return 0


def cmd_query_stats(args) -> int:
    est = DETRDetector.load(args.checkpoint)
    data = _checkpoint_data(args, args.split)
    stats = query_stats(est.model_, data.float_images(dtype=est.model_.config.np_dtype), data.gts,
                        est.loss_weights())
    write_query_stats(stats, args.out)
    _write_json({"queries": len(stats["rows"]),
                 "never_matched": sum(r["never_matched"] for r in stats["rows"]),
                 "dataset_center_variance": stats["dataset_center_variance"],
                 "position_aware_fraction": stats["position_aware_fraction"]}, None)
    return 0


def cmd_ablate(args) -> int:
    base = _read_config(args.config)
    if args.epochs is not None:
        base["epochs"] = args.epochs
    detector_from_config(base)  # reject unknown keys early
    train, val, source = _load_pair(args)
    root = Path(args.run_dir) if args.run_dir else run_root() / f"ablate-{args.kind}"
    summary = run_ablation(args.kind, base, args.seeds, train, val, root, source)
    _write_json(summary, None)
    return 0


# -- parser ------------------------------------------------------------------------------
def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset directory with train/ and val/ (default: generated benchmark)")
    p.add_argument("--n-train", type=int, default=2000, help="generated train images (default 2000)")
    p.add_argument("--n-val", type=int, default=500, help="generated val images (default 500)")
    p.add_argument("--data-seed", type=int, default=0, help="generator seed for the benchmark (default 0)")


def _add_checkpoint_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", required=True, help="model.ckpt written by train")
    p.add_argument("--data", help="dataset directory (default: the data the checkpoint was trained on)")
    p.add_argument("--split", choices=("train", "val"), default="val")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deskdetr", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    parser.add_argument("--deterministic", action="store_true", help="force single-threaded numeric kernels")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic shapes benchmark")
    p.add_argument("--out", required=True, help="output directory (train/ and val/ are created)")
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-val", type=int, default=500)
    p.add_argument("--data-seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model and write a run directory")
    p.add_argument("--config", help="JSON object of estimator parameters")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--epochs", type=int, help="override the config epochs")
    p.add_argument("--run-dir", help=f"run directory (default: under ${RUN_ROOT_ENV}, else ./runs)")
    _add_data_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="AP of a checkpoint on a split")
    _add_checkpoint_flags(p)
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pilot", help="query reassignment between an image and its transformed copy")
    _add_checkpoint_flags(p)
    p.add_argument("--transform", choices=("identity", "flip", "crop", "flip_crop"), default="flip")
    p.add_argument("--seed", type=int, default=0, help="seed for crop sampling")
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_pilot)

    p = sub.add_parser("query-stats", help="per-query statistics of matched boxes")
    _add_checkpoint_flags(p)
    p.add_argument("--out", required=True, help="directory for query_stats.csv and query_samples.csv")
    p.set_defaults(func=cmd_query_stats)

    p = sub.add_parser("ablate", help="paired runs: flip placement or cropped-view projector")
    p.add_argument("kind", choices=("placement", "projector", "main"))
    p.add_argument("--config", help="JSON object of shared estimator parameters")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--epochs", type=int)
    p.add_argument("--run-dir", help="root for variant/seed run directories")
    _add_data_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    limits = threadpool_limits(1) if args.deterministic else contextlib.nullcontext()
    try:
        with limits:
            return args.func(args)
    except DeskDetrError as exc:
        parser.error(str(exc))
    except FileNotFoundError as exc:
        print(f"deskdetr: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
