"""Command-line entry point: ``gen``, ``train``, ``eval`` and ``stats``.

Exit codes: 0 ok, 2 configuration, 3 I/O, 4 numerical divergence,
5 checkpoint mismatch.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import diagnostics, svg
from .config import RunConfig, load_config
from .core import Dataset, dataset_exists, read_dataset, write_dataset
from .detector.training import infer_dataset, load_model, save_model, train, write_loss_log
from .errors import (
    CheckpointMismatch, ConfigError, EmptyDataset, FormatError, IoError, NumericalDivergence, PillarCoralError,
)
from .evaluation import EvalReport, evaluate
from .scenegen import generate_dataset

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 2, 3, 4, 5

CHECKPOINT_NAME = "model.ckpt"
LOSS_LOG_NAME = "loss_log.csv"
REPORT_NAME = "eval_report.csv"
SPLITS = ("sim", "real", "eval_sim", "eval_real")


def _mkdir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {path}: {exc}") from exc
    return path


def _load_split(data_dir: Path, name: str) -> Dataset:
    d = data_dir / name
    if not dataset_exists(d):
        raise IoError(f"no dataset at {d}")
    ds = read_dataset(d)
    if len(ds) == 0:
        raise EmptyDataset(f"dataset {d} has no frames")
    return ds


def cmd_gen(cfg: RunConfig, out: Path) -> int:
    _mkdir(out)
    g = cfg.gen
    sim, real = generate_dataset(cfg.scene, cfg.gap, g.n_frames, g.seed, split="train")
    write_dataset(sim, out / "sim")
    write_dataset(real, out / "real")
    summary = [f"sim: {len(sim)} frames", f"real: {len(real)} frames (unlabeled)"]
    if g.n_eval_frames:
        # a separate seed stream keeps the evaluation scenes disjoint from training
        esim, ereal = generate_dataset(cfg.scene, cfg.gap, g.n_eval_frames, g.seed + 1_000_003, split="eval")
        write_dataset(replace(esim, name="eval_sim"), out / "eval_sim")
        write_dataset(replace(ereal, name="eval_real"), out / "eval_real")
        summary.append(f"eval: {len(esim)}+{len(ereal)} frames")
    (out / "config.json").write_text(cfg.dumps())
    print("; ".join(summary))
    return EXIT_OK


def cmd_train(cfg: RunConfig, data: Path, out: Path) -> int:
    sim = _load_split(data, "sim")
    real = _load_split(data, "real") if dataset_exists(data / "real") else None
    if cfg.train.min_gt_points:
        sim = diagnostics.filter_gt_by_min_points(sim, cfg.train.min_gt_points)
    _mkdir(out)

    def progress(step, epoch, values):
        if step % 50 == 0:
            print(f"step {step:5d} epoch {epoch:3d} total {values[-1]:.4f} da {values[3]:.3g}", file=sys.stderr)

    result = train(sim, real, cfg.grid, cfg.network, cfg.coral, cfg.train, progress=progress)
    write_loss_log(result.log, out / LOSS_LOG_NAME)
    save_model(result.model, out / CHECKPOINT_NAME, {"train": cfg.to_dict()["train"], "coral": cfg.to_dict()["coral"]})
    print(f"{len(result.log)} steps; checkpoint {out / CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, checkpoint: Path, data: Path, out: Path, split: str, baseline: Path | None) -> int:
    model = load_model(checkpoint, cfg.network, cfg.grid)
    ds = _load_split(data, split)
    if cfg.eval.min_gt_points:
        ds = diagnostics.filter_gt_by_min_points(ds, cfg.eval.min_gt_points)
    preds = infer_dataset(ds, model, cfg.eval.score_threshold, cfg.eval.nms_iou)
    report = evaluate(preds, ds, cfg.eval.metrics)
    _mkdir(out)
    report.to_csv(out / REPORT_NAME)
    base = EvalReport.from_csv(baseline) if baseline is not None else None
    print(report.format_table(base))
    return EXIT_OK


def cmd_stats(cfg: RunConfig, data: Path, out: Path) -> int:
    st = cfg.stats
    if dataset_exists(data):
        labeled = read_dataset(data)
        pair = (labeled, labeled)
    else:
        labeled = _load_split(data, "sim")
        if dataset_exists(data / "eval_sim") and dataset_exists(data / "eval_real"):
            pair = (_load_split(data, "eval_sim"), _load_split(data, "eval_real"))
        elif dataset_exists(data / "real"):
            pair = (labeled, _load_split(data, "real"))
        else:
            pair = (labeled, labeled)
    if len(labeled) == 0:
        raise EmptyDataset(f"dataset {data} has no frames")
    _mkdir(out)
    hist = diagnostics.class_histogram(labeled)
    pmap = diagnostics.polar_density(labeled, st.n_range_bins, st.n_azimuth_bins, st.log_scale, st.max_range)
    curve = diagnostics.points_per_box_curve(labeled)
    gap = diagnostics.gap_report(*pair)
    diagnostics.write_class_histogram(hist, out / "class_histogram.csv")
    diagnostics.write_polar_density(pmap, out / "polar_density.csv")
    diagnostics.write_points_per_box(curve, out / "points_per_box.csv")
    diagnostics.write_gap_report(gap, out / "gap_report.csv")
    if st.svg:
        svg.bar_chart([c.name for c in hist], list(hist.values()), "boxes per class", out / "class_histogram.svg")
        svg.heatmap(pmap.values, "box density (range x azimuth)", out / "polar_density.svg")
        svg.scatter([r for r, _, _ in curve.samples], [n for _, n, _ in curve.samples],
                    [c.name for _, _, c in curve.samples], "points per box vs range", out / "points_per_box.svg")
    print(f"{sum(hist.values())} boxes in {len(labeled)} frames; dropout estimate {gap.dropout_estimate:.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pillarcoral", description="Sim-to-real pillar detection with CORAL feature alignment.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, help="JSON run configuration")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the seed of this stage")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one configuration value (repeatable)")

    p = sub.add_parser("gen", help="generate paired simulated/real datasets")
    common(p)

    p = sub.add_parser("train", help="train the detector with optional CORAL alignment")
    common(p)
    p.add_argument("--data", type=Path, help="dataset directory written by gen (default: --out)")
    p.add_argument("--epochs", type=int, help="override train.epochs")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled split")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="eval_real", choices=SPLITS)
    p.add_argument("--baseline", type=Path, help="earlier report CSV to print deltas against")

    p = sub.add_parser("stats", help="dataset statistics and gap report")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--log-scale", action="store_true", help="emit ln(1+count) density values")
    p.add_argument("--svg", action="store_true", help="also write SVG plots")
    return parser


def _resolve_config(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        key = {"gen": "gen.seed", "train": "train.seed"}.get(args.command)
        if key:
            overrides.append(f"{key}={args.seed}")
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"train.epochs={args.epochs}")
    if getattr(args, "log_scale", False):
        overrides.append("stats.log_scale=true")
    if getattr(args, "svg", False):
        overrides.append("stats.svg=true")
    return load_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.command == "gen":
            return cmd_gen(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.data or args.out, args.out)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.data, args.out, args.split, args.baseline)
        return cmd_stats(cfg, args.data, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalDivergence as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointMismatch as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (IoError, FormatError, EmptyDataset, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except PillarCoralError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
