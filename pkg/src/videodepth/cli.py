"""Command-line entry point: ``gen-data``, ``train``, ``eval``, ``gradcheck``, ``ablate-placement``.

Every path argument is resolved against ``--workdir``. Library errors are
printed as one line and turn into exit status 1.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from src.videodepth.config import (
    METRIC_NAMES,
    EvalConfig,
    load_scene_spec,
    load_train_config,
)
from src.videodepth.errors import ContractError, VideoDepthError
from src.videodepth.logs import configure_logging

logger = logging.getLogger(__name__)


def _resolve(workdir: Path, path: str | None) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    return p if p.is_absolute() else workdir / p


def _metric_list(text: str) -> tuple[str, ...]:
    names = tuple(m.strip() for m in text.split(",") if m.strip())
    unknown = [m for m in names if m not in METRIC_NAMES]
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown metric(s) {unknown}; choose from {METRIC_NAMES}")
    return names


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated integers, got {text!r}"
        ) from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="videodepth", description="Toy video depth estimation with camera-pose embedding"
    )
    parser.add_argument("--workdir", default=".", help="Base for relative paths (default: .)")
    parser.add_argument("--log-level", default="INFO", help="Console log level (default: INFO)")
    parser.add_argument("--no-progress", action="store_true", help="Hide progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="Render synthetic clips with exact depth and poses")
    gen.add_argument("--spec", required=True, help="Scene TOML file")
    gen.add_argument("--out", required=True, help="Output directory")
    gen.add_argument("--count", type=int, required=True, help="Number of clips")
    gen.add_argument("--no-audit", action="store_true", help="Skip the warp-consistency audit")

    tr = sub.add_parser("train", help="Run a training stage")
    tr.add_argument("--config", required=True, help="Training TOML file")
    tr.add_argument("--stage", type=int, choices=[1, 2], help="Override the configured stage")
    tr.add_argument("--resume", help="Checkpoint or run directory to continue from")
    tr.add_argument("--init", help="Checkpoint to initialise from (required for stage 2)")
    tr.add_argument("--steps", type=int, help="Override the step count")
    tr.add_argument("--plot-loss", help="Write a loss-curve PNG after training")

    ev = sub.add_parser("eval", help="Score a checkpoint (or ground truth) on a clip directory")
    ev.add_argument("--ckpt", required=True, help="Checkpoint, run directory, or 'none'")
    ev.add_argument("--data", required=True, help="Clip directory")
    ev.add_argument(
        "--metrics",
        type=_metric_list,
        default=METRIC_NAMES,
        help=f"Comma-separated subset of {','.join(METRIC_NAMES)} (default: all)",
    )
    ev.add_argument("--report", help="Write the JSON report here")
    ev.add_argument(
        "--oracle-gt",
        action="store_true",
        help="Use ground truth as the prediction (with --ckpt none)",
    )
    ev.add_argument("--pose-gate", choices=["auto", "on", "off"], default="auto",
                    help="Force the pose gate at inference (default: auto, always open)")
    ev.add_argument("--pose-noise", type=float, default=0.0,
                    help="Relative noise added to predicted poses (default: 0)")
    ev.add_argument("--per-frame", action="store_true", help="Align AbsRel/δ1 per frame")
    ev.add_argument("--tae-normalizer", choices=["interior", "pairs"], default="interior",
                    help="TAE denominator: 2(T-2) or the number of warped pairs")
    ev.add_argument("--max-clips", type=int, default=0, help="Evaluate at most this many clips")
    ev.add_argument("--seed", type=int, default=0, help="Point-sampling seed")

    gc = sub.add_parser("gradcheck", help="Finite-difference gradient checks")
    gc.add_argument("--module", choices=["all", "tensor", "gem", "astt", "losses"], default="all")
    gc.add_argument("--seed", type=int, default=0)

    ab = sub.add_parser("ablate-placement", help="Train early/mid/late variants and compare")
    ab.add_argument("--config", required=True, help="Training TOML file")
    ab.add_argument("--seeds", type=_int_list, default=(0, 1, 2), help="Seeds (default: 0,1,2)")
    ab.add_argument("--steps", type=int, help="Steps per variant (default: from config)")
    ab.add_argument("--eval-data", help="Clip directory to score on (default: training data)")
    ab.add_argument("--plot", help="Write a bar chart PNG")
    return parser


def cmd_gen_data(args, workdir: Path) -> int:
    from src.videodepth.synthdata import generate_dataset

    spec = load_scene_spec(_resolve(workdir, args.spec))
    out = _resolve(workdir, args.out)
    paths = generate_dataset(spec, out, args.count, audit=not args.no_audit, progress=args.progress)
    print(f"Wrote {len(paths)} clips to {out}")
    return 0


def cmd_train(args, workdir: Path) -> int:
    from src.videodepth.train import train

    cfg = load_train_config(_resolve(workdir, args.config))
    overrides = {}
    if args.stage is not None:
        overrides["stage"] = args.stage
    if args.init is not None:
        overrides["init_checkpoint"] = args.init
    if args.steps is not None:
        overrides["steps"] = args.steps
    if overrides:
        cfg = replace(cfg, **overrides)
    result = train(cfg, workdir, resume=_resolve(workdir, args.resume), progress=args.progress)
    if result.losses:
        print(f"Stage {cfg.stage}: {result.step} steps, final loss {result.losses[-1]:.5f}")
    print(f"Checkpoint: {result.checkpoint}")
    if args.plot_loss:
        from src.videodepth.logs import STEP_LOG_NAME, read_step_log
        from src.visualization.plots import plot_loss_curves

        plot = plot_loss_curves(
            read_step_log(result.run_dir / STEP_LOG_NAME), _resolve(workdir, args.plot_loss)
        )
        print(f"Loss curves: {plot}")
    return 0


def cmd_eval(args, workdir: Path) -> int:
    from src.videodepth.evaluate import evaluate_directory, result_table, write_report

    oracle = args.ckpt.lower() == "none"
    if oracle and not args.oracle_gt:
        raise ContractError("--ckpt none needs --oracle-gt (ground truth as the prediction)")
    if args.oracle_gt and not oracle:
        raise ContractError("--oracle-gt only applies with --ckpt none")
    cfg = EvalConfig(
        metrics=args.metrics,
        per_frame_alignment=args.per_frame,
        tae_normalizer=args.tae_normalizer,
        seed=args.seed,
        pose_gate=args.pose_gate,
        pose_noise=args.pose_noise,
    )
    result = evaluate_directory(
        _resolve(workdir, args.data),
        cfg,
        checkpoint=None if oracle else _resolve(workdir, args.ckpt),
        max_clips=args.max_clips,
        progress=args.progress,
    )
    if result.stage is not None:
        print(f"Checkpoint stage: {result.stage}")
    print(result_table(result))
    if args.report:
        path = _resolve(workdir, args.report)
        write_report(path, result)
        print(f"Report: {path}")
    return 0


def cmd_gradcheck(args, workdir: Path) -> int:
    from src.videodepth.gradcheck import run_suite

    reports = run_suite(args.module, seed=args.seed)
    for report in reports:
        print(report)
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed")
    return 1 if failed else 0


def cmd_ablate(args, workdir: Path) -> int:
    from src.videodepth.train import (
        ablate_placement,
        format_placement_table,
        placement_ordering_holds,
    )

    cfg = load_train_config(_resolve(workdir, args.config))
    results = ablate_placement(
        cfg, workdir, seeds=args.seeds, steps=args.steps, eval_dir=args.eval_data,
        progress=args.progress,
    )
    print(format_placement_table(results))
    held = sum(placement_ordering_holds(results, s) for s in args.seeds)
    print(f"early <= mid <= late (AbsRel) held for {held}/{len(args.seeds)} seeds")
    if args.plot:
        from src.visualization.plots import plot_placement_ablation

        print(f"Plot: {plot_placement_ablation(results, _resolve(workdir, args.plot))}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate-placement": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.progress = not args.no_progress
    try:
        configure_logging(args.log_level)
    except ValueError as e:
        parser.error(str(e))
    workdir = Path(args.workdir)
    try:
        return COMMANDS[args.command](args, workdir)
    except VideoDepthError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as e:
        # bad config values, unreadable TOML, missing files
        print(f"error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("\ninterrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
