"""Run the metric suite over clips, with a model or with ground truth as the prediction."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from tqdm import tqdm

from src.videodepth import tensor as T
from src.videodepth.checkpoint import load_checkpoint
from src.videodepth.config import EvalConfig
from src.videodepth.errors import ContractError
from src.videodepth.geometry import PointCloud, Pose, backproject
from src.videodepth.metrics import (
    MetricReport,
    ate,
    default_f1_threshold,
    disparity_accuracy,
    f1_score,
    median_scale,
    tae,
    tcd,
    tcd_floor,
)
from src.videodepth.model import DepthModel
from src.videodepth.synthdata import VideoClip, list_clips, load_clip

logger = logging.getLogger(__name__)

TABLE_COLUMNS = (
    ("AbsRel", "absrel"),
    ("δ1", "delta1"),
    ("TAE", "tae"),
    ("TCD", "tcd"),
    ("F1", "f1"),
    ("ATE", "ate"),
)
_GATES = {"auto": None, "on": True, "off": False}


@dataclass
class Prediction:
    """Model output for one clip: disparity ``[N, H, W]`` and optional canonical poses."""

    disparity: np.ndarray
    q: np.ndarray | None = None
    t: np.ndarray | None = None

    def poses(self) -> list[Pose] | None:
        if self.q is None or self.t is None:
            return None
        return [Pose(q, t) for q, t in zip(self.q, self.t, strict=True)]


@dataclass
class EvaluationResult:
    reports: list[MetricReport]
    mean: MetricReport
    stage: int | None = None
    checkpoint: str | None = None
    clip_ids: list[int] = field(default_factory=list)


def predict_clip(
    model: DepthModel,
    clip: VideoClip,
    pose_gate: str = "auto",
    pose_noise: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Prediction:
    """Inference on one clip without recording a tape."""
    if pose_gate not in _GATES:
        raise ContractError(f"pose_gate must be one of {tuple(_GATES)}, got {pose_gate!r}")
    model.eval()
    with T.no_grad():
        out = model(
            clip.images[None],
            gate_override=_GATES[pose_gate],
            rng=rng,
            pose_noise=pose_noise if pose_noise > 0 else None,
        )
    q = out.q.numpy()[0].astype(np.float64) if out.q is not None else None
    t = out.t.numpy()[0].astype(np.float64) if out.t is not None else None
    return Prediction(out.disparity.numpy()[0].astype(np.float64), q, t)


def _paired_clouds(
    pred_depth: np.ndarray,
    clip: VideoClip,
    valid: np.ndarray,
    samples: int,
    rng: np.random.Generator,
) -> tuple[PointCloud, PointCloud]:
    """Reconstructed and ground-truth clouds sampled at the same pixels."""
    poses = clip.metric_poses()
    recon, truth = [], []
    for i in range(clip.num_frames):
        K = clip.intrinsics[i]
        idx = np.flatnonzero(valid[i])
        if len(idx) > samples:
            idx = np.sort(rng.choice(idx, size=samples, replace=False))
        recon.append(backproject(pred_depth[i], K, poses[i], valid[i]).points[idx])
        truth.append(backproject(clip.depth[i], K, poses[i], valid[i]).points[idx])
    return (
        PointCloud.from_points(np.concatenate(recon)),
        PointCloud.from_points(np.concatenate(truth)),
    )


def evaluate_clip(
    clip: VideoClip,
    cfg: EvalConfig,
    model: DepthModel | None = None,
    prediction: Prediction | None = None,
) -> MetricReport:
    """Score one clip.

    With neither ``model`` nor ``prediction`` the clip's own ground truth is
    used as the prediction (oracle mode).
    """
    rng = np.random.default_rng(cfg.seed + clip.clip_id)
    if prediction is None:
        if model is not None:
            prediction = predict_clip(model, clip, cfg.pose_gate, cfg.pose_noise, rng)
        else:
            q, t = clip.pose_arrays()
            prediction = Prediction(clip.disp.astype(np.float64), q, t)
    wanted = set(cfg.metrics)
    n = clip.num_frames
    report = MetricReport(frames=n)

    accuracy = disparity_accuracy(
        prediction.disparity, clip.depth, clip.mask, cfg.per_frame_alignment
    )
    report.scale = float(accuracy.scale.mean())
    report.shift = float(accuracy.shift.mean())
    report.valid_pixels = accuracy.valid_pixels
    if "absrel" in wanted:
        report.absrel = accuracy.absrel
    if "delta1" in wanted:
        report.delta1 = accuracy.delta1

    valid = accuracy.mask
    depth = median_scale(accuracy.aligned_depth, clip.depth, valid)
    poses = clip.metric_poses()
    if "tae" in wanted and n >= 3:
        report.tae = tae(depth, poses, clip.intrinsics, valid, normalizer=cfg.tae_normalizer)
    if "tcd" in wanted and n >= 2:
        report.tcd = tcd(depth, poses, clip.intrinsics, cfg.tcd_samples, valid, rng)
    if "f1" in wanted:
        recon, truth = _paired_clouds(depth, clip, valid, cfg.tcd_samples, rng)
        threshold = cfg.f1_threshold or default_f1_threshold(truth, cfg.f1_fraction)
        report.f1 = f1_score(recon, truth, threshold)[2]
    if "ate" in wanted and prediction.t is not None and n >= 2:
        report.ate = ate(prediction.t, np.stack([p.t for p in poses]))
    if report.tcd is not None:
        report.tcd_floor = tcd_floor(
            clip.depth, poses, clip.intrinsics, cfg.tcd_samples, clip.mask, rng
        )
    return report


def evaluate_directory(
    data_dir: str | Path,
    cfg: EvalConfig,
    checkpoint: str | Path | None = None,
    max_clips: int = 0,
    progress: bool = True,
) -> EvaluationResult:
    """Evaluate every clip under ``data_dir``; no checkpoint means oracle mode."""
    model = None
    stage = None
    if checkpoint is not None:
        ckpt = load_checkpoint(checkpoint)
        model = ckpt.build_model()
        stage = ckpt.stage
        logger.info("evaluating %s (stage %d, step %d)", ckpt.path, ckpt.stage, ckpt.step)
    paths = list_clips(data_dir)
    if max_clips:
        paths = paths[:max_clips]
    if not paths:
        raise ContractError(f"No clips to evaluate under {data_dir}")
    reports, ids = [], []
    for path in tqdm(paths, desc="Evaluating", disable=not progress):
        clip = load_clip(path)
        reports.append(evaluate_clip(clip, cfg, model))
        ids.append(clip.clip_id)
    return EvaluationResult(
        reports, MetricReport.mean(reports), stage, str(checkpoint) if checkpoint else None, ids
    )


def write_report(path: str | Path, result: EvaluationResult):
    """JSON report: per-clip metrics plus their mean."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = {
        "checkpoint": result.checkpoint,
        "stage": result.stage,
        "clips": [
            {"clip_id": cid, **r.to_dict()}
            for cid, r in zip(result.clip_ids, result.reports, strict=True)
        ],
        "mean": result.mean.to_dict(),
    }
    path.write_text(json.dumps(data, indent=2))


def format_table(rows: list[tuple[str, MetricReport]]) -> str:
    """Fixed-order metric table, one row per labelled report."""
    label_width = max([len("clip")] + [len(label) for label, _ in rows])
    header = f"{'clip':<{label_width}}  " + "  ".join(f"{name:>8}" for name, _ in TABLE_COLUMNS)
    lines = [header, "-" * len(header)]
    for label, report in rows:
        cells = []
        for _, attr in TABLE_COLUMNS:
            value = getattr(report, attr)
            cells.append(f"{'-':>8}" if value is None else f"{value:>8.4f}")
        lines.append(f"{label:<{label_width}}  " + "  ".join(cells))
    return "\n".join(lines)


def result_table(result: EvaluationResult) -> str:
    rows = [(f"clip_{cid:05d}", r) for cid, r in zip(result.clip_ids, result.reports, strict=True)]
    rows.append(("mean", result.mean))
    return format_table(rows)
