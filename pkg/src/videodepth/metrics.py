"""Evaluation metrics: affine-invariant depth accuracy, temporal consistency,
reconstruction quality and trajectory error.

All functions take plain numpy arrays and are deterministic given the
generator passed for point subsampling.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass

import numpy as np

from src.videodepth.errors import ContractError, DegenerateInputError, ShapeError
from src.videodepth.geometry import (
    Intrinsics,
    PointCloud,
    Pose,
    backproject,
    relative_pose,
    umeyama_align,
    warp_depth,
)

logger = logging.getLogger(__name__)

DELTA1_THRESHOLD = 1.25
F1_DIAGONAL_FRACTION = 0.05
TAE_NORMALIZERS = ("interior", "pairs")
_CHUNK = 256
_VAR_EPS = 1e-12
_tae_discrepancy_logged = False


@dataclass
class MetricReport:
    """Per-clip evaluation results. Metrics that were not computed are None.

    Attributes:
        absrel: Mean absolute relative depth error
        delta1: Fraction of pixels with ``max(d/d_hat, d_hat/d) < 1.25``
        tae: Temporal alignment error
        tcd: Temporal Chamfer distance (squared scene units)
        tcd_floor: TCD that point sampling alone gives on this clip's ground truth
        f1: Reconstruction F1 score
        ate: Absolute trajectory error (scene units)
        scale: Disparity alignment scale
        shift: Disparity alignment shift
        valid_pixels: Pixels that entered AbsRel / delta1
        frames: Frames in the clip
    """

    absrel: float | None = None
    delta1: float | None = None
    tae: float | None = None
    tcd: float | None = None
    tcd_floor: float | None = None
    f1: float | None = None
    ate: float | None = None
    scale: float | None = None
    shift: float | None = None
    valid_pixels: int = 0
    frames: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def mean(cls, reports: Sequence[MetricReport]) -> MetricReport:
        """Average every computed metric over the reports that have it."""
        out = cls(
            frames=sum(r.frames for r in reports),
            valid_pixels=sum(r.valid_pixels for r in reports),
        )
        for name in ("absrel", "delta1", "tae", "tcd", "tcd_floor", "f1", "ate"):
            values = [getattr(r, name) for r in reports if getattr(r, name) is not None]
            if values:
                setattr(out, name, float(np.mean(values)))
        return out


# ----------------------------------------------------------------------
# Depth accuracy
# ----------------------------------------------------------------------
def _lstsq_affine(p: np.ndarray, g: np.ndarray) -> tuple[float, float]:
    p_mean = p.mean()
    g_mean = g.mean()
    var = ((p - p_mean) ** 2).mean()
    if var <= _VAR_EPS:
        logger.warning("align_affine: constant prediction, falling back to shift-only alignment")
        return 1.0, float(g_mean - p_mean)
    scale = ((p - p_mean) * (g - g_mean)).mean() / var
    return float(scale), float(g_mean - scale * p_mean)


def align_affine(
    pred_disp: np.ndarray,
    gt_disp: np.ndarray,
    mask: np.ndarray | None = None,
    per_frame: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares ``(s, t)`` with ``s * pred + t ~ gt`` over masked pixels.

    One pair is fitted jointly over the whole sequence unless ``per_frame``.

    Returns:
        ``(scale, shift)`` arrays of length 1 (sequence) or N (per frame)
    """
    pred = np.asarray(pred_disp, dtype=np.float64)
    gt = np.asarray(gt_disp, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"Prediction shape {pred.shape} does not match ground truth {gt.shape}")
    mask = np.ones(pred.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if pred.ndim == 2:
        pred, gt, mask = pred[None], gt[None], mask[None]
    groups = [np.s_[i] for i in range(len(pred))] if per_frame else [np.s_[:]]
    scales, shifts = [], []
    for group in groups:
        m = mask[group]
        if m.sum() < 2:
            raise ContractError(f"align_affine needs at least 2 masked pixels, got {int(m.sum())}")
        s, t = _lstsq_affine(pred[group][m], gt[group][m])
        scales.append(s)
        shifts.append(t)
    return np.array(scales), np.array(shifts)


def absrel_delta1(
    pred_depth: np.ndarray, gt_depth: np.ndarray, mask: np.ndarray | None = None
) -> tuple[float, float]:
    """AbsRel and delta1 of already-aligned depths over ``mask``."""
    pred = np.asarray(pred_depth, dtype=np.float64)
    gt = np.asarray(gt_depth, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"Prediction shape {pred.shape} does not match ground truth {gt.shape}")
    mask = np.ones(pred.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ContractError("absrel_delta1: empty mask")
    d, d_hat = gt[mask], pred[mask]
    if np.any(d <= 0):
        raise ContractError("absrel_delta1: ground-truth depth must be positive on the mask")
    absrel = float(np.mean(np.abs(d - d_hat) / d))
    with np.errstate(divide="ignore"):
        ratio = np.maximum(d / d_hat, d_hat / d)
    delta1 = float(np.mean(ratio < DELTA1_THRESHOLD))
    return absrel, delta1


@dataclass
class DepthAccuracy:
    absrel: float
    delta1: float
    scale: np.ndarray
    shift: np.ndarray
    valid_pixels: int
    aligned_depth: np.ndarray
    mask: np.ndarray


def disparity_accuracy(
    pred_disp: np.ndarray,
    gt_depth: np.ndarray,
    mask: np.ndarray | None = None,
    per_frame: bool = False,
) -> DepthAccuracy:
    """Align predicted disparity to ``1 / gt_depth``, invert, and score.

    Pixels whose aligned disparity is not positive are left out.
    """
    pred = np.asarray(pred_disp, dtype=np.float64)
    gt = np.asarray(gt_depth, dtype=np.float64)
    mask = np.ones(gt.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    mask = mask & (gt > 0)
    gt_disp = np.where(mask, 1.0 / np.where(mask, gt, 1.0), 0.0)
    scale, shift = align_affine(pred, gt_disp, mask, per_frame)
    if per_frame:
        aligned = pred * scale[:, None, None] + shift[:, None, None]
    else:
        aligned = pred * scale[0] + shift[0]
    keep = mask & (aligned > 0)
    if keep.sum() < mask.sum():
        dropped = int(mask.sum() - keep.sum())
        logger.debug("masked %d pixels with nonpositive aligned disparity", dropped)
    depth = np.where(keep, 1.0 / np.where(keep, aligned, 1.0), 0.0)
    absrel, delta1 = absrel_delta1(depth, gt, keep)
    return DepthAccuracy(absrel, delta1, scale, shift, int(keep.sum()), depth, keep)


def median_scale(
    pred_depths: np.ndarray, gt_depths: np.ndarray, masks: np.ndarray | None = None
) -> np.ndarray:
    """Scale each predicted frame so its median matches the ground truth's."""
    pred = np.asarray(pred_depths, dtype=np.float64)
    gt = np.asarray(gt_depths, dtype=np.float64)
    masks = np.ones(pred.shape, dtype=bool) if masks is None else np.asarray(masks, dtype=bool)
    out = pred.copy()
    for i in range(len(pred)):
        m = masks[i] & (pred[i] > 0) & (gt[i] > 0)
        if m.any():
            out[i] *= np.median(gt[i][m]) / np.median(pred[i][m])
    return out


# ----------------------------------------------------------------------
# Temporal consistency
# ----------------------------------------------------------------------
def _frame_intrinsics(intrinsics: Intrinsics | Sequence[Intrinsics], i: int) -> Intrinsics:
    return intrinsics if isinstance(intrinsics, Intrinsics) else intrinsics[i]


def warp_absrel(
    depth_src: np.ndarray,
    depth_dst: np.ndarray,
    pose_src: Pose,
    pose_dst: Pose,
    K: Intrinsics,
    mask_src: np.ndarray | None = None,
    mask_dst: np.ndarray | None = None,
) -> float | None:
    """AbsRel of ``depth_src`` splatted into the ``dst`` view against ``depth_dst``.

    Returns None when no warped pixel lands on a valid target pixel.
    """
    if mask_dst is None:
        mask_dst = np.ones(np.shape(depth_dst), dtype=bool)
    warped, hit = warp_depth(depth_src, relative_pose(pose_src, pose_dst), K, mask_src)
    m = hit & mask_dst & (depth_dst > 0)
    if not m.any():
        return None
    return float(np.mean(np.abs(warped[m] - depth_dst[m]) / depth_dst[m]))


def tae(
    pred_depths: np.ndarray,
    poses: Sequence[Pose],
    intrinsics: Intrinsics | Sequence[Intrinsics],
    masks: np.ndarray | None = None,
    gt_depths: np.ndarray | None = None,
    normalizer: str = "interior",
) -> float:
    """Temporal alignment error over adjacent frame pairs, warped both ways.

    Args:
        pred_depths: Depth maps ``[N, H, W]`` in the units of ``poses``
        poses: Camera-to-world poses, one per frame
        intrinsics: Shared intrinsics or one per frame
        masks: Source/target validity ``[N, H, W]``
        gt_depths: When given, each predicted frame is median-scaled to it first
        normalizer: ``"interior"`` divides the sum by ``2(N-2)``; ``"pairs"`` by the
            number of warp terms actually evaluated

    Warp terms with no overlap are skipped. Under ``"interior"`` the sum is then
    rescaled by ``2(N-1) / terms`` so that skipped pairs do not lower the score;
    with every term present this is the plain ``2(N-2)`` normalization.
    """
    global _tae_discrepancy_logged
    depths = np.asarray(pred_depths, dtype=np.float64)
    n = len(depths)
    if n < 3:
        raise ContractError(f"TAE needs at least 3 frames, got {n}")
    if len(poses) != n:
        raise ContractError(f"TAE got {n} depth maps but {len(poses)} poses")
    if normalizer not in TAE_NORMALIZERS:
        raise ContractError(f"Unknown TAE normalizer {normalizer!r}; choose from {TAE_NORMALIZERS}")
    masks = np.ones(depths.shape, dtype=bool) if masks is None else np.asarray(masks, dtype=bool)
    if gt_depths is not None:
        depths = median_scale(depths, gt_depths, masks)

    total = 0.0
    terms = 0
    for k in range(n - 1):
        K = _frame_intrinsics(intrinsics, k)
        for src, dst in ((k, k + 1), (k + 1, k)):
            value = warp_absrel(
                depths[src], depths[dst], poses[src], poses[dst], K, masks[src], masks[dst]
            )
            if value is None:
                logger.debug("TAE: no overlap warping frame %d into %d", src, dst)
                continue
            total += value
            terms += 1
    if terms == 0:
        logger.warning("TAE: no warp term had any overlap, reporting 0")
        return 0.0
    if normalizer == "pairs":
        return total / terms
    if not _tae_discrepancy_logged:
        logger.warning(
            "TAE: summing %d adjacent pairs but normalizing by 2(N-2) = %d",
            n - 1,
            2 * (n - 2),
        )
        _tae_discrepancy_logged = True
    if terms < 2 * (n - 1):
        total *= 2 * (n - 1) / terms
    return total / (2 * (n - 2))


def _nearest_sq(a: np.ndarray, b: np.ndarray, chunk: int = _CHUNK) -> np.ndarray:
    """Squared distance from each point of ``a`` to its nearest point in ``b``."""
    out = np.empty(len(a))
    for start in range(0, len(a), chunk):
        diff = a[start : start + chunk, None, :] - b[None, :, :]
        out[start : start + chunk] = np.einsum("ijk,ijk->ij", diff, diff).min(axis=1)
    return out


def chamfer(p: np.ndarray, q: np.ndarray) -> float:
    """Symmetric Chamfer distance with squared nearest-neighbour terms."""
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0 or len(q) == 0:
        raise ContractError("Chamfer distance of an empty point cloud")
    return float(_nearest_sq(p, q).mean() + _nearest_sq(q, p).mean())


def subsample(points: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    if count <= 0 or len(points) <= count:
        return points
    return points[rng.choice(len(points), size=count, replace=False)]


def tcd(
    pred_depths: np.ndarray,
    poses: Sequence[Pose],
    intrinsics: Intrinsics | Sequence[Intrinsics],
    samples_per_frame: int = 512,
    masks: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Mean Chamfer distance between world-space clouds of consecutive frames."""
    depths = np.asarray(pred_depths, dtype=np.float64)
    n = len(depths)
    if n < 2:
        raise ContractError(f"TCD needs at least 2 frames, got {n}")
    rng = rng or np.random.default_rng(0)
    masks = np.ones(depths.shape, dtype=bool) if masks is None else np.asarray(masks, dtype=bool)
    clouds = [
        subsample(
            backproject(
                depths[i], _frame_intrinsics(intrinsics, i), poses[i], masks[i]
            ).valid_points,
            samples_per_frame,
            rng,
        )
        for i in range(n)
    ]
    values = []
    for k in range(n - 1):
        if len(clouds[k]) == 0 or len(clouds[k + 1]) == 0:
            logger.warning("TCD: skipping pair (%d, %d) with an empty cloud", k, k + 1)
            continue
        values.append(chamfer(clouds[k], clouds[k + 1]))
    if not values:
        raise ContractError("TCD: every frame pair had an empty point cloud")
    return float(np.mean(values))


def tcd_floor(
    depths: np.ndarray,
    poses: Sequence[Pose],
    intrinsics: Intrinsics | Sequence[Intrinsics],
    samples_per_frame: int = 512,
    masks: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """TCD that point sampling alone produces at this resolution and sample count.

    Each frame's cloud is split into two disjoint random subsamples of up to
    ``samples_per_frame`` points, and their Chamfer distance is averaged over
    frames. Exact depth under exact poses scores a TCD of this order.
    """
    depths = np.asarray(depths, dtype=np.float64)
    rng = rng or np.random.default_rng(0)
    masks = np.ones(depths.shape, dtype=bool) if masks is None else np.asarray(masks, dtype=bool)
    values = []
    for i in range(len(depths)):
        K = _frame_intrinsics(intrinsics, i)
        points = backproject(depths[i], K, poses[i], masks[i]).valid_points
        half = min(samples_per_frame, len(points) // 2)
        if half == 0:
            continue
        order = rng.permutation(len(points))
        values.append(chamfer(points[order[:half]], points[order[half : 2 * half]]))
    if not values:
        raise ContractError("TCD floor: every frame has fewer than 2 valid points")
    return float(np.mean(values))


# ----------------------------------------------------------------------
# Reconstruction and trajectory
# ----------------------------------------------------------------------
def default_f1_threshold(gt: PointCloud, fraction: float = F1_DIAGONAL_FRACTION) -> float:
    """``fraction`` of the ground-truth bounding-box diagonal."""
    pts = gt.valid_points
    if len(pts) == 0:
        raise ContractError("F1 threshold of an empty point cloud")
    diagonal = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    return fraction * diagonal if diagonal > 0 else 1.0


def f1_score(
    recon: PointCloud, gt: PointCloud, threshold: float | None = None
) -> tuple[float, float, float]:
    """Precision, recall and F1 with exact nearest neighbours.

    A point counts when its nearest neighbour in the other cloud is strictly
    closer than ``threshold`` (defaults to :func:`default_f1_threshold`).
    """
    r = recon.valid_points
    g = gt.valid_points
    if len(r) == 0 or len(g) == 0:
        raise ContractError(f"F1 needs nonempty clouds, got {len(r)} and {len(g)} points")
    d = default_f1_threshold(gt) if threshold is None else threshold
    if d <= 0:
        raise ContractError(f"F1 threshold must be positive, got {d}")
    precision = float(np.mean(_nearest_sq(r, g) < d * d))
    recall = float(np.mean(_nearest_sq(g, r) < d * d))
    if precision + recall == 0:
        return precision, recall, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)


def _translations(poses: Sequence[Pose] | np.ndarray) -> np.ndarray:
    if isinstance(poses, np.ndarray):
        return poses.astype(np.float64).reshape(-1, 3)
    return np.stack([p.t for p in poses]).astype(np.float64)


def ate(pred_poses: Sequence[Pose] | np.ndarray, gt_poses: Sequence[Pose] | np.ndarray) -> float:
    """RMSE of camera positions after similarity (Umeyama) alignment."""
    pred = _translations(pred_poses)
    gt = _translations(gt_poses)
    if len(pred) != len(gt):
        raise ContractError(f"ATE trajectories differ in length: {len(pred)} vs {len(gt)}")
    if len(pred) < 2:
        raise ContractError(f"ATE needs at least 2 poses, got {len(pred)}")
    try:
        s, rot, t = umeyama_align(pred, gt)
        aligned = s * pred @ rot.T + t
    except DegenerateInputError:
        logger.warning("ATE: predicted trajectory has no spread, aligning by translation only")
        aligned = pred - pred.mean(axis=0) + gt.mean(axis=0)
    return float(np.sqrt(np.mean(np.sum((aligned - gt) ** 2, axis=1))))
