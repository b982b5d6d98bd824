"""Training objectives: camera, scale-shift-invariant, gradient matching, temporal.

Disparity inputs are ``[B, N, H, W]`` (or ``[N, H, W]`` for a single clip);
predictions are tensors, ground truth and masks are plain arrays. Every loss
is differentiable with respect to the prediction, including through the
closed-form per-frame scale/shift alignment.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from src.videodepth import tensor as T
from src.videodepth.config import LossWeights
from src.videodepth.errors import ContractError, ShapeError
from src.videodepth.geometry import Pose, hemisphere_sign
from src.videodepth.tensor import Tensor

logger = logging.getLogger(__name__)

IDENTITY_ATOL = 1e-5
_VAR_EPS = 1e-12


@dataclass
class Alignment:
    """Per-frame least-squares fit ``s * pred + t ~ gt``.

    Attributes:
        aligned: ``s * pred + t`` as a tensor ``[F, H, W]`` (F = B*N frames)
        scale: Per-frame scale tensor ``[F, 1, 1]``
        shift: Per-frame shift tensor ``[F, 1, 1]``
        used: Frames that had enough signal to be aligned
        mask: Validity mask ``[F, H, W]`` restricted to used frames
    """

    aligned: Tensor
    scale: Tensor
    shift: Tensor
    used: np.ndarray
    mask: np.ndarray


@dataclass
class LossBreakdown:
    total: Tensor
    terms: dict[str, float] = field(default_factory=dict)


def _as_clip_batch(pred: Tensor, gt: np.ndarray, mask: np.ndarray | None):
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"Prediction shape {pred.shape} does not match ground truth {gt.shape}")
    if pred.ndim == 3:
        pred = T.reshape(pred, (1, *pred.shape))
        gt = gt[None]
        mask = None if mask is None else np.asarray(mask)[None]
    if pred.ndim != 4:
        raise ShapeError(f"Disparity must be [B, N, H, W] or [N, H, W], got shape {pred.shape}")
    mask = np.ones(gt.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != gt.shape:
        raise ShapeError(f"Mask shape {mask.shape} does not match {gt.shape}")
    return pred, gt, mask


def align_disparity(pred: Tensor, gt: np.ndarray, mask: np.ndarray | None = None) -> Alignment:
    """Closed-form per-frame scale and shift, differentiable in ``pred``.

    Frames with fewer than two valid pixels, or with a constant prediction,
    are skipped with a warning.
    """
    pred, gt, mask = _as_clip_batch(pred, gt, mask)
    b, n, h, w = pred.shape
    frames = b * n
    p = T.reshape(pred, (frames, h, w))
    g = gt.reshape(frames, h, w).astype(pred.dtype)
    m = mask.reshape(frames, h, w)
    counts = m.sum(axis=(1, 2))
    used = counts >= 2
    for f in np.flatnonzero(~used):
        logger.warning("align: frame %d has %d valid pixels, skipped", f, counts[f])

    mf = Tensor(m.astype(pred.dtype))
    inv_n = Tensor((1.0 / np.maximum(counts, 1)).reshape(frames, 1, 1), dtype=pred.dtype)
    p_mean = T.tensor_sum(p * mf, axis=(1, 2), keepdims=True) * inv_n
    g_mean = (g * m).sum(axis=(1, 2), keepdims=True) / np.maximum(counts, 1).reshape(frames, 1, 1)
    pc = (p - p_mean) * mf
    gc = Tensor(((g - g_mean) * m).astype(pred.dtype))
    var = T.tensor_sum(pc * pc, axis=(1, 2), keepdims=True)
    cov = T.tensor_sum(pc * gc, axis=(1, 2), keepdims=True)

    per_pixel_var = var.data.reshape(-1) / np.maximum(counts, 1)
    flat = used & (per_pixel_var <= _VAR_EPS)
    for f in np.flatnonzero(flat):
        logger.warning("align: frame %d has a constant prediction, skipped", f)
    used = used & ~flat

    # Skipped frames get a harmless denominator; they never enter a loss.
    safe = Tensor(np.where(used, 0.0, 1.0).reshape(frames, 1, 1), dtype=pred.dtype)
    scale = cov / (var + safe)
    shift = Tensor(g_mean.astype(pred.dtype)) - scale * p_mean
    aligned = p * scale + shift
    return Alignment(aligned, scale, shift, used, m & used[:, None, None])


def _trim_mask(residual: np.ndarray, mask: np.ndarray, fraction: float) -> np.ndarray:
    if fraction <= 0:
        return mask
    out = mask.copy()
    for f in range(residual.shape[0]):
        values = residual[f][mask[f]]
        keep = int(np.ceil(len(values) * (1.0 - fraction)))
        if keep < len(values):
            cutoff = np.sort(values)[max(keep - 1, 0)]
            out[f] &= residual[f] <= cutoff
    return out


def ssi_loss(
    pred_disp: Tensor,
    gt_disp: np.ndarray,
    mask: np.ndarray | None = None,
    trim_fraction: float = 0.0,
    alignment: Alignment | None = None,
) -> Tensor:
    """Mean absolute residual after per-frame affine alignment, averaged over frames."""
    if alignment is None:
        alignment = align_disparity(pred_disp, gt_disp, mask)
    if not alignment.used.any():
        raise ContractError("ssi_loss: every frame was skipped (not enough valid pixels)")
    frames, h, w = alignment.aligned.shape
    g = np.asarray(gt_disp).reshape(frames, h, w).astype(alignment.aligned.dtype)
    residual = T.absolute(alignment.aligned - g)
    m = _trim_mask(residual.data, alignment.mask, trim_fraction)
    counts = m.sum(axis=(1, 2))
    weights = np.where(alignment.used & (counts > 0), 1.0 / np.maximum(counts, 1), 0.0)
    num_frames = int((weights > 0).sum())
    per_pixel = m * weights[:, None, None] / num_frames
    return T.tensor_sum(residual * Tensor(per_pixel, dtype=residual.dtype))


def gm_loss(
    pred_disp: Tensor,
    gt_disp: np.ndarray,
    mask: np.ndarray | None = None,
    scales: int = 4,
    alignment: Alignment | None = None,
) -> Tensor:
    """Multi-scale gradient matching on the aligned residual.

    At scale ``k`` the residual is subsampled with stride ``2**k``; the term is
    the mean of ``|dR/dx| + |dR/dy|`` over valid neighbour pairs. Terms are
    summed over scales whose larger side still has two pixels.
    """
    if alignment is None:
        alignment = align_disparity(pred_disp, gt_disp, mask)
    frames, h, w = alignment.aligned.shape
    g = np.asarray(gt_disp).reshape(frames, h, w).astype(alignment.aligned.dtype)
    residual = alignment.aligned - g
    total: Tensor | None = None
    used_scales = 0
    for k in range(scales):
        step = 2**k
        r = residual[:, ::step, ::step]
        m = alignment.mask[:, ::step, ::step]
        hk, wk = m.shape[1:]
        if max(hk, wk) < 2:
            break
        used_scales += 1
        terms = []
        pairs = 0
        if wk >= 2:
            mx = (m[:, :, 1:] & m[:, :, :-1]).astype(r.dtype)
            dx = T.absolute(r[:, :, 1:] - r[:, :, :-1])
            terms.append(T.tensor_sum(dx * Tensor(mx, dtype=r.dtype)))
            pairs += int(mx.sum())
        if hk >= 2:
            my = (m[:, 1:, :] & m[:, :-1, :]).astype(r.dtype)
            dy = T.absolute(r[:, 1:, :] - r[:, :-1, :])
            terms.append(T.tensor_sum(dy * Tensor(my, dtype=r.dtype)))
            pairs += int(my.sum())
        if pairs == 0:
            continue
        term = terms[0] if len(terms) == 1 else terms[0] + terms[1]
        term = term * (1.0 / pairs)
        total = term if total is None else total + term
    if used_scales < scales:
        logger.warning("gm_loss: %dx%d frames support %d of %d scales", h, w, used_scales, scales)
    if total is None:
        return T.tensor_sum(residual * 0.0)
    return total


def tgm_loss(
    pred_disp: Tensor,
    gt_disp: np.ndarray,
    mask: np.ndarray | None = None,
    aligned: Tensor | None = None,
    alignment: Alignment | None = None,
) -> Tensor:
    """Temporal gradient matching between adjacent frames.

    Mean over co-valid pixels of ``|(p[t+1] - p[t]) - (g[t+1] - g[t])|`` on
    aligned predictions, averaged over adjacent pairs. ``aligned`` bypasses
    the alignment step (predictions already in ground-truth units).
    """
    pred_disp, gt, m = _as_clip_batch(pred_disp, gt_disp, mask)
    b, n, h, w = pred_disp.shape
    if n < 2:
        logger.warning("tgm_loss: clip has %d frame(s), temporal term is 0", n)
        return T.tensor_sum(pred_disp * 0.0)
    if aligned is not None:
        a = T.reshape(aligned, (b, n, h, w))
    else:
        if alignment is None:
            alignment = align_disparity(pred_disp, gt, m)
        a = T.reshape(alignment.aligned, (b, n, h, w))
        m = alignment.mask.reshape(b, n, h, w)
    g = gt.astype(a.dtype)
    co_valid = m[:, 1:] & m[:, :-1]
    counts = co_valid.sum(axis=(2, 3))
    live = counts > 0
    if not live.any():
        logger.warning("tgm_loss: no co-valid pixels between adjacent frames, term is 0")
        return T.tensor_sum(a * 0.0)
    weights = np.where(live, 1.0 / np.maximum(counts, 1), 0.0) / live.sum()
    dp = a[:, 1:] - a[:, :-1]
    dg = g[:, 1:] - g[:, :-1]
    per_pixel = co_valid * weights[:, :, None, None]
    return T.tensor_sum(T.absolute(dp - dg) * Tensor(per_pixel, dtype=a.dtype))


# ----------------------------------------------------------------------
# Camera loss
# ----------------------------------------------------------------------
def _pose_arrays(poses) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(poses, tuple) and len(poses) == 2:
        q, t = poses
        q = q.data if isinstance(q, Tensor) else np.asarray(q)
        t = t.data if isinstance(t, Tensor) else np.asarray(t)
        return q, t
    poses = list(poses)
    return np.stack([p.q for p in poses]), np.stack([p.t for p in poses])


def _check_canonical(q: np.ndarray, t: np.ndarray, which: str):
    q0 = q[..., 0, :]
    t0 = t[..., 0, :]
    identity = np.abs(np.abs(q0[..., 0]) - 1.0) <= IDENTITY_ATOL
    identity &= np.all(np.abs(q0[..., 1:]) <= IDENTITY_ATOL, axis=-1)
    identity &= np.all(np.abs(t0) <= IDENTITY_ATOL, axis=-1)
    if not np.all(identity):
        raise ContractError(
            f"camera_loss: {which} poses are not canonical (first pose is not identity)"
        )


def camera_loss(
    pred: Sequence[Pose] | tuple[Tensor, Tensor],
    gt: Sequence[Pose] | tuple[np.ndarray, np.ndarray],
    lam: float = 1.0,
    delta: float = 1.0,
    require_canonical: bool = True,
) -> Tensor:
    """Huber pose loss averaged over frames (and clips).

    Each quaternion and translation residual is Huber-penalized per component
    and summed; quaternions are moved to the canonical hemisphere first, so
    ``q`` and ``-q`` give the same loss.

    Args:
        pred: Predicted poses, either a list of :class:`Pose` or tensors
            ``(q [.., N, 4], t [.., N, 3])``
        gt: Ground-truth canonical poses, same layouts (arrays for tuples)
        lam: Weight of the translation term
        delta: Huber transition point
        require_canonical: Reject inputs whose first pose is not the identity
    """
    if isinstance(pred, tuple) and len(pred) == 2 and isinstance(pred[0], Tensor):
        q_pred, t_pred = pred
    else:
        qa, ta = _pose_arrays(pred)
        q_pred, t_pred = Tensor(qa), Tensor(ta)
    q_gt, t_gt = _pose_arrays(gt)
    if q_pred.shape != q_gt.shape or t_pred.shape != t_gt.shape:
        raise ShapeError(
            f"camera_loss: prediction shapes {q_pred.shape}/{t_pred.shape} "
            f"do not match ground truth {q_gt.shape}/{t_gt.shape}"
        )
    if require_canonical:
        _check_canonical(q_pred.data, t_pred.data, "predicted")
        _check_canonical(q_gt, t_gt, "ground-truth")
    sign_pred = hemisphere_sign(q_pred.data)
    sign_gt = hemisphere_sign(q_gt)
    q_res = q_pred * Tensor(sign_pred, dtype=q_pred.dtype) - (q_gt * sign_gt).astype(q_pred.dtype)
    t_res = t_pred - t_gt.astype(t_pred.dtype)
    per_frame = T.tensor_sum(T.huber(q_res, delta), axis=-1) + T.tensor_sum(
        T.huber(t_res, delta), axis=-1
    ) * lam
    return T.mean(per_frame)


# ----------------------------------------------------------------------
# Weighted total
# ----------------------------------------------------------------------
def combine_losses(terms: dict[str, Tensor | float], weights: LossWeights) -> Tensor | float:
    """``ssi + alpha*gm + beta*tgm + gamma*cam``; a missing ``cam`` term is dropped."""
    coefficients = {"ssi": 1.0, "gm": weights.alpha, "tgm": weights.beta, "cam": weights.gamma}
    unknown = set(terms) - set(coefficients)
    if unknown:
        raise ContractError(f"Unknown loss terms: {sorted(unknown)}")
    total: Tensor | float = 0.0
    for name, coefficient in coefficients.items():
        if name in terms:
            total = terms[name] * coefficient + total
    return total


def total_loss(
    pred_disp: Tensor,
    gt_disp: np.ndarray,
    mask: np.ndarray | None,
    weights: LossWeights,
    pred_poses: tuple[Tensor, Tensor] | None = None,
    gt_poses: tuple[np.ndarray, np.ndarray] | None = None,
) -> LossBreakdown:
    """All depth terms plus the camera term when pose labels are given."""
    alignment = align_disparity(pred_disp, gt_disp, mask)
    terms: dict[str, Tensor] = {
        "ssi": ssi_loss(pred_disp, gt_disp, mask, weights.trim_fraction, alignment),
        "gm": gm_loss(pred_disp, gt_disp, mask, weights.gm_scales, alignment),
        "tgm": tgm_loss(pred_disp, gt_disp, mask, alignment=alignment),
    }
    if gt_poses is not None:
        if pred_poses is None:
            raise ContractError("total_loss: pose labels given but the model predicted no poses")
        terms["cam"] = camera_loss(pred_poses, gt_poses, weights.lam, weights.huber_delta)
    total = combine_losses(terms, weights)
    assert isinstance(total, Tensor)
    return LossBreakdown(total, {name: float(term.item()) for name, term in terms.items()})
