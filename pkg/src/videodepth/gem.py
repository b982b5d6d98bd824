"""Geometry embedding: predict per-frame camera poses from the deepest visual
features, canonicalize them, and fuse an encoding of the poses back in.

Pose prediction runs a learnable camera token through transformer layers that
alternate between attention within each frame and attention across the whole
clip. Canonicalization is written with tensor ops so gradients flow from the
camera loss and the fused features into the pose head.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from src.videodepth import tensor as T
from src.videodepth.errors import ContractError, ShapeError
from src.videodepth.geometry import STATIC_SCALE_EPS, hemisphere_sign
from src.videodepth.nn import (
    MLP,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    TransformerBlock,
    trunc_normal,
)
from src.videodepth.tensor import Tensor

logger = logging.getLogger(__name__)

_NORM_EPS = 1e-12


@dataclass
class GEMOutput:
    """Canonical poses and the fused features for one batch of clips.

    Attributes:
        q: Unit quaternions ``[B, N, 4]`` (frame 0 exactly identity)
        t: Scale-normalized translations ``[B, N, 3]`` (frame 0 exactly zero)
        scale: Per-clip scale factor ``[B]``
        static: Clips whose predicted camera did not move
        camera_feature: Per-frame camera feature ``[B*N, D]``
        fused: ``F4`` plus the broadcast camera feature, ``[B*N, L, D]``
    """

    q: Tensor
    t: Tensor
    scale: Tensor
    static: np.ndarray
    camera_feature: Tensor
    fused: Tensor


# ----------------------------------------------------------------------
# Quaternion algebra on tensors (components on the last axis)
# ----------------------------------------------------------------------
def _split4(q: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    return q[..., 0:1], q[..., 1:2], q[..., 2:3], q[..., 3:4]


def _split3(v: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    return v[..., 0:1], v[..., 1:2], v[..., 2:3]


def quat_conjugate(q: Tensor) -> Tensor:
    return q * Tensor(np.array([1.0, -1.0, -1.0, -1.0]), dtype=q.dtype)


def quat_multiply(a: Tensor, b: Tensor) -> Tensor:
    aw, ax, ay, az = _split4(a)
    bw, bx, by, bz = _split4(b)
    return T.concatenate(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def _cross(a: Tensor, b: Tensor) -> Tensor:
    ax, ay, az = _split3(a)
    bx, by, bz = _split3(b)
    return T.concatenate([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=-1)


def quat_rotate(q: Tensor, v: Tensor) -> Tensor:
    """Rotate vectors ``v [..., 3]`` by unit quaternions ``q [..., 4]``."""
    w = q[..., 0:1]
    u = q[..., 1:4]
    uv = _cross(u, v)
    return v + uv * (w * 2.0) + _cross(u, uv) * 2.0


def normalize_quat(q: Tensor) -> Tensor:
    """Unit-normalize and flip to the canonical hemisphere (the flip is a constant sign)."""
    norm = T.sqrt(T.tensor_sum(q * q, axis=-1, keepdims=True) + _NORM_EPS)
    unit = q / norm
    return unit * Tensor(hemisphere_sign(unit.data), dtype=q.dtype)


def canonicalize_poses(q: Tensor, t: Tensor) -> tuple[Tensor, Tensor, Tensor, np.ndarray]:
    """Differentiable counterpart of :func:`geometry.canonicalize` for ``[B, N, *]`` poses.

    Returns:
        ``(q_canon, t_normalized, scale [B], static [B])``
    """
    b, n = q.shape[:2]
    q0 = q[:, 0:1, :]
    t0 = t[:, 0:1, :]
    q0_inv = quat_conjugate(q0)
    q_rel = normalize_quat(quat_multiply(T.broadcast_to(q0_inv, q.shape), q))
    t_rel = quat_rotate(T.broadcast_to(q0_inv, q.shape), t - t0)

    identity = Tensor(np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (b, 1, 1)), dtype=q.dtype)
    zeros = Tensor(np.zeros((b, 1, 3)), dtype=t.dtype)
    if n > 1:
        q_rel = T.concatenate([identity, q_rel[:, 1:, :]], axis=1)
        t_rel = T.concatenate([zeros, t_rel[:, 1:, :]], axis=1)
        norms = T.sqrt(T.tensor_sum(t_rel[:, 1:, :] * t_rel[:, 1:, :], axis=-1) + _NORM_EPS)
        scale = T.tensor_sum(norms, axis=1) * (1.0 / n)
        # measured without the sqrt epsilon
        raw = np.linalg.norm(t_rel.data[:, 1:, :].astype(np.float64), axis=-1).sum(axis=1) / n
    else:
        q_rel, t_rel = identity, zeros
        scale = Tensor(np.zeros(b), dtype=t.dtype)
        raw = np.zeros(b)
    static = raw < STATIC_SCALE_EPS
    if static.any():
        keep = Tensor(np.where(static, 0.0, 1.0), dtype=t.dtype)
        scale = scale * keep + Tensor(np.where(static, 1.0, 0.0), dtype=t.dtype)
    t_norm = t_rel / T.reshape(scale, (b, 1, 1))
    return q_rel, t_norm, scale, static


class PoseEncoder(Module):
    """Encode ``(Q, T_hat, Z)`` per frame into a ``dim``-wide camera feature."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.rotation = MLP(4, dim, dim, rng)
        self.translation = MLP(3, dim, dim, rng)
        self.scale = MLP(1, dim, dim, rng)
        self.project = Linear(3 * dim, dim, rng)

    def forward(self, q: Tensor, t: Tensor, z: Tensor) -> Tensor:
        if np.any(z.data <= 0):
            raise ContractError(f"Scale factor must be positive, got min {float(z.data.min())}")
        parts = [self.rotation(q), self.translation(t), self.scale(T.log(z))]
        return self.project(T.concatenate(parts, axis=-1))


class GeometryEmbedding(Module):
    """Camera-token transformer, pose head, pose encoder and feature fusion.

    Args:
        dim: Token width D of the deepest encoder features
        num_layers: Attention layers, alternating frame-local and global
        heads: Attention heads per layer
        rng: Initialization generator
        mlp_ratio: Hidden-width multiplier of the transformer MLPs
    """

    def __init__(
        self,
        dim: int,
        num_layers: int,
        heads: int,
        rng: np.random.Generator,
        mlp_ratio: float = 2.0,
    ):
        self.dim = dim
        self.camera_token = Parameter(trunc_normal(rng, (1, 1, dim)))
        self.blocks = [
            TransformerBlock(dim, heads, dim // heads, rng, mlp_ratio) for _ in range(num_layers)
        ]
        self.norm = LayerNorm(dim)
        self.pose_head = Linear(dim, 7, rng, zero_init=True)
        self.encoder = PoseEncoder(dim, rng)
        self.fuse = Linear(dim, dim, rng)

    def predict_raw(self, features: Tensor, num_frames: int) -> tuple[Tensor, Tensor]:
        """Run the camera token through the transformer and the pose head.

        Returns:
            ``(q [B, N, 4] unit, t [B, N, 3])`` in the network's own frame
        """
        bn, length, dim = features.shape
        b = bn // num_frames
        tokens = T.concatenate(
            [T.broadcast_to(self.camera_token, (bn, 1, dim)), features], axis=1
        )
        for i, block in enumerate(self.blocks):
            if i % 2 == 0:
                tokens = block(tokens)
            else:
                clip = T.reshape(tokens, (b, num_frames * (length + 1), dim))
                tokens = T.reshape(block(clip), (bn, length + 1, dim))
        refined = self.norm(tokens[:, 0, :])
        raw = self.pose_head(refined)
        offset = Tensor(np.array([1.0, 0.0, 0.0, 0.0]), dtype=raw.dtype)
        q = normalize_quat(raw[:, 0:4] + offset)
        t = raw[:, 4:7]
        return T.reshape(q, (b, num_frames, 4)), T.reshape(t, (b, num_frames, 3))

    def forward(
        self,
        features: Tensor,
        num_frames: int,
        pose_noise: float = 0.0,
        rng: np.random.Generator | None = None,
    ) -> GEMOutput:
        """Predict canonical poses and fuse the camera feature into ``features``.

        Args:
            features: Deepest encoder features ``F4``, shape ``[B*N, L, D]``
            num_frames: Clip length N
            pose_noise: Relative noise applied to the canonical poses before encoding
            rng: Generator for the pose noise
        """
        if features.ndim != 3 or features.shape[-1] != self.dim:
            raise ShapeError(
                f"GEM expects [B*N, L, {self.dim}] features, got shape {features.shape}"
            )
        if num_frames < 1 or features.shape[0] % num_frames != 0:
            raise ContractError(
                f"Leading dimension {features.shape[0]} is not a multiple "
                f"of clip length {num_frames}"
            )
        bn, length, _ = features.shape
        b = bn // num_frames
        q_raw, t_raw = self.predict_raw(features, num_frames)
        q, t, scale, static = canonicalize_poses(q_raw, t_raw)

        q_enc, t_enc = q, t
        if pose_noise > 0:
            q_enc, t_enc = perturb_poses(q, t, pose_noise, rng)
        z = T.reshape(T.broadcast_to(T.reshape(scale, (b, 1)), (b, num_frames)), (bn, 1))
        camera_feature = self.encoder(
            T.reshape(q_enc, (bn, 4)), T.reshape(t_enc, (bn, 3)), z
        )
        delta = T.reshape(self.fuse(camera_feature), (bn, 1, self.dim))
        fused = features + delta
        return GEMOutput(q, t, scale, static, camera_feature, fused)


def perturb_poses(
    q: Tensor, t: Tensor, rate: float, rng: np.random.Generator | None
) -> tuple[Tensor, Tensor]:
    """Add Gaussian noise scaled to each component's magnitude; frame 0 is left alone."""
    if rng is None:
        raise ContractError("pose noise needs an explicit random generator")
    qn = q.data.astype(np.float64).copy()
    tn = t.data.astype(np.float64).copy()
    qn[:, 1:] += rate * np.abs(qn[:, 1:]) * rng.standard_normal(qn[:, 1:].shape)
    tn[:, 1:] += rate * np.abs(tn[:, 1:]) * rng.standard_normal(tn[:, 1:].shape)
    qn /= np.linalg.norm(qn, axis=-1, keepdims=True)
    qn *= hemisphere_sign(qn)
    logger.debug("perturbed poses with relative noise %.3f", rate)
    return Tensor(qn, dtype=q.dtype), Tensor(tn, dtype=t.dtype)
