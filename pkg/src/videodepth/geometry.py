"""Quaternions, rigid poses, canonical-frame normalization and pinhole geometry.

Conventions used throughout the package:

* Quaternions are ``(w, x, y, z)``, unit length, with the first component
  above ``QUAT_SIGN_EPS`` positive (``w >= 0`` unless ``w`` is zero).
* A :class:`Pose` maps **camera coordinates to world coordinates**:
  ``X_world = R @ X_cam + t``. After canonicalization the world frame is the
  camera frame of frame 0.
* Cameras look along ``+z`` with ``x`` to the right and ``y`` down. Pixel
  ``(u, v)`` is column ``u``, row ``v``, and its ray passes through the pixel
  centre at integer coordinates.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from src.videodepth.errors import CheckpointError, ContractError, DegenerateInputError, ShapeError

logger = logging.getLogger(__name__)

STATIC_SCALE_EPS = 1e-8
QUAT_SIGN_EPS = 1e-6


# ----------------------------------------------------------------------
# Quaternions
# ----------------------------------------------------------------------
def hemisphere_sign(q: np.ndarray, eps: float = QUAT_SIGN_EPS) -> np.ndarray:
    """Sign (shape ``[..., 1]``) that makes the first component above ``eps`` positive.

    Components are scanned in ``(w, x, y, z)`` order, so q and -q always map to
    the same representative, including 180 degree rotations where ``w == 0``.
    """
    q = np.asarray(q)
    first = np.expand_dims(np.argmax(np.abs(q) > eps, axis=-1), -1)
    lead = np.take_along_axis(q, first, axis=-1)
    return np.where(lead < 0, -1.0, 1.0)


def normalize_quat(q: np.ndarray) -> np.ndarray:
    """Unit-normalize quaternion(s) and move them to the canonical hemisphere."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise DegenerateInputError("Cannot normalize a zero quaternion")
    q = q / norm
    return q * hemisphere_sign(q)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix for a ``(w, x, y, z)`` quaternion (renormalized first)."""
    w, x, y, z = normalize_quat(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(rot: np.ndarray) -> np.ndarray:
    """Quaternion for a rotation matrix (largest-diagonal branch selection)."""
    m = np.asarray(rot, dtype=np.float64)
    if m.shape != (3, 3):
        raise ShapeError(f"Rotation matrix must be 3x3, got shape {m.shape}")
    trace = np.trace(m)
    if trace > 0:
        s = 2.0 * np.sqrt(trace + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return normalize_quat(np.array(q))


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a * b``."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def random_quat(rng: np.random.Generator) -> np.ndarray:
    return normalize_quat(rng.standard_normal(4))


# ----------------------------------------------------------------------
# Poses
# ----------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid camera-to-world transform.

    Attributes:
        q: Unit quaternion (w, x, y, z) in the canonical hemisphere
        t: Translation 3-vector in scene units
    """

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        if t.shape != (3,):
            raise ShapeError(f"Pose translation must have 3 components, got shape {t.shape}")
        object.__setattr__(self, "q", normalize_quat(np.asarray(self.q).reshape(-1)))
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> Pose:
        m = np.asarray(matrix, dtype=np.float64)
        return cls(matrix_to_quat(m[:3, :3]), m[:3, 3])

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.t
        return out

    def compose(self, other: Pose) -> Pose:
        """``self ∘ other``: apply ``other`` first."""
        q = quat_multiply(self.q, other.q)
        return Pose(q, self.rotation @ other.t + self.t)

    def inverse(self) -> Pose:
        rot_t = self.rotation.T
        return Pose(quat_conjugate(self.q), -rot_t @ self.t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform ``[..., 3]`` points."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.t

    def allclose(self, other: Pose, atol: float = 1e-6) -> bool:
        return bool(
            np.allclose(self.q, other.q, atol=atol) and np.allclose(self.t, other.t, atol=atol)
        )

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.q, self.t])


def relative_pose(source: Pose, target: Pose) -> Pose:
    """Transform taking camera coordinates of ``source`` into those of ``target``."""
    return target.inverse().compose(source)


def scale_factor(translations: np.ndarray) -> float:
    """Mean translation norm over all frames."""
    translations = np.asarray(translations, dtype=np.float64).reshape(-1, 3)
    if len(translations) == 0:
        raise ContractError("scale_factor needs at least one translation")
    return float(np.linalg.norm(translations, axis=1).mean())


def normalize_translations(translations: np.ndarray) -> tuple[np.ndarray, float, bool]:
    """Divide translations by their scale factor.

    Returns:
        (normalized translations, Z, static flag). A near-zero ``Z`` is clamped
        to 1 and reported as static.
    """
    translations = np.asarray(translations, dtype=np.float64).reshape(-1, 3)
    z = scale_factor(translations)
    static = z < STATIC_SCALE_EPS
    if static:
        z = 1.0
    return translations / z, z, static


@dataclass(frozen=True, eq=False)
class CanonicalPoses:
    """Result of :func:`canonicalize`."""

    poses: list[Pose]
    scale: float
    static: bool

    def __iter__(self):
        return iter((self.poses, self.scale))


def canonicalize(poses: Sequence[Pose]) -> CanonicalPoses:
    """Express every pose relative to frame 0 and normalize translation scale.

    Frame 0 becomes the identity, translations are divided by
    ``Z = mean_i ||T_i||`` (taken over all frames of the relativized
    trajectory). A static camera (``Z < 1e-8``) keeps ``Z = 1`` and sets the
    static flag.
    """
    if len(poses) == 0:
        raise ContractError("canonicalize needs at least one pose")
    anchor_inv = poses[0].inverse()
    relative = [anchor_inv.compose(p) for p in poses]
    normalized, z, static = normalize_translations(np.stack([p.t for p in relative]))
    out = [Pose.identity()]
    out.extend(Pose(p.q, t) for p, t in zip(relative[1:], normalized[1:], strict=True))
    if static:
        logger.debug("canonicalize: static camera, scale clamped to 1")
    return CanonicalPoses(out, z, static)


def look_at(eye: np.ndarray, target: np.ndarray, up: np.ndarray = (0.0, -1.0, 0.0)) -> Pose:
    """Camera-to-world pose at ``eye`` looking at ``target`` (``+z`` forward, ``y`` down)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    if np.linalg.norm(forward) < 1e-12:
        raise DegenerateInputError("look_at: eye and target coincide")
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-12:
        raise DegenerateInputError("look_at: up vector parallel to viewing direction")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return Pose(matrix_to_quat(np.stack([right, down, forward], axis=1)), eye)


# ----------------------------------------------------------------------
# Cameras and point clouds
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ContractError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ContractError(
                f"Principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @classmethod
    def centered(cls, width: int, height: int, fov_deg: float = 60.0) -> Intrinsics:
        f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def scaled(self, factor: float) -> Intrinsics:
        """Intrinsics after resizing the image by ``factor`` (pixel centres at integers)."""
        return Intrinsics(
            self.fx * factor,
            self.fy * factor,
            (self.cx + 0.5) * factor - 0.5,
            (self.cy + 0.5) * factor - 0.5,
            int(round(self.width * factor)),
            int(round(self.height * factor)),
        )

    def cropped(self, left: int, top: int, width: int, height: int) -> Intrinsics:
        return Intrinsics(self.fx, self.fy, self.cx - left, self.cy - top, width, height)

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, data: dict) -> Intrinsics:
        return cls(
            float(data["fx"]),
            float(data["fy"]),
            float(data["cx"]),
            float(data["cy"]),
            int(data["width"]),
            int(data["height"]),
        )


@dataclass(eq=False)
class PointCloud:
    """``K`` points with per-point validity flags."""

    points: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.valid = np.asarray(self.valid, dtype=bool).reshape(-1)
        if len(self.points) != len(self.valid):
            raise ShapeError(
                f"PointCloud has {len(self.points)} points but {len(self.valid)} validity flags"
            )
        if not np.all(np.isfinite(self.points[self.valid])):
            raise ContractError("PointCloud contains non-finite valid points")

    @classmethod
    def from_points(cls, points: np.ndarray) -> PointCloud:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return cls(points, np.ones(len(points), dtype=bool))

    @property
    def valid_points(self) -> np.ndarray:
        return self.points[self.valid]

    def __len__(self) -> int:
        return int(self.valid.sum())


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer pixel coordinates ``(u, v)``, each shaped ``[H, W]``."""
    v, u = np.meshgrid(
        np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij"
    )
    return u, v


def camera_points(depth: np.ndarray, K: Intrinsics) -> np.ndarray:
    """Camera-frame points ``[H, W, 3]`` for a depth map."""
    depth = np.asarray(depth, dtype=np.float64)
    u, v = pixel_grid(*depth.shape)
    return np.stack([(u - K.cx) * depth / K.fx, (v - K.cy) * depth / K.fy, depth], axis=-1)


def backproject(
    depth: np.ndarray, K: Intrinsics, pose: Pose, mask: np.ndarray | None = None
) -> PointCloud:
    """Lift every pixel with positive depth into world coordinates."""
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.isfinite(depth) & (depth > 0)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    safe = np.where(valid, depth, 0.0)
    world = pose.apply(camera_points(safe, K).reshape(-1, 3))
    return PointCloud(world, valid.reshape(-1))


def project(points: np.ndarray, K: Intrinsics) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project camera-frame points; returns ``(u, v, z)`` with NaN where ``z <= 0``."""
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        safe_z = np.where(z > 0, z, np.nan)
        u = K.fx * points[..., 0] / safe_z + K.cx
        v = K.fy * points[..., 1] / safe_z + K.cy
    return u, v, z


def warp_depth(
    depth_src: np.ndarray,
    pose_rel: Pose,
    K: Intrinsics,
    mask_src: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Forward-splat source depth into the target view.

    Args:
        depth_src: Source depth ``[H, W]``
        pose_rel: Source-camera to target-camera transform (see :func:`relative_pose`)
        K: Shared intrinsics
        mask_src: Optional validity mask for the source pixels

    Returns:
        ``(depth_warped, mask)``. Each source point lands on its nearest target
        pixel and the nearest depth wins; pixels nothing landed on are masked out.
    """
    depth_src = np.asarray(depth_src, dtype=np.float64)
    h, w = depth_src.shape
    valid = np.isfinite(depth_src) & (depth_src > 0)
    if mask_src is not None:
        valid &= np.asarray(mask_src, dtype=bool)
    pts = pose_rel.apply(camera_points(np.where(valid, depth_src, 0.0), K)[valid])
    u, v, z = project(pts, K)
    ui = np.rint(u)
    vi = np.rint(v)
    keep = (z > 0) & np.isfinite(ui) & (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
    flat = vi[keep].astype(np.int64) * w + ui[keep].astype(np.int64)
    buffer = np.full(h * w, np.inf)
    np.minimum.at(buffer, flat, z[keep])
    buffer = buffer.reshape(h, w)
    mask = np.isfinite(buffer)
    return np.where(mask, buffer, 0.0), mask


def umeyama_align(
    traj_pred: np.ndarray, traj_gt: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Similarity ``(s, R, t)`` minimizing ``sum ||s R p_i + t - g_i||^2``.

    The reflection case is handled by flipping the smallest singular direction.
    """
    pred = np.asarray(traj_pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(traj_gt, dtype=np.float64).reshape(-1, 3)
    if pred.shape != gt.shape:
        raise ShapeError(f"Trajectory shapes differ: {pred.shape} vs {gt.shape}")
    if len(pred) < 2:
        raise ContractError(f"Umeyama alignment needs at least 2 points, got {len(pred)}")
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    p0 = pred - mu_p
    g0 = gt - mu_g
    n = len(pred)
    cov = g0.T @ p0 / n
    sigma2 = (p0**2).sum() / n
    if sigma2 < 1e-24:
        raise DegenerateInputError("Umeyama alignment of a trajectory with no spread")
    u_svd, d_svd, vt_svd = np.linalg.svd(cov)
    s_fix = np.eye(3)
    if np.linalg.det(u_svd) * np.linalg.det(vt_svd) < 0:
        s_fix[2, 2] = -1.0
    rot = u_svd @ s_fix @ vt_svd
    scale = float(np.trace(np.diag(d_svd) @ s_fix) / sigma2)
    trans = mu_g - scale * rot @ mu_p
    return scale, rot, trans


# ----------------------------------------------------------------------
# Pose manifest (JSON Lines)
# ----------------------------------------------------------------------
def write_pose_manifest(path: str | Path, poses: Sequence[Pose], intrinsics: Sequence[Intrinsics]):
    """One JSON object per line: frame index, quaternion, translation, intrinsics."""
    if len(poses) != len(intrinsics):
        raise ContractError(f"{len(poses)} poses but {len(intrinsics)} intrinsics")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for i, (pose, K) in enumerate(zip(poses, intrinsics, strict=True)):
            record = {
                "frame": i,
                "q": [float(x) for x in pose.q],
                "t": [float(x) for x in pose.t],
                "intrinsics": K.to_dict(),
            }
            f.write(json.dumps(record) + "\n")


def read_pose_manifest(path: str | Path) -> tuple[list[Pose], list[Intrinsics]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Pose manifest not found: {path}")
    poses: list[Pose] = []
    intrinsics: list[Intrinsics] = []
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                if record["frame"] != len(poses):
                    raise ContractError(
                        f"frame index {record['frame']} out of order, expected {len(poses)}"
                    )
                poses.append(Pose(np.array(record["q"]), np.array(record["t"])))
                intrinsics.append(Intrinsics.from_dict(record["intrinsics"]))
            except (KeyError, TypeError, json.JSONDecodeError) as e:
                raise CheckpointError(f"{path}:{line_no}: malformed pose record ({e})") from e
    return poses, intrinsics
