"""Procedural video clips with exact depth, intrinsics and camera poses.

Each frame is ray-cast against analytic primitives (planes, spheres and
axis-aligned boxes). Camera rays are generated with unit z component in the
camera frame, so the ray parameter at a hit is the z-depth directly.
Surfaces are shaded Lambertian with a world-space checker texture, so the
appearance of a surface point does not change between frames.

World coordinates are the frame-0 camera frame: ``+z`` forward, ``y`` down.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from tqdm import tqdm

from src.videodepth.config import PrimitiveSpec, SceneSpec
from src.videodepth.errors import (
    CheckpointError,
    ContractError,
    DegenerateInputError,
    GenerationError,
)
from src.videodepth.geometry import (
    Intrinsics,
    Pose,
    canonicalize,
    look_at,
    read_pose_manifest,
    write_pose_manifest,
)
from src.videodepth.metrics import tae, warp_absrel
from src.videodepth.serialization import read_tensor, write_tensor

logger = logging.getLogger(__name__)

# Sky is truncated at 400 m; scene units are decimetres.
SKY_DEPTH_METERS = 400.0
SCENE_UNITS_PER_METER = 0.1
SKY_DEPTH = SKY_DEPTH_METERS * SCENE_UNITS_PER_METER
MIN_DEPTH = 0.1
PIVOT_DISTANCE = 5.0
BACK_WALL_DEPTH = 12.0
FLOOR_HEIGHT = 1.5
AUDIT_THRESHOLD = 0.02

# Height:width ratios of the training crops, widest first.
CROP_RATIOS = (1.0, 392 / 518, 336 / 518, 294 / 518, 252 / 518, 168 / 518)

_LIGHT = np.array([-0.3, -0.8, -0.5]) / np.linalg.norm([-0.3, -0.8, -0.5])
_AMBIENT = 0.3
_SKY_COLOR = np.array([0.55, 0.7, 0.9])
_RAY_EPS = 1e-6


@dataclass(eq=False)
class VideoClip:
    """One generated clip.

    Attributes:
        images: ``[N, 3, H, W]`` float32 in [0, 1]
        depth: ``[N, H, W]`` z-depth in scene units (sky at ``SKY_DEPTH``)
        disp: ``[N, H, W]`` disparity min-max normalized to [0, 1] per clip
        mask: ``[N, H, W]`` pixels that hit real geometry
        sky: ``[N, H, W]`` pixels that escaped to the sky
        intrinsics: One :class:`Intrinsics` per frame
        poses: Canonical camera-to-world poses (frame 0 identity, unit mean
            translation norm unless static)
        pose_scale: Scale factor that was divided out of the translations
        static: Camera did not translate
        disp_min: Disparity range used for normalization
        disp_max: Disparity range used for normalization
        spec: Scene description the clip was generated from
        clip_id: Index within its dataset
    """

    images: np.ndarray
    depth: np.ndarray
    disp: np.ndarray
    mask: np.ndarray
    sky: np.ndarray
    intrinsics: list[Intrinsics]
    poses: list[Pose]
    pose_scale: float
    static: bool
    disp_min: float
    disp_max: float
    spec: SceneSpec | None = None
    clip_id: int = 0

    @property
    def num_frames(self) -> int:
        return int(self.depth.shape[0])

    @property
    def resolution(self) -> tuple[int, int]:
        """``(height, width)``."""
        return int(self.depth.shape[1]), int(self.depth.shape[2])

    def metric_poses(self) -> list[Pose]:
        """Canonical poses with translations back in scene units."""
        return [Pose(p.q, p.t * self.pose_scale) for p in self.poses]

    def pose_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """``(q [N, 4], t [N, 3])`` of the canonical poses."""
        return np.stack([p.q for p in self.poses]), np.stack([p.t for p in self.poses])


# ----------------------------------------------------------------------
# Scene layout
# ----------------------------------------------------------------------
def random_layout(spec: SceneSpec, rng: np.random.Generator) -> list[PrimitiveSpec]:
    """Floor, optional back wall and a few spheres and boxes around the pivot."""
    prims = [
        PrimitiveSpec(
            "plane", (0.0, FLOOR_HEIGHT, 0.0), normal=(0.0, -1.0, 0.0), texture=0.6, albedo=0.6
        )
    ]
    if spec.back_wall and not spec.sky:
        prims.append(
            PrimitiveSpec(
                "plane",
                (0.0, 0.0, BACK_WALL_DEPTH),
                normal=(0.0, 0.0, -1.0),
                texture=1.0,
                albedo=0.8,
            )
        )
    for _ in range(spec.num_random_primitives):
        center = (
            float(rng.uniform(-1.6, 1.6)),
            float(rng.uniform(-0.6, FLOOR_HEIGHT - 0.3)),
            float(rng.uniform(3.5, 8.0)),
        )
        texture = float(rng.uniform(0.2, 0.6))
        albedo = float(rng.uniform(0.4, 1.0))
        if rng.random() < 0.5:
            radius = float(rng.uniform(0.35, 0.9))
            prims.append(
                PrimitiveSpec("sphere", center, (radius,), texture=texture, albedo=albedo)
            )
        else:
            half = tuple(float(h) for h in rng.uniform(0.25, 0.7, size=3))
            prims.append(PrimitiveSpec("box", center, half, texture=texture, albedo=albedo))
    return prims


def _tints(count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed + 7919)
    return rng.uniform(0.5, 1.0, size=(count, 3))


# ----------------------------------------------------------------------
# Trajectories
# ----------------------------------------------------------------------
def trajectory(spec: SceneSpec, rng: np.random.Generator) -> list[Pose]:
    """Camera-to-world poses; frame 0 sits at the origin looking down ``+z``."""
    n = spec.num_frames
    s = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    pivot = np.array([0.0, 0.0, PIVOT_DISTANCE])
    try:
        if spec.trajectory == "orbit":
            angles = s * spec.motion / PIVOT_DISTANCE
            eyes = [pivot + PIVOT_DISTANCE * np.array([np.sin(a), 0.0, -np.cos(a)]) for a in angles]
            return [look_at(eye, pivot) for eye in eyes]
        if spec.trajectory == "dolly":
            identity = np.array([1.0, 0.0, 0.0, 0.0])
            return [Pose(identity, np.array([0.0, 0.0, spec.motion * v])) for v in s]
        if spec.trajectory == "rotate-in-place":
            yaw = s * spec.motion
            return [look_at(np.zeros(3), np.array([np.sin(a), 0.0, np.cos(a)])) for a in yaw]
        # random-smooth: sums of low-frequency sinusoids, shifted so frame 0 is at the origin
        freq = rng.uniform(0.5, 1.5, size=(2, 3))
        phase = rng.uniform(0, 2 * np.pi, size=(2, 3))
        amp = rng.uniform(0.5, 1.0, size=(2, 3)) * np.array([1.0, 0.4, 1.0])

        def wave(k: int, v: float) -> np.ndarray:
            return amp[k] * (np.sin(2 * np.pi * freq[k] * v + phase[k]) - np.sin(phase[k]))

        eyes = [spec.motion * wave(0, v) for v in s]
        targets = [pivot + 0.5 * spec.motion * wave(1, v) for v in s]
        return [look_at(e, t) for e, t in zip(eyes, targets, strict=True)]
    except DegenerateInputError as e:
        raise GenerationError(f"Degenerate {spec.trajectory} trajectory: {e}") from e


# ----------------------------------------------------------------------
# Ray casting
# ----------------------------------------------------------------------
def camera_rays(K: Intrinsics) -> np.ndarray:
    """Camera-frame ray directions ``[H, W, 3]`` with unit z component."""
    v, u = np.meshgrid(
        np.arange(K.height, dtype=np.float64), np.arange(K.width, dtype=np.float64), indexing="ij"
    )
    return np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)


def intersect(
    prim: PrimitiveSpec, origin: np.ndarray, dirs: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Nearest positive hit parameter per ray (inf on a miss) and the surface normal."""
    c = np.asarray(prim.center)
    lam = np.full(len(dirs), np.inf)
    normals = np.zeros_like(dirs)
    with np.errstate(divide="ignore", invalid="ignore"):
        if prim.kind == "plane":
            n = np.asarray(prim.normal) / np.linalg.norm(prim.normal)
            denom = dirs @ n
            hit = np.abs(denom) > 1e-12
            t = np.where(hit, ((c - origin) @ n) / np.where(hit, denom, 1.0), np.inf)
            lam = np.where(t > _RAY_EPS, t, np.inf)
            normals[:] = n
            normals[denom > 0] = -n
        elif prim.kind == "sphere":
            r = prim.size[0]
            oc = origin - c
            a = np.einsum("ij,ij->i", dirs, dirs)
            b = 2.0 * dirs @ oc
            cc = oc @ oc - r * r
            disc = b * b - 4 * a * cc
            root = np.sqrt(np.maximum(disc, 0.0))
            near = (-b - root) / (2 * a)
            far = (-b + root) / (2 * a)
            t = np.where(near > _RAY_EPS, near, far)
            lam = np.where((disc >= 0) & (t > _RAY_EPS), t, np.inf)
            pts = origin + dirs * np.where(np.isfinite(lam), lam, 0.0)[:, None]
            normals = (pts - c) / r
        else:
            half = np.asarray(prim.size)
            t1 = (c - half - origin) / dirs
            t2 = (c + half - origin) / dirs
            lo = np.minimum(t1, t2)
            hi = np.maximum(t1, t2)
            # rays parallel to a slab: inside it or a miss
            inside = (origin >= c - half) & (origin <= c + half)
            lo = np.where(np.isnan(lo), np.where(inside, -np.inf, np.inf), lo)
            hi = np.where(np.isnan(hi), np.where(inside, np.inf, -np.inf), hi)
            t_near = lo.max(axis=1)
            t_far = hi.min(axis=1)
            t = np.where(t_near > _RAY_EPS, t_near, t_far)
            lam = np.where((t_far >= t_near) & (t > _RAY_EPS), t, np.inf)
            axis = np.argmax(lo, axis=1)
            rows = np.arange(len(dirs))
            normals[rows, axis] = -np.sign(dirs[rows, axis])
    return lam, normals


def _checker(points: np.ndarray, period: float) -> np.ndarray:
    cells = np.floor(points / period + 0.5013).astype(np.int64).sum(axis=1)
    return 0.65 + 0.35 * (cells % 2)


def render_frame(
    prims: Sequence[PrimitiveSpec],
    tints: np.ndarray,
    pose: Pose,
    K: Intrinsics,
    sky: bool,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ray-cast one view.

    Returns:
        ``(image [3, H, W], depth [H, W], sky_mask [H, W])``
    """
    h, w = K.height, K.width
    dirs = pose.rotation @ camera_rays(K).reshape(-1, 3).T
    dirs = dirs.T
    origin = pose.t
    depth = np.full(len(dirs), np.inf)
    normals = np.zeros_like(dirs)
    owner = np.full(len(dirs), -1)
    for i, prim in enumerate(prims):
        lam, nrm = intersect(prim, origin, dirs)
        closer = lam < depth
        depth[closer] = lam[closer]
        normals[closer] = nrm[closer]
        owner[closer] = i
    missed = ~np.isfinite(depth)
    if sky:
        missed |= depth > SKY_DEPTH
    if missed.any() and not sky:
        raise GenerationError(
            f"{int(missed.sum())} rays escape the scene; enable sky or add a back wall"
        )
    image = np.tile(_SKY_COLOR, (len(dirs), 1))
    hit = ~missed
    if hit.any():
        points = origin + dirs[hit] * depth[hit, None]
        shade = _AMBIENT + (1 - _AMBIENT) * np.clip(normals[hit] @ -_LIGHT, 0.0, 1.0)
        texture = np.empty(int(hit.sum()))
        albedo = np.empty(int(hit.sum()))
        ids = owner[hit]
        for i, prim in enumerate(prims):
            sel = ids == i
            texture[sel] = _checker(points[sel], prim.texture)
            albedo[sel] = prim.albedo
        image[hit] = (albedo * shade * texture)[:, None] * tints[ids]
    depth[missed] = SKY_DEPTH
    if depth.min() <= MIN_DEPTH:
        raise GenerationError(f"Camera too close to geometry: min depth {depth.min():.3f}")
    return (
        np.clip(image, 0.0, 1.0).reshape(h, w, 3).transpose(2, 0, 1),
        depth.reshape(h, w),
        missed.reshape(h, w),
    )


# ----------------------------------------------------------------------
# Disparity normalization
# ----------------------------------------------------------------------
def preprocess(
    depth: np.ndarray, mask: np.ndarray | None = None
) -> tuple[np.ndarray, float, float]:
    """Depth to disparity ``1/d``, min-max normalized to [0, 1] over ``mask``.

    A zero disparity range maps every pixel to 0.

    Returns:
        ``(disp_norm, disp_min, disp_max)``
    """
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.ones(depth.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ContractError("preprocess: empty validity mask")
    if np.any(depth[mask] <= 0):
        raise ContractError("preprocess: depth must be positive on the valid mask")
    disp = np.where(mask, 1.0 / np.where(mask, depth, 1.0), 0.0)
    lo = float(disp[mask].min())
    hi = float(disp[mask].max())
    if hi - lo <= 0:
        return np.zeros_like(disp), lo, hi
    return np.where(mask, (disp - lo) / (hi - lo), 0.0), lo, hi


def postprocess(disp_norm: np.ndarray, disp_min: float, disp_max: float) -> np.ndarray:
    """Invert :func:`preprocess` given the stored disparity range."""
    disp = np.asarray(disp_norm, dtype=np.float64) * (disp_max - disp_min) + disp_min
    if np.any(disp <= 0):
        raise ContractError("postprocess: nonpositive disparity")
    return 1.0 / disp


# ----------------------------------------------------------------------
# Generation
# ----------------------------------------------------------------------
def _assemble(
    images: np.ndarray,
    depth: np.ndarray,
    sky: np.ndarray,
    intrinsics: list[Intrinsics],
    poses: list[Pose],
    pose_scale: float,
    static: bool,
    spec: SceneSpec | None,
    clip_id: int,
) -> VideoClip:
    disp, lo, hi = preprocess(depth)
    return VideoClip(
        images=images.astype(np.float32),
        depth=depth.astype(np.float32),
        disp=disp.astype(np.float32),
        mask=~sky,
        sky=sky,
        intrinsics=intrinsics,
        poses=poses,
        pose_scale=pose_scale,
        static=static,
        disp_min=lo,
        disp_max=hi,
        spec=spec,
        clip_id=clip_id,
    )


def _render_views(
    spec: SceneSpec, intrinsics: Sequence[Intrinsics] | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[Pose]]:
    """Images, depth and sky masks of every frame, plus the world poses.

    ``intrinsics`` (one per frame) overrides the centered camera of ``spec``.
    """
    rng = np.random.default_rng(spec.seed)
    prims = list(spec.primitives) or random_layout(spec, rng)
    if not prims:
        raise GenerationError("Scene has no primitives")
    tints = _tints(len(prims), spec.seed)
    world_poses = trajectory(spec, rng)
    if intrinsics is None:
        K = Intrinsics.centered(spec.width, spec.height, spec.fov_deg)
        intrinsics = [K] * len(world_poses)
    frames = [
        render_frame(prims, tints, pose, K, spec.sky)
        for pose, K in zip(world_poses, intrinsics, strict=True)
    ]
    images = np.stack([f[0] for f in frames])
    depth = np.stack([f[1] for f in frames])
    sky = np.stack([f[2] for f in frames])
    return images, depth, sky, world_poses


def generate(spec: SceneSpec, clip_id: int = 0) -> VideoClip:
    """Render a clip; the result depends only on ``spec``."""
    K = Intrinsics.centered(spec.width, spec.height, spec.fov_deg)
    images, depth, sky, world_poses = _render_views(spec)
    if sky.all():
        raise GenerationError("Every ray escaped to the sky")
    canonical = canonicalize(world_poses)
    return _assemble(
        images, depth, sky, [K] * spec.num_frames, canonical.poses, canonical.scale,
        canonical.static, spec, clip_id,
    )


# ----------------------------------------------------------------------
# Multi-resolution crops
# ----------------------------------------------------------------------
def multires_targets(short_edge: int = 64, multiple: int = 8) -> list[tuple[int, int]]:
    """``(height, width)`` crop sizes for every ratio, rounded to ``multiple``."""
    targets = []
    for ratio in CROP_RATIOS:
        h = max(multiple, int(round(short_edge * ratio / multiple)) * multiple)
        targets.append((min(h, short_edge), short_edge))
    return targets


def _resize_nearest(array: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = array.shape[-2:]
    rows = np.clip(np.floor((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), 0, h - 1)
    cols = np.clip(np.floor((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), 0, w - 1)
    return array[..., rows[:, None], cols[None, :]]


def multires_crop(clip: VideoClip, target: tuple[int, int], short_edge: int = 64) -> VideoClip:
    """Resize the shorter edge to ``short_edge`` and center-crop to ``target``.

    Shrinking resamples images and depth nearest-neighbour. Enlarging
    re-renders the scene from ``clip.spec`` at the new resolution, since
    repeated pixels would carry the depth of a neighbouring ray. Intrinsics
    follow the resize and the crop offset.

    Raises:
        ContractError: If the crop does not fit, or an enlarged clip has no spec
    """
    th, tw = target
    h, w = clip.resolution
    factor = short_edge / min(h, w)
    rh, rw = int(round(h * factor)), int(round(w * factor))
    if th > rh or tw > rw or th < 1 or tw < 1:
        raise ContractError(f"Cannot crop {th}x{tw} out of a {rh}x{rw} frame")
    top, left = (rh - th) // 2, (rw - tw) // 2
    resized = (rh, rw) != (h, w)
    scaled = [K.scaled(factor) if resized else K for K in clip.intrinsics]

    images, depth, sky = clip.images, clip.depth.astype(np.float64), clip.sky
    if rh > h or rw > w:
        if clip.spec is None:
            raise ContractError(
                f"Enlarging a {h}x{w} clip to {rh}x{rw} needs its scene spec to re-render"
            )
        images, depth, sky, _ = _render_views(clip.spec, scaled)
    elif resized:
        images, depth, sky = (_resize_nearest(a, rh, rw) for a in (images, depth, sky))

    def cut(a: np.ndarray) -> np.ndarray:
        return a[..., top : top + th, left : left + tw]

    intrinsics = [K.cropped(left, top, tw, th) for K in scaled]
    return _assemble(
        cut(images), cut(depth), cut(sky), intrinsics,
        clip.poses, clip.pose_scale, clip.static, clip.spec, clip.clip_id,
    )


def random_multires_crop(
    clip: VideoClip, rng: np.random.Generator, short_edge: int = 64, multiple: int = 8
) -> VideoClip:
    targets = multires_targets(short_edge, multiple)
    return multires_crop(clip, targets[int(rng.integers(len(targets)))], short_edge)


# ----------------------------------------------------------------------
# Audit
# ----------------------------------------------------------------------
def audit_clip(clip: VideoClip, threshold: float = AUDIT_THRESHOLD) -> float:
    """Warp-consistency of ground-truth depth under ground-truth poses.

    Returns the TAE of the clip (a pairwise mean for 2-frame clips, 0 for
    single frames) and raises :class:`GenerationError` above ``threshold``.
    """
    n = clip.num_frames
    if n < 2:
        return 0.0
    depth = clip.depth.astype(np.float64)
    poses = clip.metric_poses()
    K = clip.intrinsics[0]
    if n == 2:
        terms = [
            warp_absrel(
                depth[a], depth[b], poses[a], poses[b], K, clip.mask[a], clip.mask[b]
            )
            for a, b in ((0, 1), (1, 0))
        ]
        value = float(np.mean([v for v in terms if v is not None] or [0.0]))
    else:
        value = tae(depth, poses, K, clip.mask)
    if value >= threshold:
        raise GenerationError(
            f"Clip {clip.clip_id} fails the warp audit: TAE {value:.4f} >= {threshold}"
        )
    return value


# ----------------------------------------------------------------------
# Storage
# ----------------------------------------------------------------------
def clip_dir(root: str | Path, clip_id: int) -> Path:
    return Path(root) / f"clip_{clip_id:05d}"


def save_clip(clip: VideoClip, root: str | Path) -> Path:
    """Write ``clip_<id>/`` with GEMT tensors, the pose manifest and meta."""
    path = clip_dir(root, clip.clip_id)
    path.mkdir(parents=True, exist_ok=True)
    write_tensor(path / "images.gemt", clip.images)
    write_tensor(path / "depth.gemt", clip.depth)
    write_tensor(path / "disp.gemt", clip.disp)
    write_tensor(path / "mask.gemt", clip.mask.astype(np.float32))
    write_tensor(path / "sky.gemt", clip.sky.astype(np.float32))
    write_pose_manifest(path / "poses.txt", clip.poses, clip.intrinsics)
    meta = {
        "clip_id": clip.clip_id,
        "seed": clip.spec.seed if clip.spec is not None else None,
        "spec": clip.spec.to_dict() if clip.spec is not None else None,
        "disp_min": clip.disp_min,
        "disp_max": clip.disp_max,
        "pose_scale": clip.pose_scale,
        "static": clip.static,
    }
    (path / "meta.txt").write_text(json.dumps(meta, indent=2))
    return path


def load_clip(path: str | Path, with_poses: bool = True) -> VideoClip:
    """Read a clip directory; ``with_poses=False`` never opens the pose manifest."""
    path = Path(path)
    meta_path = path / "meta.txt"
    if not meta_path.exists():
        raise CheckpointError(f"Not a clip directory (no meta.txt): {path}")
    try:
        meta = json.loads(meta_path.read_text())
        spec = SceneSpec.from_dict(meta["spec"]) if meta.get("spec") else None
        clip_id, lo, hi = int(meta["clip_id"]), float(meta["disp_min"]), float(meta["disp_max"])
        scale, static = float(meta["pose_scale"]), bool(meta["static"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{meta_path}: malformed clip meta ({e})") from e
    poses, intrinsics = read_pose_manifest(path / "poses.txt") if with_poses else ([], [])
    return VideoClip(
        images=read_tensor(path / "images.gemt"),
        depth=read_tensor(path / "depth.gemt"),
        disp=read_tensor(path / "disp.gemt"),
        mask=read_tensor(path / "mask.gemt") > 0.5,
        sky=read_tensor(path / "sky.gemt") > 0.5,
        intrinsics=intrinsics,
        poses=poses,
        pose_scale=scale,
        static=static,
        disp_min=lo,
        disp_max=hi,
        spec=spec,
        clip_id=clip_id,
    )


def list_clips(root: str | Path) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise CheckpointError(f"Data directory not found: {root}")
    return sorted(p for p in root.glob("clip_*") if p.is_dir())


def load_clips(root: str | Path, max_clips: int = 0, with_poses: bool = True) -> list[VideoClip]:
    """Load every clip under ``root`` in clip-id order."""
    paths = list_clips(root)
    if max_clips:
        paths = paths[:max_clips]
    if not paths:
        raise CheckpointError(f"No clips found under {root}")
    return [load_clip(p, with_poses) for p in paths]


def generate_dataset(
    spec: SceneSpec, out: str | Path, count: int, audit: bool = True, progress: bool = True
) -> list[Path]:
    """Generate ``count`` clips with seeds ``spec.seed + i``, audit, and write them."""
    if count < 1:
        raise ContractError(f"count must be >= 1, got {count}")
    paths = []
    for i in tqdm(range(count), desc="Generating clips", disable=not progress):
        clip = generate(replace(spec, seed=spec.seed + i), clip_id=i)
        if audit:
            value = audit_clip(clip)
            logger.debug("clip %d audit TAE %.5f", i, value)
        paths.append(save_clip(clip, out))
    return paths


# ----------------------------------------------------------------------
# Batching
# ----------------------------------------------------------------------
@dataclass
class ClipBatch:
    """Stacked training inputs for B clips of equal shape.

    ``q`` and ``t`` are None when the batch was built without pose labels.
    """

    images: np.ndarray
    disp: np.ndarray
    mask: np.ndarray
    q: np.ndarray | None = None
    t: np.ndarray | None = None
    clip_ids: list[int] = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return int(self.images.shape[0])

    @property
    def has_poses(self) -> bool:
        return self.q is not None


def batch_clips(
    clips: Sequence[VideoClip], clip_len: int | None = None, with_poses: bool = True
) -> ClipBatch:
    """Stack clips, keeping the first ``clip_len`` frames of each.

    Truncated pose sequences are re-canonicalized so their scale factor
    matches the kept frames. The training mask covers geometry and sky.
    """
    if not clips:
        raise ContractError("batch_clips needs at least one clip")
    n = clip_len or clips[0].num_frames
    resolutions = {c.resolution for c in clips}
    if len(resolutions) != 1 or any(c.num_frames < n for c in clips):
        raise ContractError(
            f"Clips in a batch need equal resolution and at least {n} frames, got "
            f"{[(c.resolution, c.num_frames) for c in clips]}"
        )
    q = t = None
    if with_poses:
        qs, ts = [], []
        for c in clips:
            if len(c.poses) < n:
                raise ContractError(f"Clip {c.clip_id} was loaded without pose labels")
            poses = c.poses[:n]
            if n < c.num_frames:
                poses = canonicalize([Pose(p.q, p.t * c.pose_scale) for p in poses]).poses
            qs.append(np.stack([p.q for p in poses]))
            ts.append(np.stack([p.t for p in poses]))
        q, t = np.stack(qs), np.stack(ts)
    return ClipBatch(
        images=np.stack([c.images[:n] for c in clips]),
        disp=np.stack([c.disp[:n] for c in clips]),
        mask=np.stack([c.mask[:n] | c.sky[:n] for c in clips]),
        q=q,
        t=t,
        clip_ids=[c.clip_id for c in clips],
    )
