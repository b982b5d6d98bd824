"""End-to-end depth network: patch encoder, GEM, spatio-temporal transformer,
multi-scale fusion decoder and a nonnegative disparity head.

Frames are folded into the batch axis for the encoder, so per-frame features
do not depend on the other frames in the clip. The spatio-temporal
transformer hooks in at one of three points:

* ``early``: on the fused deepest features, before the decoder consumes them;
* ``mid``: on the decoder path after the two deepest taps are merged;
* ``late``: on the final patch-grid map, just before upsampling and the head.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from src.videodepth import tensor as T
from src.videodepth.astt import AlternatingTransformer
from src.videodepth.config import ModelConfig
from src.videodepth.errors import ContractError, ShapeError
from src.videodepth.gem import GEMOutput, GeometryEmbedding
from src.videodepth.nn import MLP, LayerNorm, Linear, Module, TransformerBlock
from src.videodepth.tensor import Tensor

logger = logging.getLogger(__name__)


def sincos_position_embedding(grid: tuple[int, int], dim: int) -> np.ndarray:
    """Fixed 2-D sine/cosine embedding ``[h*w, dim]``; half the channels per axis."""
    h, w = grid
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter) / max(quarter, 1))
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    parts = []
    for coords in (rows.reshape(-1), cols.reshape(-1)):
        angles = np.outer(coords, omega)
        parts.extend([np.sin(angles), np.cos(angles)])
    emb = np.concatenate(parts, axis=1)
    if emb.shape[1] < dim:
        emb = np.pad(emb, ((0, 0), (0, dim - emb.shape[1])))
    return emb


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[F, C, H, W]`` frames to ``[F, L, C*p*p]`` patch vectors (row-major grid)."""
    f, c, h, w = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(f, c, gh, patch, gw, patch)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(f, gh * gw, c * patch * patch)


@dataclass
class ModelOutput:
    """Forward results for a batch of clips.

    Attributes:
        disparity: Nonnegative disparity ``[B, N, H, W]``
        q: Canonical predicted quaternions ``[B, N, 4]`` (None without GEM)
        t: Scale-normalized translations ``[B, N, 3]`` (None without GEM)
        scale: Per-clip scale factor ``[B]`` (None without GEM)
        gate: Per-clip pose-gate decisions used by the transformer
        taps: Encoder features at the four tap layers
    """

    disparity: Tensor
    q: Tensor | None
    t: Tensor | None
    scale: Tensor | None
    gate: np.ndarray
    taps: list[Tensor]

    @property
    def has_poses(self) -> bool:
        return self.q is not None


class PatchEncoder(Module):
    """Toy ViT: linear patch embedding, fixed positions, ``E`` transformer blocks."""

    def __init__(self, cfg: ModelConfig, channels: int, rng: np.random.Generator):
        self.patch = cfg.patch_size
        self.dim = cfg.embed_dim
        self.embed = Linear(channels * cfg.patch_size**2, cfg.embed_dim, rng)
        self.blocks = [
            TransformerBlock(
                cfg.embed_dim,
                cfg.encoder_heads,
                cfg.embed_dim // cfg.encoder_heads,
                rng,
                cfg.mlp_ratio,
            )
            for _ in range(cfg.encoder_layers)
        ]
        self.tap_layers = cfg.tap_layers

    def forward(self, frames: np.ndarray) -> list[Tensor]:
        """Encode ``[F, C, H, W]`` frames; returns the four tapped feature maps."""
        _, _, h, w = frames.shape
        grid = (h // self.patch, w // self.patch)
        tokens = self.embed(Tensor(patchify(frames, self.patch)))
        x = tokens + Tensor(sincos_position_embedding(grid, self.dim), dtype=tokens.dtype)
        taps = []
        for layer, block in enumerate(self.blocks, start=1):
            x = block(x)
            if layer in self.tap_layers:
                taps.append(x)
        return taps


class FusionBlock(Module):
    """Residual per-token mixing: ``x + mlp(ln(x))``."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.norm = LayerNorm(dim)
        self.mlp = MLP(dim, 2 * dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.mlp(self.norm(x))


def upsample_tokens(x: Tensor, grid: tuple[int, int], factor: int) -> Tensor:
    """Nearest-neighbour upsampling of ``[F, h*w, C]`` tokens on their grid."""
    if factor == 1:
        return x
    f, _, c = x.shape
    h, w = grid
    x = T.reshape(x, (f, h, 1, w, 1, c))
    x = T.broadcast_to(x, (f, h, factor, w, factor, c))
    return T.reshape(x, (f, h * factor * w * factor, c))


class FusionDecoder(Module):
    """Reassemble the four taps, merge deepest-first, upsample, predict disparity."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c = cfg.decoder_channels
        self.patch = cfg.patch_size
        self.up = 2 if cfg.patch_size % 2 == 0 else 1
        self.sub = cfg.patch_size // self.up
        self.reassemble = [Linear(cfg.embed_dim, c, rng) for _ in range(4)]
        self.mix3 = FusionBlock(c, rng)
        self.mix2 = FusionBlock(c, rng)
        self.mix1 = FusionBlock(c, rng)
        self.mix_up = FusionBlock(c, rng)
        self.head = MLP(c, c, self.sub * self.sub, rng)

    def forward(self, taps, grid, num_frames, mid_hook=None, late_hook=None) -> Tensor:
        r1, r2, r3, r4 = (proj(tap) for proj, tap in zip(self.reassemble, taps, strict=True))
        path = self.mix3(r4 + r3)
        if mid_hook is not None:
            path = mid_hook(path)
        path = self.mix2(path + r2)
        path = self.mix1(path + r1)
        if late_hook is not None:
            path = late_hook(path)
        path = self.mix_up(upsample_tokens(path, grid, self.up))
        f = path.shape[0]
        hu, wu = grid[0] * self.up, grid[1] * self.up
        values = T.reshape(self.head(path), (f, hu, wu, self.sub, self.sub))
        pixels = T.reshape(T.transpose(values, (0, 1, 3, 2, 4)), (f, hu * self.sub, wu * self.sub))
        return T.softplus(pixels)


class DepthModel(Module):
    """The full network.

    Args:
        cfg: Architecture settings
        channels: Image channels
    """

    def __init__(self, cfg: ModelConfig, channels: int = 3):
        rng = np.random.default_rng(cfg.init_seed)
        self.cfg = cfg
        self.channels = channels
        self.encoder = PatchEncoder(cfg, channels, rng)
        self.gem = (
            GeometryEmbedding(cfg.embed_dim, cfg.gem_layers, cfg.gem_heads, rng, cfg.mlp_ratio)
            if cfg.use_gem
            else None
        )
        width = cfg.embed_dim if cfg.astt.placement == "early" else cfg.decoder_channels
        self.astt = AlternatingTransformer(width, cfg.astt, cfg.embed_dim, cfg.max_frames, rng)
        self.decoder = FusionDecoder(cfg, rng)

    def new_modules(self) -> list[Module]:
        """Modules that train at the higher learning rate."""
        return [m for m in (self.gem, self.astt) if m is not None]

    def pretrained_modules(self) -> list[Module]:
        return [self.encoder, self.decoder]

    def forward(
        self,
        images: np.ndarray,
        gate_override: bool | None = None,
        rng: np.random.Generator | None = None,
        pose_noise: float | None = None,
    ) -> ModelOutput:
        """Predict disparity and canonical poses for ``[B, N, C, H, W]`` images.

        Args:
            images: Clip batch
            gate_override: Force the pose gate open (True) or shut (False)
            rng: Generator for training-time gate sampling and pose noise
            pose_noise: Relative pose noise (defaults to the config value at
                inference, always 0 while training)
        """
        images = np.asarray(images)
        if images.ndim == 4:
            images = images[None]
        if images.ndim != 5:
            raise ShapeError(f"Images must be [B, N, C, H, W], got shape {images.shape}")
        b, n, c, h, w = images.shape
        p = self.cfg.patch_size
        if c != self.channels:
            raise ShapeError(f"Model expects {self.channels} channels, got {c}")
        if h % p or w % p:
            raise ContractError(f"Frame size {h}x{w} is not divisible by patch size {p}")
        if n > self.cfg.max_frames:
            raise ContractError(f"Clip length {n} exceeds max_frames {self.cfg.max_frames}")
        grid = (h // p, w // p)

        taps = self.encoder(images.reshape(b * n, c, h, w))
        q = t = scale = None
        camera_feature = None
        if self.gem is not None:
            if pose_noise is None:
                pose_noise = self.cfg.pose_noise
            noise = 0.0 if self.training else pose_noise
            gem_out: GEMOutput = self.gem(taps[3], n, pose_noise=noise, rng=rng)
            taps = [*taps[:3], gem_out.fused]
            q, t, scale = gem_out.q, gem_out.t, gem_out.scale
            camera_feature = gem_out.camera_feature
        gate = self.astt.sample_gate(b, self.training, rng, gate_override)

        def hook(x: Tensor) -> Tensor:
            return self.astt(x, n, grid, camera_feature, gate)

        placement = self.cfg.astt.placement
        if placement == "early":
            taps = [*taps[:3], hook(taps[3])]
        disparity = self.decoder(
            taps,
            grid,
            n,
            mid_hook=hook if placement == "mid" else None,
            late_hook=hook if placement == "late" else None,
        )
        return ModelOutput(T.reshape(disparity, (b, n, h, w)), q, t, scale, gate, taps)
