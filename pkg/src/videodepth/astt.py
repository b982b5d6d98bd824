"""Alternating spatio-temporal transformer.

Each block runs three pre-norm residual attention sub-layers on ``[B*N, L, D]``
features laid out on an ``h x w`` patch grid:

1. temporal: one length-N sequence per spatial position, with learned frame
   index embeddings and (when the pose gate is open) a projection of the
   per-frame camera feature added to queries and keys;
2. intra-frame spatial: the L tokens of each frame, with 2-D rotary encoding;
3. inter-frame spatial: all N*L tokens of a clip, with rotary encoding and
   frame index embeddings.

The patch grid is passed at call time, so one instance serves every crop size.
"""

from __future__ import annotations

import numpy as np

from src.videodepth import tensor as T
from src.videodepth.config import ASTTConfig
from src.videodepth.errors import ContractError, ShapeError
from src.videodepth.nn import (
    Embedding,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    RotaryEmbedding2D,
)
from src.videodepth.tensor import Tensor

Grid = tuple[int, int]


def _check_layout(x: Tensor, num_frames: int, grid: Grid, dim: int):
    if x.ndim != 3 or x.shape[-1] != dim:
        raise ShapeError(f"Expected [B*N, L, {dim}] features, got shape {x.shape}")
    if num_frames < 1 or x.shape[0] % num_frames != 0:
        raise ContractError(
            f"Leading dimension {x.shape[0]} is not a multiple of clip length {num_frames}"
        )
    if x.shape[1] != grid[0] * grid[1]:
        raise ContractError(f"Token count {x.shape[1]} does not match patch grid {grid}")


class TemporalAttention(Module):
    """Attention along the frame axis at each spatial position."""

    def __init__(
        self,
        dim: int,
        heads: int,
        head_dim: int,
        camera_dim: int,
        max_frames: int,
        rng: np.random.Generator,
    ):
        self.norm = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, head_dim, rng)
        self.frame_index = Embedding(max_frames, dim, rng, zero_init=True)
        self.pose_proj = Linear(camera_dim, heads * head_dim, rng)

    def forward(
        self,
        x: Tensor,
        num_frames: int,
        camera_feature: Tensor | None = None,
        gate: np.ndarray | None = None,
    ) -> Tensor:
        bn, length, dim = x.shape
        b = bn // num_frames
        if num_frames > self.frame_index.num:
            raise ContractError(
                f"Clip length {num_frames} exceeds {self.frame_index.num} frame indices"
            )
        seq = T.reshape(
            T.transpose(T.reshape(x, (b, num_frames, length, dim)), (0, 2, 1, 3)),
            (b * length, num_frames, dim),
        )
        index = T.reshape(self.frame_index(np.arange(num_frames)), (1, num_frames, dim))
        h = self.norm(seq) + index
        qk_bias = None
        if camera_feature is not None and gate is not None and gate.any():
            inner = self.attn.heads * self.attn.head_dim
            proj = T.reshape(self.pose_proj(camera_feature), (b, 1, num_frames, inner))
            proj = proj * Tensor(gate.astype(np.float64).reshape(b, 1, 1, 1), dtype=proj.dtype)
            qk_bias = T.reshape(
                T.broadcast_to(proj, (b, length, num_frames, inner)),
                (b * length, num_frames, inner),
            )
        seq = seq + self.attn(h, qk_bias=qk_bias)
        return T.reshape(
            T.transpose(T.reshape(seq, (b, length, num_frames, dim)), (0, 2, 1, 3)),
            (bn, length, dim),
        )


class SpatialAttention(Module):
    """Intra-frame then inter-frame attention, both with 2-D rotary encoding."""

    def __init__(
        self,
        dim: int,
        heads: int,
        head_dim: int,
        max_frames: int,
        rng: np.random.Generator,
        rope_base: float = 100.0,
    ):
        self.head_dim = head_dim
        self.rope_base = rope_base
        self.norm_intra = LayerNorm(dim)
        self.intra = MultiHeadAttention(dim, heads, head_dim, rng)
        self.norm_inter = LayerNorm(dim)
        self.inter = MultiHeadAttention(dim, heads, head_dim, rng)
        self.frame_index = Embedding(max_frames, dim, rng, zero_init=True)
        self._ropes: dict[Grid, RotaryEmbedding2D] = {}

    def rope(self, grid: Grid) -> RotaryEmbedding2D:
        if grid not in self._ropes:
            self._ropes[grid] = RotaryEmbedding2D(self.head_dim, grid, self.rope_base)
        return self._ropes[grid]

    def forward(self, x: Tensor, num_frames: int, grid: Grid) -> Tensor:
        bn, length, dim = x.shape
        b = bn // num_frames
        rope = self.rope(grid)
        x = x + self.intra(self.norm_intra(x), position=rope)

        clip = T.reshape(x, (b, num_frames * length, dim))
        index = self.frame_index(np.repeat(np.arange(num_frames), length))
        h = self.norm_inter(clip) + T.reshape(index, (1, num_frames * length, dim))
        clip = clip + self.inter(h, position=lambda v: rope(v, repeats=num_frames))
        return T.reshape(clip, (bn, length, dim))


class ASTTBlock(Module):
    def __init__(
        self,
        dim: int,
        cfg: ASTTConfig,
        camera_dim: int,
        max_frames: int,
        rng: np.random.Generator,
    ):
        self.temporal = (
            TemporalAttention(dim, cfg.heads, cfg.head_dim, camera_dim, max_frames, rng)
            if cfg.temporal
            else None
        )
        self.spatial = (
            SpatialAttention(dim, cfg.heads, cfg.head_dim, max_frames, rng, cfg.rope_base)
            if cfg.spatial
            else None
        )

    def forward(self, x, num_frames, grid, camera_feature=None, gate=None):
        if self.temporal is not None:
            x = self.temporal(x, num_frames, camera_feature, gate)
        if self.spatial is not None:
            x = self.spatial(x, num_frames, grid)
        return x


class AlternatingTransformer(Module):
    """``num_blocks`` repetitions of [temporal -> spatial].

    Args:
        dim: Feature width at the hook point
        cfg: Block count, heads, gate probability and toggles
        camera_dim: Width of the GEM camera feature
        max_frames: Size of the frame index tables
        rng: Initialization generator
    """

    def __init__(
        self,
        dim: int,
        cfg: ASTTConfig,
        camera_dim: int,
        max_frames: int,
        rng: np.random.Generator,
    ):
        self.dim = dim
        self.cfg = cfg
        self.blocks = [
            ASTTBlock(dim, cfg, camera_dim, max_frames, rng) for _ in range(cfg.num_blocks)
        ]

    def sample_gate(
        self,
        batch: int,
        training: bool,
        rng: np.random.Generator | None = None,
        override: bool | None = None,
    ) -> np.ndarray:
        """Per-clip pose-gate decisions.

        Training draws each clip's gate with probability ``pose_integration_prob``.
        Inference always opens the gate. ``override`` forces every gate open or
        shut in either mode.
        """
        p = self.cfg.pose_integration_prob
        if override is not None:
            return np.full(batch, bool(override))
        if not training:
            return np.ones(batch, dtype=bool)
        if p in (0.0, 1.0):
            return np.full(batch, p > 0.0)
        if rng is None:
            raise ContractError("Training with a fractional pose gate needs a random generator")
        return rng.random(batch) < p

    def forward(
        self,
        x: Tensor,
        num_frames: int,
        grid: Grid,
        camera_feature: Tensor | None = None,
        gate: np.ndarray | None = None,
    ) -> Tensor:
        _check_layout(x, num_frames, grid, self.dim)
        if camera_feature is None:
            gate = None
        elif gate is not None:
            gate = np.asarray(gate, dtype=bool).reshape(-1)
            if len(gate) != x.shape[0] // num_frames:
                raise ShapeError(
                    f"Gate has {len(gate)} entries for {x.shape[0] // num_frames} clips"
                )
        for block in self.blocks:
            x = block(x, num_frames, grid, camera_feature, gate)
        return x

    def attention_layers(self) -> list[MultiHeadAttention]:
        return [m for m in self.modules() if isinstance(m, MultiHeadAttention)]
