"""Layers built on the tensor engine.

Parameters are discovered by walking a module's attributes in definition
order, so the parameter naming used by checkpoints (``"gem.blocks.0.attn.q.weight"``)
is stable across runs. All initializers draw from an explicit
``np.random.Generator``; nothing here touches global random state.
"""

from __future__ import annotations

from collections.abc import Callable, Iterator

import numpy as np

from src.videodepth import tensor as T
from src.videodepth.errors import ContractError, ShapeError
from src.videodepth.tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float = 0.02) -> np.ndarray:
    """Normal samples truncated at two standard deviations."""
    values = rng.standard_normal(shape)
    return np.clip(values, -2.0, 2.0) * std


class Parameter(Tensor):
    """A leaf tensor that a :class:`Module` owns and an optimizer updates."""

    def __init__(self, data: np.ndarray):
        super().__init__(data, requires_grad=True)


class Module:
    """Base class: parameter registry, freezing and state dicts."""

    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        """Yield ``(dotted_name, parameter)`` pairs in definition order."""
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> Module:
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def freeze(self) -> Module:
        """Stop gradient flow into every parameter of this module."""
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self) -> Module:
        for p in self.parameters():
            p.requires_grad = True
        return self

    @property
    def frozen(self) -> bool:
        params = self.parameters()
        return bool(params) and not any(p.requires_grad for p in params)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        """Copy arrays into parameters; names and shapes must match exactly."""
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ContractError(
                f"State dict mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}"
            )
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"Parameter {name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def to(self, dtype: str | type | np.dtype) -> Module:
        """Cast every parameter in place (used by the float64 gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


class Linear(Module):
    """Affine map over the last axis: ``x @ weight + bias``.

    Args:
        in_dim: Input features
        out_dim: Output features
        rng: Generator for weight initialization
        bias: Whether to add a bias vector
        zero_init: Start with all-zero weights (and bias)
        std: Standard deviation of the truncated-normal weight init
    """

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        rng: np.random.Generator,
        bias: bool = True,
        zero_init: bool = False,
        std: float = 0.02,
    ):
        self.in_dim = in_dim
        self.out_dim = out_dim
        shape = (in_dim, out_dim)
        init = np.zeros(shape) if zero_init else trunc_normal(rng, shape, std)
        self.weight = Parameter(init)
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(
                f"Linear expects last dimension {self.in_dim}, got input shape {x.shape}"
            )
        if x.ndim == 1:
            out = T.reshape(T.matmul(T.reshape(x, (1, self.in_dim)), self.weight), (self.out_dim,))
        else:
            out = T.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    """Two linear layers with a GELU in between."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, rng: np.random.Generator):
        self.fc1 = Linear(in_dim, hidden_dim, rng)
        self.fc2 = Linear(hidden_dim, out_dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Embedding(Module):
    """Learned lookup table, one row per index."""

    def __init__(
        self, num: int, dim: int, rng: np.random.Generator, zero_init: bool = False
    ):
        self.num = num
        init = np.zeros((num, dim)) if zero_init else trunc_normal(rng, (num, dim))
        self.weight = Parameter(init)

    def forward(self, indices: np.ndarray) -> Tensor:
        return T.embedding(self.weight, indices)


class RotaryEmbedding2D:
    """Axial rotary position encoding for tokens laid out on an ``h x w`` grid.

    The head dimension is split into interleaved pairs. The first half of the
    pairs rotates with the row index, the rest with the column index. Each
    rotation is an isometry, and position (0, 0) is the identity.

    Args:
        head_dim: Per-head feature size (must be even)
        grid: Patch grid ``(h, w)``
        base: Frequency base; small grids favour a small base
    """

    def __init__(self, head_dim: int, grid: tuple[int, int], base: float = 100.0):
        if head_dim % 2 != 0:
            raise ContractError(f"RoPE needs an even head dimension, got {head_dim}")
        self.head_dim = head_dim
        self.grid = grid
        h, w = grid
        n_pairs = head_dim // 2
        row_pairs = n_pairs // 2
        col_pairs = n_pairs - row_pairs
        rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        rows = rows.reshape(-1, 1).astype(np.float64)
        cols = cols.reshape(-1, 1).astype(np.float64)
        row_freq = 1.0 / base ** (np.arange(row_pairs) / max(row_pairs, 1))
        col_freq = 1.0 / base ** (np.arange(col_pairs) / max(col_pairs, 1))
        angles = np.concatenate([rows * row_freq, cols * col_freq], axis=1)  # (L, n_pairs)
        self.cos = np.repeat(np.cos(angles), 2, axis=1)
        self.sin = np.repeat(np.sin(angles), 2, axis=1)
        # (x0, x1) -> (-x1, x0) on each interleaved pair
        rot = np.zeros((head_dim, head_dim))
        for i in range(n_pairs):
            rot[2 * i + 1, 2 * i] = -1.0
            rot[2 * i, 2 * i + 1] = 1.0
        self.rot = rot

    @property
    def num_positions(self) -> int:
        return self.grid[0] * self.grid[1]

    def __call__(self, x: Tensor, repeats: int = 1) -> Tensor:
        """Rotate ``x`` of shape ``[..., S, head_dim]`` with ``S = repeats * h * w``.

        ``repeats`` tiles the grid positions for sequences that hold several frames.
        """
        seq = x.shape[-2]
        if seq != repeats * self.num_positions or x.shape[-1] != self.head_dim:
            raise ShapeError(
                f"RoPE grid {self.grid} x {repeats} does not match input shape {x.shape}"
            )
        cos = Tensor(np.tile(self.cos, (repeats, 1)), dtype=x.dtype)
        sin = Tensor(np.tile(self.sin, (repeats, 1)), dtype=x.dtype)
        rotated = T.matmul(x, Tensor(self.rot, dtype=x.dtype))
        return x * cos + rotated * sin


PositionFn = Callable[[Tensor], Tensor]


class MultiHeadAttention(Module):
    """Multi-head self-attention over ``[B, S, dim]`` sequences.

    ``forward`` optionally rotates queries and keys (``position``) and adds a
    per-token bias to queries and keys only (``qk_bias``). Set
    ``record_weights`` to keep the last attention matrix for inspection.
    """

    def __init__(self, dim: int, heads: int, head_dim: int, rng: np.random.Generator):
        self.heads = heads
        self.head_dim = head_dim
        inner = heads * head_dim
        self.q = Linear(dim, inner, rng)
        self.k = Linear(dim, inner, rng)
        self.v = Linear(dim, inner, rng)
        self.out = Linear(inner, dim, rng)
        self.record_weights = False
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, s, _ = x.shape
        return T.transpose(T.reshape(x, (b, s, self.heads, self.head_dim)), (0, 2, 1, 3))

    def forward(
        self,
        x: Tensor,
        position: PositionFn | None = None,
        qk_bias: Tensor | None = None,
    ) -> Tensor:
        if x.ndim != 3:
            raise ShapeError(f"Attention expects [B, S, D] input, got shape {x.shape}")
        b, s, _ = x.shape
        q, k, v = self.q(x), self.k(x), self.v(x)
        if qk_bias is not None:
            q = q + qk_bias
            k = k + qk_bias
        q, k, v = self._split(q), self._split(k), self._split(v)
        if position is not None:
            q, k = position(q), position(k)
        out, weights = T.scaled_dot_product_attention(q, k, v, return_weights=True)
        if self.record_weights:
            self.last_weights = weights.numpy()
        merged = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, s, self.heads * self.head_dim))
        return self.out(merged)


class TransformerBlock(Module):
    """Pre-norm block: ``x + attn(ln(x))`` then ``x + mlp(ln(x))``."""

    def __init__(
        self,
        dim: int,
        heads: int,
        head_dim: int,
        rng: np.random.Generator,
        mlp_ratio: float = 2.0,
    ):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, head_dim, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, int(dim * mlp_ratio), dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))
