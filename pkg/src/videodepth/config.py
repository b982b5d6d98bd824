"""Configuration dataclasses and their TOML loaders."""

import dataclasses
import os
import tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

SEED_ENV_VAR = "GEMDEPTH_SEED"

PLACEMENTS = ("early", "mid", "late")
TRAJECTORIES = ("orbit", "dolly", "rotate-in-place", "random-smooth")
PRIMITIVE_KINDS = ("plane", "sphere", "box")
METRIC_NAMES = ("absrel", "delta1", "tae", "tcd", "f1", "ate")


@dataclass
class ASTTConfig:
    """Spatio-temporal transformer settings.

    Attributes:
        num_blocks: Number of [temporal -> spatial] repetitions
        heads: Attention heads per sub-layer
        head_dim: Per-head width (even, for rotary pairs)
        pose_integration_prob: Chance per clip per training step that the
            camera feature is injected into temporal attention
        placement: Where the transformer sits: "early", "mid" or "late"
        temporal: Enable the temporal sub-step
        spatial: Enable the spatial sub-steps
        rope_base: Rotary frequency base
    """

    num_blocks: int = 2
    heads: int = 4
    head_dim: int = 16
    pose_integration_prob: float = 1.0
    placement: str = "early"
    temporal: bool = True
    spatial: bool = True
    rope_base: float = 100.0

    def __post_init__(self):
        if self.num_blocks < 0:
            raise ValueError(f"num_blocks must be >= 0, got {self.num_blocks}")
        if self.heads < 1:
            raise ValueError(f"heads must be >= 1, got {self.heads}")
        if self.head_dim < 2 or self.head_dim % 2 != 0:
            raise ValueError(f"head_dim must be a positive even number, got {self.head_dim}")
        if not 0.0 <= self.pose_integration_prob <= 1.0:
            raise ValueError(
                f"pose_integration_prob must be in [0, 1], got {self.pose_integration_prob}"
            )
        if self.placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")
        if self.rope_base <= 1.0:
            raise ValueError(f"rope_base must be > 1, got {self.rope_base}")


@dataclass
class ModelConfig:
    """Network architecture.

    Attributes:
        patch_size: Patch edge in pixels; frame sizes must be multiples of it
        embed_dim: Token width D of the encoder and GEM
        encoder_layers: Transformer blocks in the encoder (E)
        encoder_heads: Heads per encoder block
        tap_layers: Four 1-based encoder layers whose outputs feed the decoder
        decoder_channels: Channel width C of the decoder
        gem_layers: Alternating frame/global attention layers in GEM
        gem_heads: Heads per GEM layer
        mlp_ratio: Hidden-width multiplier for transformer MLPs
        max_frames: Largest clip length supported by the index embeddings
        use_gem: Disable to bypass pose prediction and fusion entirely
        pose_noise: Relative noise injected into predicted poses at evaluation
        init_seed: Seed for parameter initialization
        astt: Spatio-temporal transformer settings
    """

    patch_size: int = 8
    embed_dim: int = 64
    encoder_layers: int = 4
    encoder_heads: int = 4
    tap_layers: tuple[int, ...] = (1, 2, 3, 4)
    decoder_channels: int = 32
    gem_layers: int = 4
    gem_heads: int = 4
    mlp_ratio: float = 2.0
    max_frames: int = 32
    use_gem: bool = True
    pose_noise: float = 0.0
    init_seed: int = 0
    astt: ASTTConfig = field(default_factory=ASTTConfig)

    def __post_init__(self):
        if isinstance(self.astt, dict):
            self.astt = _build(ASTTConfig, self.astt, "model.astt")
        self.tap_layers = tuple(int(t) for t in self.tap_layers)
        if self.patch_size < 1:
            raise ValueError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.embed_dim % self.encoder_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by encoder_heads {self.encoder_heads}"
            )
        if self.embed_dim % self.gem_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by gem_heads {self.gem_heads}"
            )
        if len(self.tap_layers) != 4:
            raise ValueError(f"Exactly 4 tap layers required, got {self.tap_layers}")
        if any(b <= a for a, b in zip(self.tap_layers, self.tap_layers[1:], strict=False)):
            raise ValueError(f"Tap layers must be strictly increasing, got {self.tap_layers}")
        if self.tap_layers[0] < 1 or self.tap_layers[-1] > self.encoder_layers:
            raise ValueError(
                f"Tap layers {self.tap_layers} must lie in [1, {self.encoder_layers}]"
            )
        if self.decoder_channels < 1:
            raise ValueError(f"decoder_channels must be >= 1, got {self.decoder_channels}")
        if self.gem_layers < 0:
            raise ValueError(f"gem_layers must be >= 0, got {self.gem_layers}")
        if self.max_frames < 1:
            raise ValueError(f"max_frames must be >= 1, got {self.max_frames}")
        if self.pose_noise < 0:
            raise ValueError(f"pose_noise must be >= 0, got {self.pose_noise}")


@dataclass
class LossWeights:
    """Weights of the total objective ``ssi + alpha*gm + beta*tgm + gamma*cam``.

    Attributes:
        alpha: Gradient-matching weight
        beta: Temporal gradient-matching weight
        gamma: Camera loss weight
        lam: Translation weight inside the camera loss
        huber_delta: Huber transition point
        gm_scales: Dyadic scales in the gradient-matching loss
        trim_fraction: Fraction of largest residuals dropped per frame in the SSI loss
    """

    alpha: float = 0.5
    beta: float = 10.0
    gamma: float = 0.2
    lam: float = 1.0
    huber_delta: float = 1.0
    gm_scales: int = 4
    trim_fraction: float = 0.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "lam"):
            if getattr(self, name) < 0:
                raise ValueError(f"Loss weight {name} must be >= 0, got {getattr(self, name)}")
        if self.huber_delta <= 0:
            raise ValueError(f"huber_delta must be > 0, got {self.huber_delta}")
        if self.gm_scales < 1:
            raise ValueError(f"gm_scales must be >= 1, got {self.gm_scales}")
        if not 0.0 <= self.trim_fraction < 1.0:
            raise ValueError(f"trim_fraction must be in [0, 1), got {self.trim_fraction}")


@dataclass
class TrainConfig:
    """Training run settings.

    Attributes:
        stage: 1 (pose-supervised) or 2 (GEM frozen, no pose labels)
        lr_new: Learning rate for GEM and the spatio-temporal transformer
        lr_pretrained: Learning rate for encoder and decoder
        weight_decay: Decoupled weight decay
        steps: Optimizer steps to run
        clip_len: Frames per training clip (N)
        batch_size: Clips per step
        seed: Data-order and gate seed (``GEMDEPTH_SEED`` overrides)
        data_dir: Directory of generated clips
        run_dir: Output directory for checkpoints and step logs
        checkpoint_every: Steps between checkpoints
        init_checkpoint: Checkpoint to start from (required for stage 2)
        grad_clip: Global gradient-norm clip
        pose_integration_prob: Gate probability; ``None`` uses 1.0 (stage 1) / 0.5 (stage 2)
        crop_size: Shorter-edge target for multi-resolution crops (0 disables)
        prefetch: Bounded queue depth of the clip loader
        max_clips: Use at most this many clips (0 = all)
        model: Architecture
        loss: Loss weights
    """

    stage: int = 1
    lr_new: float = 1e-4
    lr_pretrained: float = 1e-6
    weight_decay: float = 0.01
    steps: int = 1000
    clip_len: int = 8
    batch_size: int = 2
    seed: int = 0
    data_dir: str = "data/train"
    run_dir: str = "runs/toy"
    checkpoint_every: int = 100
    init_checkpoint: str | None = None
    grad_clip: float = 1.0
    pose_integration_prob: float | None = None
    crop_size: int = 0
    prefetch: int = 2
    max_clips: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = _build(ModelConfig, self.model, "model")
        if isinstance(self.loss, dict):
            self.loss = _build(LossWeights, self.loss, "loss")
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.lr_new <= 0 or self.lr_pretrained <= 0:
            raise ValueError(
                f"Learning rates must be positive, got lr_new={self.lr_new}, "
                f"lr_pretrained={self.lr_pretrained}"
            )
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if not 1 <= self.clip_len <= self.model.max_frames:
            raise ValueError(
                f"clip_len must be in [1, {self.model.max_frames}], got {self.clip_len}"
            )
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_every < 1:
            raise ValueError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if self.grad_clip <= 0:
            raise ValueError(f"grad_clip must be > 0, got {self.grad_clip}")
        if self.pose_integration_prob is not None and not 0.0 <= self.pose_integration_prob <= 1.0:
            raise ValueError(
                f"pose_integration_prob must be in [0, 1], got {self.pose_integration_prob}"
            )
        if self.crop_size < 0:
            raise ValueError(f"crop_size must be >= 0, got {self.crop_size}")
        if self.prefetch < 1:
            raise ValueError(f"prefetch must be >= 1, got {self.prefetch}")

    @property
    def gate_probability(self) -> float:
        if self.pose_integration_prob is not None:
            return self.pose_integration_prob
        return 1.0 if self.stage == 1 else 0.5


@dataclass
class EvalConfig:
    """Metric-suite settings.

    Attributes:
        metrics: Metrics to compute, any of absrel, delta1, tae, tcd, f1, ate
        per_frame_alignment: Align each frame separately instead of the whole sequence
        tae_normalizer: "interior" divides by 2(T-2); "pairs" divides by 2(T-1)
        f1_threshold: Absolute F1 distance threshold (overrides f1_fraction)
        f1_fraction: Threshold as a fraction of the ground-truth bounding-box diagonal
        tcd_samples: Points sampled per frame for the Chamfer distance
        seed: Subsampling seed
        pose_gate: "auto" (open at inference), "on" or "off"
        pose_noise: Relative pose noise injected at evaluation
    """

    metrics: tuple[str, ...] = METRIC_NAMES
    per_frame_alignment: bool = False
    tae_normalizer: str = "interior"
    f1_threshold: float | None = None
    f1_fraction: float = 0.05
    tcd_samples: int = 512
    seed: int = 0
    pose_gate: str = "auto"
    pose_noise: float = 0.0

    def __post_init__(self):
        self.metrics = tuple(self.metrics)
        unknown = [m for m in self.metrics if m not in METRIC_NAMES]
        if unknown:
            raise ValueError(f"Unknown metrics {unknown}; choose from {METRIC_NAMES}")
        if self.tae_normalizer not in ("interior", "pairs"):
            raise ValueError(
                f"tae_normalizer must be 'interior' or 'pairs', got {self.tae_normalizer!r}"
            )
        if self.f1_threshold is not None and self.f1_threshold <= 0:
            raise ValueError(f"f1_threshold must be > 0, got {self.f1_threshold}")
        if self.f1_fraction <= 0:
            raise ValueError(f"f1_fraction must be > 0, got {self.f1_fraction}")
        if self.tcd_samples < 1:
            raise ValueError(f"tcd_samples must be >= 1, got {self.tcd_samples}")
        if self.pose_gate not in ("auto", "on", "off"):
            raise ValueError(f"pose_gate must be auto, on or off, got {self.pose_gate!r}")
        if self.pose_noise < 0:
            raise ValueError(f"pose_noise must be >= 0, got {self.pose_noise}")


@dataclass
class PrimitiveSpec:
    """One analytic scene primitive.

    Attributes:
        kind: "plane", "sphere" or "box"
        center: Point on the plane / sphere centre / box centre (camera-0 frame)
        size: Sphere radius, or box half-extents (x, y, z); unused for planes
        normal: Plane normal
        texture: Checker period in scene units
        albedo: Base grey level in [0, 1]
    """

    kind: str
    center: tuple[float, float, float] = (0.0, 0.0, 5.0)
    size: tuple[float, ...] = (1.0,)
    normal: tuple[float, float, float] = (0.0, 0.0, -1.0)
    texture: float = 0.5
    albedo: float = 0.7

    def __post_init__(self):
        self.center = tuple(float(c) for c in self.center)
        self.size = tuple(float(s) for s in self.size)
        self.normal = tuple(float(n) for n in self.normal)
        if self.kind not in PRIMITIVE_KINDS:
            raise ValueError(f"Primitive kind must be one of {PRIMITIVE_KINDS}, got {self.kind!r}")
        if len(self.center) != 3 or len(self.normal) != 3:
            raise ValueError(
                f"center and normal need 3 components, got {self.center}, {self.normal}"
            )
        if self.kind == "sphere" and (len(self.size) != 1 or self.size[0] <= 0):
            raise ValueError(f"Sphere size must be a single positive radius, got {self.size}")
        if self.kind == "box" and (len(self.size) != 3 or min(self.size) <= 0):
            raise ValueError(f"Box size must be 3 positive half-extents, got {self.size}")
        if self.kind == "plane" and sum(n * n for n in self.normal) < 1e-12:
            raise ValueError("Plane normal must be nonzero")
        if self.texture <= 0:
            raise ValueError(f"texture period must be > 0, got {self.texture}")
        if not 0.0 <= self.albedo <= 1.0:
            raise ValueError(f"albedo must be in [0, 1], got {self.albedo}")


@dataclass
class SceneSpec:
    """Procedural clip description.

    Attributes:
        seed: Generator seed (scene layout, textures, random trajectories)
        num_frames: Frames per clip (N)
        width: Image width in pixels
        height: Image height in pixels
        trajectory: "orbit", "dolly", "rotate-in-place" or "random-smooth"
        motion: Camera travel scale in scene units
        fov_deg: Horizontal field of view
        primitives: Explicit primitives; empty means a random layout from ``seed``
        num_random_primitives: Objects placed when ``primitives`` is empty
        back_wall: Add a far wall behind random layouts
        sky: Leave the far region open and paint it as sky
    """

    seed: int = 0
    num_frames: int = 8
    width: int = 64
    height: int = 64
    trajectory: str = "orbit"
    motion: float = 0.3
    fov_deg: float = 60.0
    primitives: list[PrimitiveSpec] = field(default_factory=list)
    num_random_primitives: int = 4
    back_wall: bool = True
    sky: bool = False

    def __post_init__(self):
        self.primitives = [
            _build(PrimitiveSpec, p, "primitives") if isinstance(p, dict) else p
            for p in self.primitives
        ]
        if self.num_frames < 1:
            raise ValueError(f"num_frames must be >= 1, got {self.num_frames}")
        if self.width < 2 or self.height < 2:
            raise ValueError(f"Resolution {self.width}x{self.height} too small")
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"trajectory must be one of {TRAJECTORIES}, got {self.trajectory!r}")
        if self.motion < 0:
            raise ValueError(f"motion must be >= 0, got {self.motion}")
        if not 10.0 <= self.fov_deg <= 120.0:
            raise ValueError(f"fov_deg must be in [10, 120], got {self.fov_deg}")
        if self.num_random_primitives < 0:
            raise ValueError(
                f"num_random_primitives must be >= 0, got {self.num_random_primitives}"
            )

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SceneSpec":
        return _build(cls, data, "scene")


def _build(cls, data: dict[str, Any], where: str):
    """Instantiate a config dataclass, rejecting unknown keys."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValueError(f"Unknown key(s) in [{where}]: {', '.join(unknown)}")
    return cls(**data)


def seed_from_env(default: int) -> int:
    """Return ``GEMDEPTH_SEED`` when set, else ``default``."""
    value = os.environ.get(SEED_ENV_VAR)
    if value is None or value.strip() == "":
        return default
    try:
        return int(value)
    except ValueError:
        raise ValueError(f"{SEED_ENV_VAR} must be an integer, got {value!r}") from None


def load_train_config(path: str | Path) -> TrainConfig:
    """Read a training TOML file (top-level keys plus [model], [model.astt], [loss])."""
    with open(path, "rb") as f:
        data = tomllib.load(f)
    cfg = _build(TrainConfig, data, "train")
    cfg.seed = seed_from_env(cfg.seed)
    return cfg


def load_scene_spec(path: str | Path) -> SceneSpec:
    """Read a scene TOML file (top-level keys plus [[primitives]] tables)."""
    with open(path, "rb") as f:
        data = tomllib.load(f)
    return SceneSpec.from_dict(data)


def train_config_to_dict(cfg: TrainConfig) -> dict[str, Any]:
    return dataclasses.asdict(cfg)


def model_config_from_dict(data: dict[str, Any]) -> ModelConfig:
    return _build(ModelConfig, data, "model")
