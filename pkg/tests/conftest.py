"""Pytest configuration and shared fixtures."""

import numpy as np
import pytest

from src.videodepth.config import ASTTConfig, ModelConfig, SceneSpec, TrainConfig
from src.videodepth.geometry import Pose, random_quat
from src.videodepth.gradcheck import small_model_config
from src.videodepth.synthdata import generate, save_clip


@pytest.fixture
def rng():
    """Seeded generator so every test is reproducible."""
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec():
    """A 4-frame 16x16 orbit scene: renders in milliseconds."""
    return SceneSpec(seed=3, num_frames=4, width=16, height=16, trajectory="orbit", motion=0.6)


@pytest.fixture
def tiny_clip(tiny_spec):
    return generate(tiny_spec, clip_id=0)


@pytest.fixture
def small_cfg():
    """Small architecture for forward/backward tests (patch 4, 4 frames max)."""
    return small_model_config()


@pytest.fixture
def clip_dir(tmp_path, tiny_spec):
    """Directory with three saved tiny clips."""
    root = tmp_path / "data"
    for i in range(3):
        spec = SceneSpec(**{**tiny_spec.to_dict(), "seed": tiny_spec.seed + i})
        save_clip(generate(spec, clip_id=i), root)
    return root


@pytest.fixture
def toy_train_cfg(clip_dir, tmp_path):
    """Stage-1 config over ``clip_dir`` that runs a handful of steps."""
    model = ModelConfig(
        patch_size=4,
        embed_dim=16,
        encoder_layers=4,
        encoder_heads=2,
        decoder_channels=8,
        gem_layers=2,
        gem_heads=2,
        max_frames=4,
        astt=ASTTConfig(num_blocks=1, heads=2, head_dim=4),
    )
    return TrainConfig(
        stage=1,
        steps=4,
        clip_len=4,
        batch_size=2,
        seed=0,
        data_dir=str(clip_dir),
        run_dir=str(tmp_path / "run"),
        checkpoint_every=2,
        lr_new=1e-3,
        lr_pretrained=1e-4,
        model=model,
    )


@pytest.fixture
def random_poses():
    """Factory for random camera trajectories."""

    def make(n: int, rng: np.random.Generator, spread: float = 2.0) -> list[Pose]:
        return [Pose(random_quat(rng), rng.normal(0, spread, 3)) for _ in range(n)]

    return make
