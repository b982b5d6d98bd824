"""Tests for the end-to-end depth network."""

import numpy as np
import pytest

from src.videodepth import tensor as T
from src.videodepth.config import PLACEMENTS
from src.videodepth.errors import ContractError, ShapeError
from src.videodepth.gradcheck import small_model_config
from src.videodepth.model import DepthModel, patchify, sincos_position_embedding, upsample_tokens
from src.videodepth.tensor import Tensor


def _images(rng, b=2, n=3, h=8, w=12):
    return rng.random((b, n, 3, h, w))


class TestHelpers:
    """Patch layout and positional embedding."""

    def test_patchify_layout(self, rng):
        """Test that each patch vector is the (C, p, p) block in row-major grid order."""
        frames = rng.random((1, 3, 4, 6))
        patches = patchify(frames, 2)
        assert patches.shape == (1, 6, 12)
        np.testing.assert_array_equal(patches[0, 0], frames[0, :, :2, :2].reshape(-1))
        np.testing.assert_array_equal(patches[0, 4], frames[0, :, 2:4, 2:4].reshape(-1))

    def test_sincos_shape_and_origin(self):
        """Test the embedding width and its value at the first position."""
        emb = sincos_position_embedding((2, 3), 16)
        assert emb.shape == (6, 16)
        np.testing.assert_array_equal(emb[0, :4], 0.0)
        np.testing.assert_array_equal(emb[0, 4:8], 1.0)

    def test_upsample_repeats_tokens(self):
        """Test nearest-neighbour doubling of a token grid."""
        x = Tensor(np.arange(4, dtype=float).reshape(1, 4, 1))
        out = upsample_tokens(x, (2, 2), 2).data.reshape(4, 4)
        np.testing.assert_array_equal(out[:2, :2], 0.0)
        np.testing.assert_array_equal(out[2:, 2:], 3.0)


class TestForward:
    """Output shapes and value ranges."""

    @pytest.mark.parametrize("placement", PLACEMENTS)
    def test_shapes_for_every_placement(self, rng, placement):
        """Test disparity and pose shapes with the transformer at each hook."""
        model = DepthModel(small_model_config(placement))
        out = model(_images(rng))
        assert out.disparity.shape == (2, 3, 8, 12)
        assert np.all(out.disparity.data >= 0)
        assert out.q.shape == (2, 3, 4)
        assert out.t.shape == (2, 3, 3)
        assert out.scale.shape == (2,)
        assert out.gate.shape == (2,)

    def test_without_gem_has_no_poses(self, rng):
        """Test that disabling GEM removes pose outputs."""
        model = DepthModel(small_model_config(use_gem=False))
        out = model(_images(rng))
        assert not out.has_poses
        assert model.gem is None
        assert model.new_modules() == [model.astt]

    def test_single_clip_promoted_to_batch(self, rng):
        """Test that a 4-D [N, C, H, W] clip is accepted as a batch of one."""
        out = DepthModel(small_model_config())(_images(rng)[0])
        assert out.disparity.shape == (1, 3, 8, 12)

    def test_same_seed_same_weights(self):
        """Test that initialization is reproducible from init_seed."""
        a = DepthModel(small_model_config()).state_dict()
        b = DepthModel(small_model_config()).state_dict()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name], err_msg=name)

    def test_encoder_is_per_frame(self, rng):
        """Test that encoder features of a frame ignore the other frames."""
        model = DepthModel(small_model_config())
        images = _images(rng, b=1)
        changed = images.copy()
        changed[0, 1:] = rng.random(changed[0, 1:].shape)
        a = model.encoder(images.reshape(3, 3, 8, 12))[0].data
        b = model.encoder(changed.reshape(3, 3, 8, 12))[0].data
        np.testing.assert_allclose(a[0], b[0], rtol=1e-6, atol=1e-7)


class TestForwardErrors:
    """Input validation."""

    def test_rejects_wrong_rank(self, rng):
        """Test that 3-D input is refused."""
        with pytest.raises(ShapeError, match=r"\[B, N, C, H, W\]"):
            DepthModel(small_model_config())(rng.random((3, 8, 8)))

    def test_rejects_wrong_channels(self, rng):
        """Test the channel check."""
        with pytest.raises(ShapeError, match="channels"):
            DepthModel(small_model_config())(rng.random((1, 2, 1, 8, 8)))

    def test_rejects_indivisible_size(self, rng):
        """Test that frame sizes must be multiples of the patch size."""
        with pytest.raises(ContractError, match="divisible"):
            DepthModel(small_model_config())(rng.random((1, 2, 3, 8, 10)))

    def test_rejects_long_clip(self, rng):
        """Test that N is bounded by max_frames."""
        with pytest.raises(ContractError, match="max_frames"):
            DepthModel(small_model_config())(rng.random((1, 5, 3, 8, 8)))


class TestParameterGroups:
    """New versus pretrained parameters."""

    def test_groups_partition_parameters(self):
        """Test that every parameter belongs to exactly one group."""
        model = DepthModel(small_model_config())
        new = {id(p) for m in model.new_modules() for p in m.parameters()}
        old = {id(p) for m in model.pretrained_modules() for p in m.parameters()}
        assert not new & old
        assert new | old == {id(p) for p in model.parameters()}

    def test_backward_reaches_every_group(self, rng):
        """Test that a disparity loss produces gradients in encoder, GEM and transformer."""
        model = DepthModel(small_model_config())
        out = model(_images(rng, b=1))
        T.tensor_sum(out.disparity).backward()
        assert model.encoder.embed.weight.grad is not None
        assert model.gem.pose_head.weight.grad is not None
        assert model.astt.blocks[0].temporal.attn.q.weight.grad is not None

    def test_frozen_gem_gets_no_gradient(self, rng):
        """Test that freezing GEM keeps its parameters out of the backward pass."""
        model = DepthModel(small_model_config())
        model.gem.freeze()
        T.tensor_sum(model(_images(rng, b=1)).disparity).backward()
        assert all(p.grad is None for p in model.gem.parameters())
        assert model.decoder.head.fc2.weight.grad is not None
