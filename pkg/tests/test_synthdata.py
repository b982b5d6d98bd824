"""Tests for procedural clip generation, storage and batching."""

from dataclasses import replace

import numpy as np
import pytest

from src.videodepth.config import PrimitiveSpec, SceneSpec
from src.videodepth.errors import CheckpointError, ContractError, GenerationError
from src.videodepth.synthdata import (
    SKY_DEPTH,
    VideoClip,
    audit_clip,
    batch_clips,
    generate,
    generate_dataset,
    list_clips,
    load_clip,
    load_clips,
    multires_crop,
    multires_targets,
    random_multires_crop,
    postprocess,
    preprocess,
    save_clip,
)


@pytest.fixture
def wall_spec():
    """Camera dollying toward a fronto-parallel wall 3 units away."""
    wall = PrimitiveSpec("plane", (0.0, 0.0, 3.0), normal=(0.0, 0.0, -1.0))
    return SceneSpec(
        seed=0, num_frames=3, width=12, height=8, trajectory="dolly", motion=0.5, primitives=[wall]
    )


class TestGenerate:
    """Rendering and canonical poses."""

    def test_shapes_and_ranges(self, tiny_clip):
        """Test array layouts, dtypes and value ranges."""
        assert tiny_clip.images.shape == (4, 3, 16, 16)
        assert tiny_clip.images.dtype == np.float32
        assert tiny_clip.depth.shape == (4, 16, 16)
        assert tiny_clip.images.min() >= 0.0 and tiny_clip.images.max() <= 1.0
        assert tiny_clip.disp.min() >= 0.0 and tiny_clip.disp.max() <= 1.0
        assert np.all(tiny_clip.depth > 0)
        np.testing.assert_array_equal(tiny_clip.mask, ~tiny_clip.sky)
        assert len(tiny_clip.intrinsics) == 4

    def test_deterministic(self, tiny_spec):
        """Test that the same spec renders bit-identical clips."""
        a, b = generate(tiny_spec), generate(tiny_spec)
        assert a.images.tobytes() == b.images.tobytes()
        assert a.depth.tobytes() == b.depth.tobytes()

    def test_seed_changes_scene(self, tiny_spec):
        """Test that a different seed gives a different random layout."""
        a = generate(tiny_spec)
        b = generate(replace(tiny_spec, seed=tiny_spec.seed + 1))
        assert not np.array_equal(a.depth, b.depth)

    def test_poses_are_canonical(self, tiny_clip):
        """Test frame 0 identity and unit mean translation norm."""
        q, t = tiny_clip.pose_arrays()
        np.testing.assert_array_equal(q[0], [1.0, 0.0, 0.0, 0.0])
        np.testing.assert_array_equal(t[0], 0.0)
        assert not tiny_clip.static
        assert np.linalg.norm(t, axis=1).mean() == pytest.approx(1.0)
        metric = np.stack([p.t for p in tiny_clip.metric_poses()])
        np.testing.assert_allclose(metric, t * tiny_clip.pose_scale)

    def test_depth_is_z_depth(self, wall_spec):
        """Test that every pixel of a fronto-parallel wall has the same depth."""
        clip = generate(wall_spec)
        np.testing.assert_allclose(clip.depth[0], 3.0, rtol=1e-6)
        np.testing.assert_allclose(clip.depth[2], 2.5, rtol=1e-6)
        assert not clip.sky.any()

    def test_static_camera(self, wall_spec):
        """Test that a camera without motion is flagged static with scale 1."""
        clip = generate(replace(wall_spec, motion=0.0))
        assert clip.static
        assert clip.pose_scale == 1.0

    def test_sky_depth(self):
        """Test that escaping rays get the sky depth and leave the mask."""
        spec = SceneSpec(seed=1, num_frames=2, width=16, height=16, sky=True, back_wall=False)
        clip = generate(spec)
        assert clip.sky.any()
        np.testing.assert_array_equal(clip.depth[clip.sky], SKY_DEPTH)

    def test_escaping_rays_without_sky(self):
        """Test that an open scene without sky cannot be rendered."""
        ball = PrimitiveSpec("sphere", (0.0, 0.0, 5.0), (0.5,))
        spec = SceneSpec(num_frames=1, width=8, height=8, primitives=[ball], trajectory="dolly")
        with pytest.raises(GenerationError, match="escape"):
            generate(spec)


class TestDisparityNormalization:
    """preprocess / postprocess."""

    def test_round_trip(self, rng):
        """Test that depth survives normalization and its inverse."""
        depth = rng.uniform(1.0, 20.0, size=(2, 4, 4))
        disp, lo, hi = preprocess(depth)
        assert disp.min() == 0.0 and disp.max() == 1.0
        np.testing.assert_allclose(postprocess(disp, lo, hi), depth, rtol=1e-10)

    def test_constant_depth_maps_to_zero(self):
        """Test the zero-range case."""
        disp, lo, hi = preprocess(np.full((2, 2), 4.0))
        np.testing.assert_array_equal(disp, 0.0)
        assert lo == hi == 0.25

    def test_errors(self):
        """Test empty masks and nonpositive depth."""
        with pytest.raises(ContractError, match="empty"):
            preprocess(np.ones((2, 2)), np.zeros((2, 2), dtype=bool))
        with pytest.raises(ContractError, match="positive"):
            preprocess(np.array([1.0, -1.0]))


class TestMultiResolution:
    """Aspect-ratio crops."""

    def test_targets(self):
        """Test that every crop is a multiple of 8 tall and full width."""
        targets = multires_targets(64)
        assert targets[0] == (64, 64)
        assert all(h % 8 == 0 and w == 64 for h, w in targets)
        assert [h for h, _ in targets] == sorted((h for h, _ in targets), reverse=True)

    def test_center_crop(self, tiny_clip):
        """Test that a crop keeps the middle rows and shifts the principal point."""
        out = multires_crop(tiny_clip, (8, 16), short_edge=16)
        assert out.images.shape == (4, 3, 8, 16)
        np.testing.assert_array_equal(out.depth, tiny_clip.depth[:, 4:12])
        assert out.intrinsics[0].cy == pytest.approx(tiny_clip.intrinsics[0].cy - 4)
        assert out.disp.max() == pytest.approx(1.0)

    def test_resize_scales_focal_length(self, tiny_clip):
        """Test that doubling the short edge doubles the focal length."""
        out = multires_crop(tiny_clip, (32, 32), short_edge=32)
        assert out.resolution == (32, 32)
        assert out.intrinsics[0].fx == pytest.approx(2 * tiny_clip.intrinsics[0].fx)

    def test_random_crop_is_seeded(self, tiny_clip):
        """Test that one seed always picks the same target resolution."""
        a = random_multires_crop(tiny_clip, np.random.default_rng(5), short_edge=16)
        b = random_multires_crop(tiny_clip, np.random.default_rng(5), short_edge=16)
        assert a.resolution == b.resolution
        assert a.resolution in multires_targets(16)

    def test_crop_too_large(self, tiny_clip):
        """Test that a crop larger than the resized frame is refused."""
        with pytest.raises(ContractError, match="Cannot crop"):
            multires_crop(tiny_clip, (24, 16), short_edge=16)

    def test_enlarging_needs_scene_spec(self, tiny_clip):
        """Test that a clip without its spec cannot be enlarged."""
        with pytest.raises(ContractError, match="scene spec"):
            multires_crop(replace(tiny_clip, spec=None), (32, 32), short_edge=32)

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    @pytest.mark.parametrize("size", [(36, 48), (96, 128)])
    def test_crops_keep_warp_consistency(self, seed, size):
        """Test that every target crop, enlarged or shrunk, passes the warp audit."""
        h, w = size
        spec = SceneSpec(seed=seed, num_frames=4, width=w, height=h, trajectory="orbit")
        clip = generate(spec)
        for target in multires_targets(64):
            out = multires_crop(clip, target, short_edge=64)
            assert out.resolution == target
            assert audit_clip(out) < 0.02


class TestAudit:
    """Warp-consistency audit of ground truth."""

    def test_consistent_clip_passes(self, wall_spec):
        """Test that exact depth and poses pass the audit."""
        assert audit_clip(generate(wall_spec)) == pytest.approx(0.0, abs=1e-9)

    def test_corrupted_depth_fails(self, wall_spec):
        """Test that inconsistent depth is caught."""
        clip = generate(wall_spec)
        clip.depth[1] *= 1.5
        with pytest.raises(GenerationError, match="warp audit"):
            audit_clip(clip)

    def test_single_frame_is_trivially_consistent(self, wall_spec):
        """Test the one-frame case."""
        assert audit_clip(generate(replace(wall_spec, num_frames=1))) == 0.0


class TestStorage:
    """Clip directories on disk."""

    def test_round_trip(self, tiny_clip, tmp_path):
        """Test that a saved clip loads back with the same content."""
        path = save_clip(tiny_clip, tmp_path)
        out = load_clip(path)
        assert out.images.tobytes() == tiny_clip.images.tobytes()
        np.testing.assert_array_equal(out.mask, tiny_clip.mask)
        assert out.spec == tiny_clip.spec
        assert out.pose_scale == tiny_clip.pose_scale
        for a, b in zip(out.poses, tiny_clip.poses, strict=True):
            assert a.allclose(b, atol=1e-12)

    def test_load_without_poses(self, tiny_clip, tmp_path):
        """Test that pose labels can be withheld."""
        path = save_clip(tiny_clip, tmp_path)
        (path / "poses.txt").unlink()
        out = load_clip(path, with_poses=False)
        assert out.poses == []

    def test_missing_directories(self, tmp_path):
        """Test errors for absent data and non-clip directories."""
        with pytest.raises(CheckpointError, match="not found"):
            list_clips(tmp_path / "absent")
        with pytest.raises(CheckpointError, match="no meta.txt"):
            load_clip(tmp_path)
        with pytest.raises(CheckpointError, match="No clips"):
            load_clips(tmp_path)

    def test_malformed_meta(self, tiny_clip, tmp_path):
        """Test that a broken meta file is reported."""
        path = save_clip(tiny_clip, tmp_path)
        (path / "meta.txt").write_text('{"clip_id": 0}')
        with pytest.raises(CheckpointError, match="malformed"):
            load_clip(path)

    def test_generate_dataset(self, wall_spec, tmp_path):
        """Test seeds, ids and listing order of a generated dataset."""
        paths = generate_dataset(wall_spec, tmp_path / "d", count=2, progress=False)
        assert [p.name for p in paths] == ["clip_00000", "clip_00001"]
        assert list_clips(tmp_path / "d") == paths
        assert [c.spec.seed for c in load_clips(tmp_path / "d")] == [0, 1]
        assert len(load_clips(tmp_path / "d", max_clips=1)) == 1


class TestBatching:
    """Stacking clips into training batches."""

    def test_shapes_and_training_mask(self, tiny_spec):
        """Test stacked shapes and that sky counts for training."""
        clips = [generate(replace(tiny_spec, seed=s), clip_id=s) for s in (3, 4)]
        batch = batch_clips(clips)
        assert batch.images.shape == (2, 4, 3, 16, 16)
        assert batch.q.shape == (2, 4, 4)
        assert batch.clip_ids == [3, 4]
        np.testing.assert_array_equal(batch.mask[0], clips[0].mask | clips[0].sky)

    def test_truncation_recanonicalizes(self, tiny_clip):
        """Test that kept frames get their own scale factor."""
        batch = batch_clips([tiny_clip], clip_len=3)
        assert batch.images.shape[1] == 3
        assert np.linalg.norm(batch.t[0], axis=1).mean() == pytest.approx(1.0)

    def test_without_poses(self, tiny_clip):
        """Test that pose labels are omitted on request."""
        batch = batch_clips([tiny_clip], with_poses=False)
        assert not batch.has_poses

    def test_mismatched_clips(self, tiny_clip, tiny_spec):
        """Test that unequal resolutions are refused."""
        other = generate(replace(tiny_spec, width=8, height=8))
        with pytest.raises(ContractError, match="equal resolution"):
            batch_clips([tiny_clip, other])

    def test_poses_required_but_missing(self, tiny_clip):
        """Test that a clip loaded without labels cannot feed a pose batch."""
        unlabeled = VideoClip(**{**vars(tiny_clip), "poses": []})
        with pytest.raises(ContractError, match="without pose labels"):
            batch_clips([unlabeled])
        with pytest.raises(ContractError, match="at least one clip"):
            batch_clips([])
