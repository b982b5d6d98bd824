"""Tests for the training objectives."""

import logging

import numpy as np
import pytest

from src.videodepth import tensor as T
from src.videodepth.config import LossWeights
from src.videodepth.errors import ContractError, ShapeError
from src.videodepth.geometry import Pose, canonicalize
from src.videodepth.losses import (
    align_disparity,
    camera_loss,
    combine_losses,
    gm_loss,
    ssi_loss,
    tgm_loss,
    total_loss,
)
from src.videodepth.tensor import Tensor


@pytest.fixture
def gt_disp(rng):
    """Two clips of three 8x8 frames of positive disparity."""
    return rng.uniform(0.2, 2.0, size=(2, 3, 8, 8))


class TestAlignment:
    """Closed-form per-frame scale and shift."""

    def test_recovers_affine_map(self, gt_disp):
        """Test that pred = (gt - b) / a aligns back with scale a and shift b."""
        with T.precision("float64"):
            pred = Tensor((gt_disp - 0.3) / 4.0)
            al = align_disparity(pred, gt_disp)
        np.testing.assert_allclose(al.scale.data, 4.0, rtol=1e-9)
        np.testing.assert_allclose(al.shift.data, 0.3, atol=1e-9)
        np.testing.assert_allclose(al.aligned.data.reshape(gt_disp.shape), gt_disp, atol=1e-9)

    def test_skips_sparse_and_constant_frames(self, gt_disp, caplog):
        """Test that frames without signal are skipped with a warning."""
        mask = np.ones(gt_disp.shape, dtype=bool)
        mask[0, 0] = False
        pred = gt_disp.copy()
        pred[0, 1] = 1.0
        with caplog.at_level(logging.WARNING), T.precision("float64"):
            al = align_disparity(Tensor(pred), gt_disp, mask)
        assert list(al.used) == [False, False, True, True, True, True]
        assert not al.mask[:2].any()
        assert "valid pixels" in caplog.text
        assert "constant prediction" in caplog.text

    def test_shape_mismatch(self, gt_disp):
        """Test that prediction and ground truth shapes must agree."""
        with pytest.raises(ShapeError, match="does not match"):
            align_disparity(Tensor(gt_disp[:, :2]), gt_disp)


class TestDepthLosses:
    """SSI, gradient matching and temporal gradient matching."""

    @pytest.mark.parametrize("a", [0.1, 1.0, 10.0])
    @pytest.mark.parametrize("b", [-1.0, 0.0, 1.0])
    def test_affine_invariance(self, rng, gt_disp, a, b):
        """Test that every depth term ignores a per-clip affine change of the prediction."""
        base = rng.uniform(0.1, 3.0, size=gt_disp.shape)
        with T.precision("float64"):
            losses = []
            for pred in (base, a * base + b):
                p = Tensor(pred)
                losses.append(
                    [
                        ssi_loss(p, gt_disp).item(),
                        gm_loss(p, gt_disp, scales=2).item(),
                        tgm_loss(p, gt_disp).item(),
                    ]
                )
        np.testing.assert_allclose(losses[0], losses[1], rtol=1e-7)

    def test_perfect_prediction_is_zero(self, gt_disp):
        """Test that an affinely exact prediction has zero loss."""
        with T.precision("float64"):
            pred = Tensor(2.0 * gt_disp + 5.0)
            breakdown = total_loss(pred, gt_disp, None, LossWeights(gm_scales=2))
        for name, value in breakdown.terms.items():
            assert value == pytest.approx(0.0, abs=1e-9), name

    def test_trimming_drops_outliers(self, gt_disp):
        """Test that trimming removes the largest residuals from the SSI loss."""
        pred = gt_disp.copy()
        pred[0, 0, 0, 0] += 50.0
        with T.precision("float64"):
            full = ssi_loss(Tensor(pred), gt_disp).item()
            trimmed = ssi_loss(Tensor(pred), gt_disp, trim_fraction=0.2).item()
        assert trimmed < full

    def test_ssi_needs_one_usable_frame(self, gt_disp):
        """Test that an all-skipped batch is a contract violation."""
        mask = np.zeros(gt_disp.shape, dtype=bool)
        with pytest.raises(ContractError, match="every frame was skipped"):
            ssi_loss(Tensor(gt_disp), gt_disp, mask)

    def test_tgm_single_frame_is_zero(self, gt_disp, caplog):
        """Test that a one-frame clip contributes no temporal term."""
        with caplog.at_level(logging.WARNING):
            out = tgm_loss(Tensor(gt_disp[:, :1] * 3.0), gt_disp[:, :1])
        assert out.item() == 0.0
        assert "temporal term is 0" in caplog.text

    def test_tgm_penalizes_flicker(self, gt_disp):
        """Test that flicker between frames raises the temporal term."""
        pred = gt_disp.copy()
        pred[:, 1] += 0.5 * (pred[:, 1] > 1.0)
        with T.precision("float64"):
            assert tgm_loss(Tensor(pred), gt_disp).item() > 1e-3

    def test_gm_warns_when_frames_too_small(self, caplog):
        """Test that scales beyond the frame size are dropped with a warning."""
        gt = np.linspace(0.5, 1.5, 2 * 2 * 4 * 4).reshape(2, 2, 4, 4)
        with caplog.at_level(logging.WARNING):
            gm_loss(Tensor(gt), gt, scales=4)
        assert "2 of 4 scales" in caplog.text


class TestCameraLoss:
    """Huber pose loss."""

    def test_zero_on_ground_truth(self, rng, random_poses):
        """Test cam(gt, gt) = 0."""
        poses = canonicalize(random_poses(4, rng)).poses
        assert camera_loss(poses, poses).item() == pytest.approx(0.0, abs=1e-7)

    def test_quaternion_sign_does_not_matter(self, rng, random_poses):
        """Test that q and -q give the same loss."""
        gt = canonicalize(random_poses(4, rng)).poses
        q = np.stack([p.q for p in gt])
        t = np.stack([p.t for p in gt])
        flipped = q.copy()
        flipped[2] *= -1.0
        with T.precision("float64"):
            loss = camera_loss((Tensor(flipped), Tensor(t)), (q, t))
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_half_turn_sign_does_not_matter(self):
        """Test sign invariance for a 180 degree rotation, where w is zero."""
        q = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
        t = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        flipped = q.copy()
        flipped[1] *= -1.0
        with T.precision("float64"):
            loss = camera_loss((Tensor(flipped), Tensor(t)), (q, t))
            swapped = camera_loss((Tensor(q), Tensor(t)), (flipped, t))
        assert loss.item() == pytest.approx(0.0, abs=1e-12)
        assert swapped.item() == pytest.approx(0.0, abs=1e-12)

    def test_translation_weight(self, rng, random_poses):
        """Test that lam scales only the translation residual."""
        gt = canonicalize(random_poses(3, rng)).poses
        q = np.stack([p.q for p in gt])
        t = np.stack([p.t for p in gt])
        shifted = t.copy()
        shifted[1] += 0.1
        with T.precision("float64"):
            one = camera_loss((Tensor(q), Tensor(shifted)), (q, t), lam=1.0).item()
            two = camera_loss((Tensor(q), Tensor(shifted)), (q, t), lam=2.0).item()
        assert two == pytest.approx(2.0 * one, rel=1e-9)
        assert one == pytest.approx(3 * 0.5 * 0.1**2 / 3, rel=1e-9)

    def test_rejects_non_canonical(self, rng, random_poses):
        """Test that a trajectory not starting at the identity is refused."""
        poses = random_poses(3, rng)
        with pytest.raises(ContractError, match="not canonical"):
            camera_loss(poses, poses)
        loose = camera_loss(poses, poses, require_canonical=False)
        assert loose.item() == pytest.approx(0.0, abs=1e-6)

    def test_shape_mismatch(self, rng, random_poses):
        """Test that pose counts must match."""
        poses = canonicalize(random_poses(3, rng)).poses
        with pytest.raises(ShapeError, match="camera_loss"):
            camera_loss(poses, poses[:2])


class TestCombination:
    """Weighted total of the terms."""

    def test_default_weights(self):
        """Test ssi + 0.5 gm + 10 tgm + 0.2 cam with every term 1."""
        total = combine_losses({"ssi": 1.0, "gm": 1.0, "tgm": 1.0, "cam": 1.0}, LossWeights())
        assert total == pytest.approx(11.7)

    def test_missing_camera_term(self):
        """Test that a stage without pose labels just drops the camera term."""
        total = combine_losses({"ssi": 1.0, "gm": 1.0, "tgm": 1.0}, LossWeights())
        assert total == pytest.approx(11.5)

    def test_unknown_term(self):
        """Test that misspelled terms are rejected."""
        with pytest.raises(ContractError, match="Unknown loss terms"):
            combine_losses({"ssi": 1.0, "depth": 2.0}, LossWeights())

    def test_pose_labels_need_predictions(self, gt_disp):
        """Test that ground-truth poses without predicted poses is an error."""
        q = np.tile([1.0, 0, 0, 0], (2, 3, 1))
        t = np.zeros((2, 3, 3))
        with pytest.raises(ContractError, match="predicted no poses"):
            total_loss(Tensor(gt_disp), gt_disp, None, LossWeights(gm_scales=2), None, (q, t))

    def test_camera_term_in_breakdown(self, gt_disp):
        """Test that pose labels add a cam entry to the breakdown."""
        q = np.tile([1.0, 0, 0, 0], (2, 3, 1))
        t = np.zeros((2, 3, 3))
        out = total_loss(
            Tensor(gt_disp), gt_disp, None, LossWeights(gm_scales=2), (Tensor(q), Tensor(t)), (q, t)
        )
        assert set(out.terms) == {"ssi", "gm", "tgm", "cam"}
        assert out.terms["cam"] == 0.0


def test_pose_objects_accepted():
    """Test that a list of Pose objects works as prediction."""
    poses = [Pose.identity(), Pose(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, 1.0]))]
    assert camera_loss(poses, poses).item() == 0.0
