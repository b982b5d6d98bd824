"""Tests for the finite-difference gradient oracle."""

import numpy as np
import pytest

from src.videodepth import tensor as T
from src.videodepth.errors import ContractError
from src.videodepth.gradcheck import SUITES, grad_check, run_suite
from src.videodepth.tensor import Tensor


class TestGradCheck:
    def test_correct_gradient_passes(self, rng):
        """Test that a tape gradient matches central differences."""
        x = Tensor(rng.normal(size=(3, 4)), dtype="float64")
        with T.precision("float64"):
            report = grad_check(lambda v: (v * v * 3.0).sum(), x, step=1e-5)
        assert report.passed
        assert report.checked == 12
        assert x.grad is None

    def test_wrong_gradient_fails(self, rng):
        """Test that a gradient lost through a detached factor is caught."""
        x = Tensor(rng.uniform(0.5, 1.5, size=5), dtype="float64")
        with T.precision("float64"):
            report = grad_check(lambda v: (v * Tensor(v.data.copy())).sum(), x, step=1e-5)
        assert not report.passed
        assert report.max_rel_error == pytest.approx(0.5, rel=1e-3)
        assert "FAIL" in str(report)

    def test_subsampled_entries(self, rng):
        """Test that max_checks limits the compared entries."""
        x = Tensor(rng.normal(size=20), dtype="float64")
        report = grad_check(lambda v: (v**2).sum(), x, max_checks=5, rng=rng)
        assert report.checked == 5

    def test_contract_errors(self, rng):
        """Test non-scalar outputs and nonpositive steps."""
        x = Tensor(rng.normal(size=3))
        with pytest.raises(ContractError, match="scalar-valued"):
            grad_check(lambda v: v * 2.0, x)
        with pytest.raises(ContractError, match="positive"):
            grad_check(lambda v: v.sum(), x, step=0.0)


class TestSuites:
    """Per-module check suites."""

    def test_tensor_suite_passes(self):
        """Test every primitive backward rule."""
        reports = run_suite("tensor")
        failed = [str(r) for r in reports if not r.passed]
        assert not failed, "\n".join(failed)
        assert len(reports) > 20

    @pytest.mark.slow
    @pytest.mark.parametrize("suite", ["gem", "astt", "losses"])
    def test_composite_suites_pass(self, suite):
        """Test the composite modules end to end."""
        failed = [str(r) for r in run_suite(suite) if not r.passed]
        assert not failed, "\n".join(failed)

    def test_unknown_suite(self):
        """Test that suite names are validated."""
        assert "all" in SUITES
        with pytest.raises(ContractError, match="Unknown gradcheck suite"):
            run_suite("decoder")

    def test_runs_in_float64(self):
        """Test that the default dtype is restored after a suite."""
        run_suite("tensor")
        assert Tensor(np.ones(2)).dtype == np.float32
