"""Finite-difference gradient oracle and the per-module check suites."""

from __future__ import annotations

import logging
import time
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from src.videodepth import tensor as T
from src.videodepth.errors import ContractError
from src.videodepth.tensor import Tensor

logger = logging.getLogger(__name__)

PRIMITIVE_TOL = 1e-3
COMPOSITE_TOL = 1e-2
SUITES = ("tensor", "gem", "astt", "losses", "all")


@dataclass
class GradCheckReport:
    """Outcome of one finite-difference comparison."""

    name: str
    max_rel_error: float
    tolerance: float
    checked: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < self.tolerance

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (
            f"{status:4s} {self.name:32s} max rel err {self.max_rel_error:.2e} "
            f"(tol {self.tolerance:.0e}, {self.checked} entries)"
        )


def _scalar(value: Tensor) -> float:
    if value.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {value.shape}")
    return float(value.data.reshape(()))


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-3,
    tol: float = PRIMITIVE_TOL,
    name: str = "f",
    max_checks: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` at ``x`` with central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, 1e-5)``.

    Args:
        f: Scalar-valued function of one tensor
        x: Point of evaluation (its data is perturbed in place and restored)
        step: Finite-difference step ``h``
        tol: Pass threshold on the maximum relative error
        name: Label for the report
        max_checks: Check only this many randomly chosen entries
        rng: Generator for the entry subsample
    """
    if step <= 0:
        raise ContractError(f"Finite-difference step must be positive, got {step}")
    leaf = Tensor(x.data, requires_grad=True, dtype=x.dtype)
    out = f(leaf)
    _scalar(out)
    out.backward()
    analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad

    flat = leaf.data.reshape(-1)
    indices = np.arange(flat.size)
    if max_checks is not None and max_checks < flat.size:
        rng = rng or np.random.default_rng(0)
        indices = rng.choice(flat.size, size=max_checks, replace=False)
    worst = 0.0
    with T.no_grad():
        for i in indices:
            original = flat[i]
            flat[i] = original + step
            plus = _scalar(f(leaf))
            flat[i] = original - step
            minus = _scalar(f(leaf))
            flat[i] = original
            numeric = (plus - minus) / (2 * step)
            a = float(analytic.reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-5)
            worst = max(worst, rel)
    return GradCheckReport(name, worst, tol, len(indices))


def check_parameters(
    loss_fn: Callable[[], Tensor],
    params: list[tuple[str, Tensor]],
    step: float = 1e-4,
    tol: float = COMPOSITE_TOL,
    samples: int = 16,
    rng: np.random.Generator | None = None,
) -> list[GradCheckReport]:
    """Finite-difference check of ``loss_fn`` against a few entries of each parameter."""
    rng = rng or np.random.default_rng(0)
    for _, p in params:
        p.grad = None
    out = loss_fn()
    _scalar(out)
    out.backward()
    reports = []
    for name, p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        idx = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
        worst = 0.0
        with T.no_grad():
            for i in idx:
                original = flat[i]
                flat[i] = original + step
                plus = _scalar(loss_fn())
                flat[i] = original - step
                minus = _scalar(loss_fn())
                flat[i] = original
                numeric = (plus - minus) / (2 * step)
                a = float(analytic.reshape(-1)[i])
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-5))
        reports.append(GradCheckReport(name, worst, tol, len(idx)))
    return reports


# ----------------------------------------------------------------------
# Suites
# ----------------------------------------------------------------------
def _tensor_suite(rng: np.random.Generator) -> list[GradCheckReport]:
    def rand(*shape, low=-1.0, high=1.0):
        return Tensor(rng.uniform(low, high, size=shape))

    a = rand(3, 4)
    b = rand(4, 2)
    w = rand(2, 3)
    idx = np.array([0, 2, 2, 1])
    gain = Tensor(rng.uniform(0.5, 1.5, size=8))
    bias = Tensor(rng.uniform(-0.5, 0.5, size=8))
    kv = rand(2, 5, 4)
    v = rand(2, 5, 4)

    cases: list[tuple[str, Callable[[Tensor], Tensor], Tensor]] = [
        ("matmul/left", lambda x: (T.matmul(x, b) * w.transpose()).sum(), a),
        ("matmul/right", lambda x: (T.matmul(a, x) * w.transpose()).sum(), b),
        ("add", lambda x: ((x + a) * a).sum(), rand(3, 4)),
        ("sub", lambda x: ((a - x) * a).sum(), rand(3, 4)),
        ("mul", lambda x: (x * x * a).sum(), rand(3, 4)),
        ("div", lambda x: (a / x).sum(), rand(3, 4, low=0.5, high=2.0)),
        ("pow", lambda x: (x**3).sum(), rand(5)),
        ("exp", lambda x: (T.exp(x) * a).sum(), rand(3, 4)),
        ("log", lambda x: T.log(x).sum(), rand(6, low=0.5, high=2.0)),
        ("sqrt", lambda x: T.sqrt(x).sum(), rand(6, low=0.5, high=2.0)),
        ("gelu", lambda x: (T.gelu(x) * a).sum(), rand(3, 4, low=-2, high=2)),
        ("softplus", lambda x: (T.softplus(x) * a).sum(), rand(3, 4, low=-3, high=3)),
        ("huber", lambda x: T.huber(x * 2.0, 1.0).sum(), rand(8, low=-1.4, high=1.4)),
        ("softmax", lambda x: (T.softmax(x, axis=-1) * a).sum(), rand(3, 4)),
        (
            "layernorm/x",
            lambda x: (T.layernorm(x, gain, bias) * Tensor(np.arange(8.0))).sum(),
            rand(8),
        ),
        ("layernorm/gain", lambda g: (T.layernorm(a[0:2, :].reshape(8), g, bias) ** 2).sum(), gain),
        (
            "reshape/transpose",
            lambda x: (T.transpose(T.reshape(x, (4, 3))) * w.reshape(3, 2)[:, 0:1]).sum(),
            rand(3, 4),
        ),
        ("concatenate", lambda x: (T.concatenate([x, a], axis=0) ** 2).mean(), rand(2, 4)),
        ("slice", lambda x: (x[1:, ::2] ** 2).sum(), rand(3, 4)),
        ("embedding", lambda x: (T.embedding(x, idx) ** 2).sum(), rand(3, 5)),
        ("mean", lambda x: (x.mean(axis=1) ** 2).sum(), rand(3, 4)),
        (
            "attention",
            lambda x: (T.scaled_dot_product_attention(x, kv, v) * v).sum(),
            rand(2, 5, 4),
        ),
    ]
    return [grad_check(f, x, step=1e-5, tol=PRIMITIVE_TOL, name=name) for name, f, x in cases]


def small_model_config(placement: str = "early", use_gem: bool = True):
    """A model small enough for finite differences and fast tests."""
    from src.videodepth.config import ASTTConfig, ModelConfig

    return ModelConfig(
        patch_size=4,
        embed_dim=16,
        encoder_layers=4,
        encoder_heads=2,
        tap_layers=(1, 2, 3, 4),
        decoder_channels=8,
        gem_layers=2,
        gem_heads=2,
        max_frames=4,
        use_gem=use_gem,
        astt=ASTTConfig(num_blocks=1, heads=2, head_dim=4, placement=placement),
    )


def _gem_suite(rng: np.random.Generator) -> list[GradCheckReport]:
    from src.videodepth.gem import (
        GeometryEmbedding,
        PoseEncoder,
        canonicalize_poses,
        normalize_quat,
    )

    gem = GeometryEmbedding(8, 2, 2, np.random.default_rng(1)).to(np.float64)
    # off the zero init, so the canonicalization path carries gradient
    gem.pose_head.weight.data = rng.normal(0, 0.3, gem.pose_head.weight.shape)
    features = Tensor(rng.normal(size=(4, 3, 8)))
    projection = Tensor(rng.normal(size=(4, 3, 8)))

    def gem_objective(x: Tensor) -> Tensor:
        out = gem(x, 2)
        return (out.fused * projection).sum() + out.t.sum()

    reports = [
        grad_check(gem_objective, features, step=1e-5, tol=COMPOSITE_TOL, name="gem/features")
    ]

    q = Tensor(rng.normal(size=(2, 3, 4)))
    t = Tensor(rng.normal(size=(2, 3, 3)))
    identity = Tensor(np.tile([1.0, 0.0, 0.0, 0.0], (2, 3, 1)))

    def canon_q(x: Tensor) -> Tensor:
        qc, tc, _, _ = canonicalize_poses(normalize_quat(x), t)
        return (qc * qc[..., 0:1]).sum() + (tc**2).sum()

    def canon_t(x: Tensor) -> Tensor:
        _, tc, _, _ = canonicalize_poses(identity, x)
        return (tc * t).sum()

    reports.append(grad_check(canon_q, q, step=1e-6, tol=COMPOSITE_TOL, name="gem/canonicalize q"))
    reports.append(grad_check(canon_t, t, step=1e-6, tol=COMPOSITE_TOL, name="gem/canonicalize t"))

    encoder = PoseEncoder(8, np.random.default_rng(2)).to(np.float64)
    qn = Tensor(np.tile([1.0, 0.0, 0.0, 0.0], (3, 1)))
    zn = Tensor(np.full((3, 1), 1.7))
    weights = Tensor(rng.normal(size=(3, 8)))
    reports.append(
        grad_check(
            lambda x: (encoder(qn, x, zn) * weights).sum(),
            Tensor(rng.normal(size=(3, 3))),
            step=1e-6,
            name="gem/pose encoder",
        )
    )

    params = [
        (n, p)
        for n, p in gem.named_parameters()
        if n.startswith(("pose_head", "encoder.project", "camera_token"))
    ]
    def fused_objective() -> Tensor:
        return (gem(features, 2).fused * projection).sum()

    for r in check_parameters(fused_objective, params, step=1e-5, rng=rng):
        r.name = f"gem/param {r.name}"
        reports.append(r)
    return reports


def _astt_suite(rng: np.random.Generator) -> list[GradCheckReport]:
    from src.videodepth.astt import AlternatingTransformer
    from src.videodepth.config import ASTTConfig

    cfg = ASTTConfig(num_blocks=1, heads=2, head_dim=4)
    astt = AlternatingTransformer(8, cfg, 6, 4, np.random.default_rng(3)).to(np.float64)
    for p in astt.parameters():
        if not np.any(p.data):
            p.data = rng.normal(0, 0.1, p.shape)
    x = Tensor(rng.normal(size=(2, 16, 8)))
    cam = Tensor(rng.normal(size=(2, 6)))
    projection = Tensor(rng.normal(size=(2, 16, 8)))
    gate = np.array([True])
    reports = [
        grad_check(
            lambda v: (astt(v, 2, (4, 4), cam, gate) * projection).sum(),
            x,
            step=1e-5,
            tol=COMPOSITE_TOL,
            name="astt/features",
            max_checks=48,
            rng=rng,
        ),
        grad_check(
            lambda c: (astt(x, 2, (4, 4), c, gate) * projection).sum(),
            cam,
            step=1e-5,
            tol=COMPOSITE_TOL,
            name="astt/camera feature",
        ),
    ]
    return reports


def _losses_suite(rng: np.random.Generator) -> list[GradCheckReport]:
    from src.videodepth.config import LossWeights
    from src.videodepth.losses import camera_loss, gm_loss, ssi_loss, tgm_loss, total_loss

    gt = rng.uniform(0.1, 1.0, size=(2, 8, 8))
    mask = rng.random((2, 8, 8)) > 0.1
    pred = Tensor(rng.uniform(0.1, 1.0, size=(2, 8, 8)))
    q_gt = np.tile([1.0, 0, 0, 0], (1, 2, 1))
    t_gt = np.array([[[0.0, 0, 0], [0.8, -0.2, 0.4]]])
    q_pred = Tensor(np.array([[[1.0, 0, 0, 0], [0.95, 0.1, -0.2, 0.05]]]))
    t_pred = Tensor(np.array([[[0.0, 0, 0], [0.3, 0.4, 1.9]]]))
    weights = LossWeights()

    def with_poses(x):
        return total_loss(
            T.reshape(x, (1, 2, 8, 8)),
            gt[None],
            mask[None],
            weights,
            (q_pred, t_pred),
            (q_gt, t_gt),
        ).total

    cases = [
        ("losses/ssi", lambda x: ssi_loss(x, gt, mask), pred),
        ("losses/gm", lambda x: gm_loss(x, gt, mask), pred),
        ("losses/tgm", lambda x: tgm_loss(x, gt, mask), pred),
        ("losses/camera q", lambda x: camera_loss((x, t_pred), (q_gt, t_gt)), q_pred),
        ("losses/camera t", lambda x: camera_loss((q_pred, x), (q_gt, t_gt)), t_pred),
        ("losses/total", with_poses, pred),
    ]
    reports = [grad_check(f, x, step=1e-6, tol=COMPOSITE_TOL, name=name) for name, f, x in cases]

    from src.videodepth.model import DepthModel

    model = DepthModel(small_model_config()).to(np.float64)
    model.gem.pose_head.weight.data = rng.normal(0, 0.1, model.gem.pose_head.weight.shape)
    images = rng.uniform(size=(1, 2, 3, 16, 16))
    clip_gt = rng.uniform(0.1, 1.0, size=(1, 2, 16, 16))
    t_clip = np.array([[[0.0, 0, 0], [1.0, 0.5, -0.3]]])
    t_clip[0, 1] /= np.linalg.norm(t_clip[0, 1]) / 2

    def model_loss():
        out = model(images, gate_override=True)
        poses = (out.q, out.t)
        return total_loss(out.disparity, clip_gt, None, weights, poses, (q_gt, t_clip)).total

    checked = ("decoder.head.fc2.weight", "encoder.embed.weight", "gem.pose_head.weight")
    params = [(n, p) for n, p in model.named_parameters() if n.endswith(checked)]
    for r in check_parameters(model_loss, params, step=1e-5, rng=rng):
        r.name = f"losses/L_total {r.name}"
        reports.append(r)
    return reports


_SUITES = {
    "tensor": _tensor_suite,
    "gem": _gem_suite,
    "astt": _astt_suite,
    "losses": _losses_suite,
}


def run_suite(name: str = "all", seed: int = 0) -> list[GradCheckReport]:
    """Run one named suite (or all of them) in float64."""
    if name not in SUITES:
        raise ContractError(f"Unknown gradcheck suite {name!r}; choose from {SUITES}")
    names = list(_SUITES) if name == "all" else [name]
    reports: list[GradCheckReport] = []
    with T.precision("float64"):
        for suite in names:
            start = time.perf_counter()
            results = _SUITES[suite](np.random.default_rng(seed))
            elapsed = time.perf_counter() - start
            logger.info("gradcheck %s: %d checks in %.1fs", suite, len(results), elapsed)
            reports.extend(results)
    return reports
