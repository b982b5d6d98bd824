"""Two-stage training loop.

Stage 1 supervises depth and camera poses jointly. Stage 2 starts from a
stage-1 checkpoint, freezes GEM and trains the rest on depth alone without
reading any pose labels.
"""

from __future__ import annotations

import logging
import queue
import threading
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from tqdm import tqdm

from src.videodepth.checkpoint import (
    load_checkpoint,
    mark_latest,
    restore_optimizer,
    save_checkpoint,
)
from src.videodepth.config import EvalConfig, TrainConfig, train_config_to_dict
from src.videodepth.errors import CheckpointError, ContractError, NonFiniteError
from src.videodepth.logs import StepLogger
from src.videodepth.losses import total_loss
from src.videodepth.model import DepthModel
from src.videodepth.optim import AdamW, ParamGroup, clip_grad_norm
from src.videodepth.synthdata import (
    ClipBatch,
    VideoClip,
    batch_clips,
    list_clips,
    load_clip,
    multires_crop,
    multires_targets,
)

logger = logging.getLogger(__name__)

NEW_GROUP = "new"
PRETRAINED_GROUP = "pretrained"
NEW_MODULE_PREFIXES = ("gem.", "astt.")
PLACEMENT_ORDER = ("early", "mid", "late")


def batch_schedule(num_clips: int, batch_size: int, steps: int, seed: int) -> list[list[int]]:
    """Clip indices for every step, drawn from seeded per-epoch permutations.

    The schedule depends only on its arguments, so a resumed run continues
    with exactly the batches the uninterrupted run would have seen.
    """
    if num_clips < 1:
        raise ContractError("Cannot build a batch schedule without clips")
    rng = np.random.default_rng(seed)
    needed = steps * batch_size
    order: list[int] = []
    while len(order) < needed:
        order.extend(int(i) for i in rng.permutation(num_clips))
    return [order[s * batch_size : (s + 1) * batch_size] for s in range(steps)]


class ClipPrefetcher:
    """Load and batch clips on a worker thread, ahead of the training loop.

    Batches come out in schedule order through a bounded queue. Clips are
    read from disk once and cached.

    Args:
        paths: Clip directories
        schedule: Per-step clip indices into ``paths``
        make_batch: Turns the loaded clips of one step into a batch
        depth: Queue capacity
        with_poses: Read pose manifests (False in stage 2)
        start: First schedule entry to produce
    """

    _DONE = object()

    def __init__(
        self,
        paths: Sequence[Path],
        schedule: Sequence[Sequence[int]],
        make_batch: Callable[[list[VideoClip], int], ClipBatch],
        depth: int = 2,
        with_poses: bool = True,
        start: int = 0,
    ):
        self.paths = list(paths)
        self.schedule = schedule
        self.make_batch = make_batch
        self.with_poses = with_poses
        self.start = start
        self._cache: dict[int, VideoClip] = {}
        self._queue: queue.Queue = queue.Queue(maxsize=depth)
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def _clip(self, index: int) -> VideoClip:
        if index not in self._cache:
            self._cache[index] = load_clip(self.paths[index], with_poses=self.with_poses)
        return self._cache[index]

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _work(self):
        try:
            for step in range(self.start, len(self.schedule)):
                clips = [self._clip(i) for i in self.schedule[step]]
                if not self._put((step, self.make_batch(clips, step))):
                    return
        except Exception as e:  # handed to the consumer
            self._put(e)
            return
        self._put(self._DONE)

    def __iter__(self) -> Iterator[tuple[int, ClipBatch]]:
        if self._thread is None:
            self._thread = threading.Thread(target=self._work, name="clip-prefetch", daemon=True)
            self._thread.start()
        while True:
            item = self._queue.get()
            if item is self._DONE:
                return
            if isinstance(item, Exception):
                raise item
            yield item

    def close(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5.0)

    def __enter__(self) -> ClipPrefetcher:
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class TrainResult:
    """Outcome of a training run.

    Attributes:
        run_dir: Directory holding checkpoints and ``steps.jsonl``
        checkpoint: Last checkpoint written
        step: Optimizer steps completed
        losses: Total loss per step run in this session
    """

    run_dir: Path
    checkpoint: Path | None
    step: int
    losses: list[float] = field(default_factory=list)


class Trainer:
    """Builds the model and optimizer for a run and steps through it.

    Args:
        cfg: Run settings
        workdir: Base for the relative paths in ``cfg``
        resume: Checkpoint (or run directory) to continue from
        progress: Show a tqdm bar
    """

    def __init__(
        self,
        cfg: TrainConfig,
        workdir: str | Path = ".",
        resume: str | Path | None = None,
        progress: bool = True,
    ):
        self.cfg = cfg
        self.workdir = Path(workdir)
        self.run_dir = self.workdir / cfg.run_dir
        self.progress = progress
        self.step = 0

        resume_ckpt = load_checkpoint(self._path(resume)) if resume is not None else None
        if resume_ckpt is not None:
            if resume_ckpt.stage != cfg.stage:
                raise ContractError(
                    f"Cannot resume a stage-{resume_ckpt.stage} checkpoint as stage {cfg.stage}"
                )
            self.model = resume_ckpt.build_model()
            self.step = resume_ckpt.step
        elif cfg.init_checkpoint is not None:
            self.model = load_checkpoint(self._path(cfg.init_checkpoint)).build_model()
        elif cfg.stage == 2:
            raise CheckpointError("Stage 2 needs a stage-1 checkpoint (set init_checkpoint)")
        else:
            self.model = DepthModel(cfg.model)

        astt_cfg = replace(self.model.cfg.astt, pose_integration_prob=cfg.gate_probability)
        self.model.cfg = replace(self.model.cfg, astt=astt_cfg)
        self.model.astt.cfg = astt_cfg
        if cfg.stage == 2:
            if self.model.gem is None:
                logger.warning("stage 2 with GEM disabled: nothing to freeze")
            else:
                self.model.gem.freeze()

        self.optimizer = AdamW(self._param_groups())
        if resume_ckpt is not None:
            restore_optimizer(self.optimizer, resume_ckpt)
        logger.info(
            "stage %d: %d parameters, gate probability %.2f, starting at step %d",
            cfg.stage,
            self.model.num_parameters(),
            cfg.gate_probability,
            self.step,
        )

    def _path(self, path: str | Path) -> Path:
        path = Path(path)
        return path if path.is_absolute() else self.workdir / path

    def _param_groups(self) -> list[ParamGroup]:
        new, pretrained = [], []
        for name, p in self.model.named_parameters():
            (new if name.startswith(NEW_MODULE_PREFIXES) else pretrained).append((name, p))
        return [
            ParamGroup(NEW_GROUP, new, self.cfg.lr_new, self.cfg.weight_decay),
            ParamGroup(PRETRAINED_GROUP, pretrained, self.cfg.lr_pretrained, self.cfg.weight_decay),
        ]

    @property
    def uses_poses(self) -> bool:
        """Pose labels are read and supervised only in stage 1."""
        return self.cfg.stage == 1

    def make_batch(self, clips: list[VideoClip], step: int) -> ClipBatch:
        if self.cfg.crop_size > 0:
            rng = np.random.default_rng([self.cfg.seed, step, 2])
            targets = multires_targets(self.cfg.crop_size, self.model.cfg.patch_size)
            target = targets[int(rng.integers(len(targets)))]
            clips = [multires_crop(c, target, self.cfg.crop_size) for c in clips]
        return batch_clips(clips, self.cfg.clip_len, with_poses=self.uses_poses)

    def train_step(self, batch: ClipBatch, step: int) -> tuple[float, dict[str, float], float]:
        """One optimizer step.

        Returns:
            Total loss, per-term losses, gradient norm before clipping
        """
        self.model.train()
        self.optimizer.zero_grad()
        out = self.model(batch.images, rng=np.random.default_rng([self.cfg.seed, step, 1]))
        pred_poses = gt_poses = None
        if self.uses_poses and out.has_poses and batch.has_poses:
            pred_poses = (out.q, out.t)
            gt_poses = (batch.q, batch.t)
        losses = total_loss(
            out.disparity, batch.disp, batch.mask, self.cfg.loss, pred_poses, gt_poses
        )
        total = losses.total.item()
        if not np.isfinite(total):
            raise NonFiniteError(
                f"Non-finite loss {total} at step {step} (terms {losses.terms}); "
                f"last good checkpoint is kept in {self.run_dir}"
            )
        losses.total.backward()
        grad_norm = clip_grad_norm(self.model.parameters(), self.cfg.grad_clip)
        self.optimizer.step()
        return total, losses.terms, grad_norm

    def save(self) -> Path:
        path = self.run_dir / "checkpoints" / f"step_{self.step:06d}"
        save_checkpoint(
            path,
            self.model,
            self.step,
            self.cfg.stage,
            self.optimizer,
            extra={"train": train_config_to_dict(self.cfg)},
        )
        mark_latest(self.run_dir, path)
        return path

    def run(self) -> TrainResult:
        paths = list_clips(self._path(self.cfg.data_dir))
        if self.cfg.max_clips:
            paths = paths[: self.cfg.max_clips]
        if not paths:
            raise ContractError(f"No clips found under {self._path(self.cfg.data_dir)}")
        schedule = batch_schedule(len(paths), self.cfg.batch_size, self.cfg.steps, self.cfg.seed)
        losses: list[float] = []
        checkpoint = None
        bar = tqdm(
            total=self.cfg.steps,
            initial=self.step,
            desc=f"Stage {self.cfg.stage}",
            disable=not self.progress,
        )
        prefetcher = ClipPrefetcher(
            paths, schedule, self.make_batch, self.cfg.prefetch, self.uses_poses, start=self.step
        )
        with StepLogger(self.run_dir) as step_log, prefetcher:
            for step, batch in prefetcher:
                total, terms, grad_norm = self.train_step(batch, step)
                self.step = step + 1
                losses.append(total)
                step_log.log(
                    step,
                    self.cfg.stage,
                    total,
                    terms,
                    self.cfg.lr_new,
                    self.cfg.lr_pretrained,
                    grad_norm,
                    clips=batch.clip_ids,
                )
                bar.update(1)
                bar.set_postfix(loss=f"{total:.4f}", grad=f"{grad_norm:.2f}")
                if self.step % self.cfg.checkpoint_every == 0:
                    checkpoint = self.save()
        bar.close()
        if checkpoint is None or self.step % self.cfg.checkpoint_every != 0:
            checkpoint = self.save()
        return TrainResult(self.run_dir, checkpoint, self.step, losses)


def train(
    cfg: TrainConfig,
    workdir: str | Path = ".",
    resume: str | Path | None = None,
    progress: bool = True,
) -> TrainResult:
    """Run (or resume) a training stage and return where its checkpoint went."""
    return Trainer(cfg, workdir, resume, progress).run()


@dataclass
class PlacementResult:
    placement: str
    seed: int
    absrel: float
    delta1: float
    tae: float | None
    checkpoint: Path


def ablate_placement(
    cfg: TrainConfig,
    workdir: str | Path = ".",
    seeds: Sequence[int] = (0, 1, 2),
    steps: int | None = None,
    eval_dir: str | None = None,
    progress: bool = True,
) -> list[PlacementResult]:
    """Train early, mid and late ASTT variants from scratch and score each.

    Every variant runs stage 1 with the same data and seed; only the
    transformer's position differs.
    """
    from src.videodepth.evaluate import evaluate_directory

    workdir = Path(workdir)
    results = []
    for seed in seeds:
        for placement in PLACEMENT_ORDER:
            model_cfg = replace(cfg.model, astt=replace(cfg.model.astt, placement=placement))
            variant = replace(
                cfg,
                stage=1,
                seed=seed,
                steps=cfg.steps if steps is None else steps,
                init_checkpoint=None,
                run_dir=f"{cfg.run_dir}/ablate/{placement}_seed{seed}",
                model=model_cfg,
            )
            logger.info("placement %s, seed %d", placement, seed)
            outcome = train(variant, workdir, progress=progress)
            evaluation = evaluate_directory(
                workdir / (eval_dir or cfg.data_dir),
                EvalConfig(metrics=("absrel", "delta1", "tae"), seed=seed),
                checkpoint=outcome.checkpoint,
                max_clips=cfg.max_clips,
                progress=False,
            )
            mean = evaluation.mean
            results.append(
                PlacementResult(
                    placement, seed, mean.absrel, mean.delta1, mean.tae, outcome.checkpoint
                )
            )
    return results


def placement_ordering_holds(results: Sequence[PlacementResult], seed: int) -> bool:
    """True when AbsRel is non-decreasing from early to mid to late for ``seed``."""
    by_placement = {r.placement: r.absrel for r in results if r.seed == seed}
    values = [by_placement[p] for p in PLACEMENT_ORDER]
    return all(a <= b for a, b in zip(values, values[1:], strict=False))


def format_placement_table(results: Sequence[PlacementResult]) -> str:
    """Per-placement means over seeds."""
    lines = [f"{'placement':<10}  {'AbsRel':>8}  {'δ1':>8}  {'TAE':>8}  seeds", "-" * 46]
    for placement in PLACEMENT_ORDER:
        rows = [r for r in results if r.placement == placement]
        if not rows:
            continue
        taes = [r.tae for r in rows if r.tae is not None]
        tae = f"{np.mean(taes):>8.4f}" if taes else f"{'-':>8}"
        lines.append(
            f"{placement:<10}  {np.mean([r.absrel for r in rows]):>8.4f}  "
            f"{np.mean([r.delta1 for r in rows]):>8.4f}  {tae}  {len(rows)}"
        )
    return "\n".join(lines)
