"""Checkpoint directories: a JSON manifest plus one GEMT file per tensor.

Layout::

    <ckpt>/manifest.json
    <ckpt>/params/<parameter name>.gemt
    <ckpt>/optim/<parameter name>.m.gemt
    <ckpt>/optim/<parameter name>.v.gemt

A directory is written under a temporary name and renamed into place, so a
crash mid-write never replaces the last good checkpoint.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import shutil
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np

from src.videodepth.config import ModelConfig, model_config_from_dict
from src.videodepth.errors import CheckpointError
from src.videodepth.model import DepthModel
from src.videodepth.optim import AdamW
from src.videodepth.serialization import read_tensor, write_tensor

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
LATEST = "latest"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """Everything read back from a checkpoint directory."""

    path: Path
    step: int
    stage: int
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    frozen: list[str] = field(default_factory=list)
    optimizer: dict[str, Any] = field(default_factory=dict)
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def build_model(self) -> DepthModel:
        """Instantiate the model and load the stored parameters."""
        model = DepthModel(self.model_config)
        model.load_state_dict(self.params)
        return model


def save_checkpoint(
    directory: str | Path,
    model: DepthModel,
    step: int,
    stage: int,
    optimizer: AdamW | None = None,
    extra: dict[str, Any] | None = None,
) -> Path:
    """Write a checkpoint to ``directory`` (replacing it atomically)."""
    directory = Path(directory)
    tmp = directory.with_name(directory.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    params = model.state_dict()
    frozen = [name for name, m in (("gem", model.gem), ("astt", model.astt),
                                   ("encoder", model.encoder), ("decoder", model.decoder))
              if m is not None and m.frozen]
    manifest = {
        "format": FORMAT_VERSION,
        "step": step,
        "stage": stage,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "model": dataclasses.asdict(model.cfg),
        "params": {name: list(value.shape) for name, value in params.items()},
        "frozen": frozen,
        "optimizer": optimizer.hyperparameters() if optimizer is not None else None,
        "extra": extra or {},
    }
    for name, value in params.items():
        write_tensor(tmp / "params" / f"{name}.gemt", value)
    if optimizer is not None:
        for name in optimizer.m:
            write_tensor(tmp / "optim" / f"{name}.m.gemt", optimizer.m[name])
            write_tensor(tmp / "optim" / f"{name}.v.gemt", optimizer.v[name])
    tmp.mkdir(parents=True, exist_ok=True)
    (tmp / MANIFEST).write_text(json.dumps(manifest, indent=2))
    if directory.exists():
        shutil.rmtree(directory)
    tmp.rename(directory)
    logger.info("saved checkpoint %s (step %d, stage %d)", directory, step, stage)
    return directory


def mark_latest(run_dir: str | Path, checkpoint: str | Path):
    """Record ``checkpoint`` as the run's most recent good checkpoint."""
    Path(run_dir, LATEST).write_text(str(Path(checkpoint).resolve()))


def resolve_checkpoint(path: str | Path) -> Path:
    """Accept a checkpoint directory or a run directory with a ``latest`` marker."""
    path = Path(path)
    if (path / MANIFEST).exists():
        return path
    marker = path / LATEST
    if marker.exists():
        target = Path(marker.read_text().strip())
        if (target / MANIFEST).exists():
            return target
    raise CheckpointError(f"No checkpoint found at {path}")


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = resolve_checkpoint(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
        if manifest.get("format") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint format {manifest.get('format')}")
        model_cfg = model_config_from_dict(manifest["model"])
        names = list(manifest["params"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: malformed manifest ({e})") from e

    params = {}
    for name in names:
        value = read_tensor(path / "params" / f"{name}.gemt")
        if list(value.shape) != manifest["params"][name]:
            expected = manifest["params"][name]
            raise CheckpointError(
                f"{path}: parameter {name} has shape {value.shape}, manifest says {expected}"
            )
        params[name] = value
    moments = {}
    optim_dir = path / "optim"
    if optim_dir.is_dir():
        for m_file in sorted(optim_dir.glob("*.m.gemt")):
            name = m_file.name[: -len(".m.gemt")]
            moments[name] = (read_tensor(m_file), read_tensor(optim_dir / f"{name}.v.gemt"))
    return Checkpoint(
        path=path,
        step=int(manifest["step"]),
        stage=int(manifest["stage"]),
        model_config=model_cfg,
        params=params,
        frozen=list(manifest.get("frozen", [])),
        optimizer=manifest.get("optimizer") or {},
        moments=moments,
    )


def restore_optimizer(optimizer: AdamW, ckpt: Checkpoint):
    """Load moments and the step counter into an optimizer built for the same model."""
    known = {name for name, _ in optimizer.named_parameters()}
    for name, (m, v) in ckpt.moments.items():
        if name not in known:
            raise CheckpointError(f"{ckpt.path}: optimizer state for unknown parameter {name}")
        optimizer.m[name] = m.astype(np.float64)
        optimizer.v[name] = v.astype(np.float64)
    optimizer.step_count = int(ckpt.optimizer.get("step_count", 0))
