"""Console logging setup and the per-step JSON-lines training log."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any

STEP_LOG_NAME = "steps.jsonl"


def configure_logging(level: str | int = "INFO"):
    """Route library log records to stderr with a short format."""
    if isinstance(level, str):
        level = logging.getLevelName(level.upper())
        if not isinstance(level, int):
            raise ValueError(f"Unknown log level: {level}")
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)-7s %(name)s: %(message)s",
        datefmt="%H:%M:%S",
        force=True,
    )


class JsonLinesFormatter(logging.Formatter):
    """Render the record's ``payload`` attribute as one JSON object."""

    def format(self, record: logging.LogRecord) -> str:
        payload = getattr(record, "payload", None)
        if payload is None:
            payload = {"message": record.getMessage()}
        return json.dumps(payload, sort_keys=True)


class StepLogger:
    """Append one JSON record per training step to ``<run_dir>/steps.jsonl``.

    Records go through a dedicated, non-propagating ``logging`` logger with a
    file handler in append mode, so resumed runs extend the same file.
    """

    def __init__(self, run_dir: str | Path, name: str = "videodepth.steps"):
        self.path = Path(run_dir) / STEP_LOG_NAME
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._logger = logging.getLogger(f"{name}.{id(self)}")
        self._logger.setLevel(logging.INFO)
        self._logger.propagate = False
        self._handler = logging.FileHandler(self.path, mode="a", encoding="utf-8")
        self._handler.setFormatter(JsonLinesFormatter())
        self._logger.addHandler(self._handler)

    def log(
        self,
        step: int,
        stage: int,
        total: float,
        terms: dict[str, float],
        lr_new: float,
        lr_pretrained: float,
        grad_norm: float,
        **extra: Any,
    ):
        payload = {
            "step": step,
            "stage": stage,
            "total": total,
            "terms": terms,
            "lr_new": lr_new,
            "lr_pretrained": lr_pretrained,
            "grad_norm": grad_norm,
            **extra,
        }
        self._logger.info("step %d", step, extra={"payload": payload})
        self._handler.flush()

    def close(self):
        self._logger.removeHandler(self._handler)
        self._handler.close()

    def __enter__(self) -> StepLogger:
        return self

    def __exit__(self, *exc):
        self.close()


def read_step_log(path: str | Path) -> list[dict]:
    """Parse a ``steps.jsonl`` file."""
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
