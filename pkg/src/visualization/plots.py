"""Matplotlib figures for training curves and the placement ablation."""

from __future__ import annotations

from collections.abc import Sequence
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from src.videodepth.train import PLACEMENT_ORDER, PlacementResult  # noqa: E402


def smooth(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing moving average; the first ``window - 1`` points average what exists."""
    values = np.asarray(values, dtype=np.float64)
    if window <= 1 or len(values) == 0:
        return values
    cumsum = np.cumsum(np.insert(values, 0, 0.0))
    out = np.empty_like(values)
    for i in range(len(values)):
        lo = max(0, i + 1 - window)
        out[i] = (cumsum[i + 1] - cumsum[lo]) / (i + 1 - lo)
    return out


def plot_loss_curves(records: Sequence[dict], path: str | Path, window: int = 20) -> Path:
    """Total and per-term losses from ``steps.jsonl`` records."""
    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.plot(steps, smooth([r["total"] for r in records], window), label="total", linewidth=2)
    terms = sorted({name for r in records for name in r.get("terms", {})})
    for name in terms:
        values = [r["terms"].get(name, np.nan) for r in records]
        ax.plot(steps, smooth(values, window), label=name, alpha=0.7)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_placement_ablation(results: Sequence[PlacementResult], path: str | Path) -> Path:
    """Bar chart of AbsRel, δ1 and TAE per placement, with the spread over seeds."""
    metrics = [("AbsRel", "absrel"), ("δ1", "delta1"), ("TAE", "tae")]
    fig, axes = plt.subplots(1, len(metrics), figsize=(11, 3.5))
    colors = ["#4C72B0", "#DD8452", "#55A868"]
    for ax, (label, attr) in zip(axes, metrics, strict=True):
        means, spreads = [], []
        for placement in PLACEMENT_ORDER:
            values = [
                getattr(r, attr)
                for r in results
                if r.placement == placement and getattr(r, attr) is not None
            ]
            means.append(np.mean(values) if values else np.nan)
            spreads.append(np.std(values) if values else 0.0)
        ax.bar(PLACEMENT_ORDER, means, yerr=spreads, color=colors, capsize=4)
        ax.set_title(label)
        ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
