"""Static figures: learning curves, weight schedules and mid-slice overlays."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOSS_SERIES = ("seg", "rp", "bc", "sup_total", "unsup_total", "kl_mean")
SCHEDULE_SERIES = ("lr", "alpha", "beta")
GT_COLOR = "red"
PRED_COLOR = "blue"


class PlotInputError(OSError):
    """Missing, empty or malformed plot input."""


def read_log(path) -> dict:
    """Load a training log CSV into ``{column: float array}``."""
    path = Path(path)
    if not path.is_file():
        raise PlotInputError(f"training log not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise PlotInputError(f"training log has no rows: {path}")
    missing = [c for c in ("step",) + LOSS_SERIES + SCHEDULE_SERIES if c not in rows[0]]
    if missing:
        raise PlotInputError(f"training log {path} lacks columns: {', '.join(missing)}")
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def plot_loss_curves(log: dict, out) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    for name in LOSS_SERIES:
        ax.plot(log["step"], log[name], label=name, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.legend(frameon=False, ncol=3, fontsize=8)
    ax.set_title("training losses")
    return _save(fig, out)


def plot_schedules(log: dict, out) -> Path:
    fig, (ax_lr, ax_w) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_lr.plot(log["step"], log["lr"], color="k")
    ax_lr.set_xlabel("step")
    ax_lr.set_ylabel("learning rate")
    ax_w.plot(log["step"], log["alpha"], label=r"$\alpha$")
    ax_w.plot(log["step"], log["beta"], label=r"$\beta$", ls="--")
    ax_w.set_xlabel("step")
    ax_w.set_ylabel("loss weight")
    ax_w.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, out)


def plot_overlay(image: np.ndarray, gt: Optional[np.ndarray], pred: Optional[np.ndarray], out,
                 axis: int = 2, title: str = "") -> Path:
    """Middle slice along ``axis`` with ground-truth (red) and prediction (blue) contours.

    Every foreground class gets its own contour line in the same colour.
    """
    if image.ndim != 3:
        raise ValueError(f"expected a 3D image, got shape {image.shape}")
    for name, arr in (("gt", gt), ("pred", pred)):
        if arr is not None and arr.shape != image.shape:
            raise ValueError(f"{name} shape {arr.shape} differs from image {image.shape}")
    mid = image.shape[axis] // 2

    def cut(a):
        return np.take(a, mid, axis=axis).T

    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(cut(image), cmap="gray", origin="lower")
    for arr, color in ((gt, GT_COLOR), (pred, PRED_COLOR)):
        if arr is None:
            continue
        sl = cut(arr)
        for c in np.unique(sl):
            if c == 0:
                continue
            ax.contour((sl == c).astype(float), levels=[0.5], colors=color, linewidths=1.2)
    ax.set_axis_off()
    ax.set_title(title or f"slice {mid} (gt red, prediction blue)")
    return _save(fig, out)


def _save(fig, out) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return out
