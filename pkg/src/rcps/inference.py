"""Sliding-window whole-volume inference and dataset evaluation."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .metrics import case_metrics, summarize, write_metrics_csv
from .volume_io import LabelMap, Volume, pad_to_shape, save_nifti


@dataclass(frozen=True)
class SlidingWindowConfig:
    patch_size: tuple = (64, 64, 64)
    overlap: float = 0.5
    merge: str = "mean"

    def __post_init__(self):
        object.__setattr__(self, "patch_size", tuple(int(p) for p in self.patch_size))
        if len(self.patch_size) != 3 or min(self.patch_size) < 1:
            raise ValueError("patch_size must be 3 positive integers")
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError("overlap must lie in [0, 1)")
        if self.merge != "mean":
            raise ValueError(f"unsupported merge mode {self.merge!r}")


def window_starts(n: int, p: int, overlap: float) -> list:
    """Window offsets along one axis; the last window is flush with the end."""
    if n <= p:
        return [0]
    stride = max(int(p * (1.0 - overlap)), 1)
    starts = list(range(0, n - p, stride))
    starts.append(n - p)
    return starts


def window_grid(shape, cfg: SlidingWindowConfig):
    axes = [window_starts(n, p, cfg.overlap) for n, p in zip(shape, cfg.patch_size)]
    for corner in itertools.product(*axes):
        yield tuple(slice(o, o + p) for o, p in zip(corner, cfg.patch_size))


@torch.no_grad()
def sliding_window_probs(model, image: np.ndarray, cfg: SlidingWindowConfig) -> np.ndarray:
    """Uniformly averaged class probabilities (C, *image.shape)."""
    model.eval()
    shape = image.shape
    padded = pad_to_shape(np.asarray(image, dtype=np.float32), cfg.patch_size)
    acc = None
    counts = np.zeros(padded.shape, dtype=np.float64)
    for sl in window_grid(padded.shape, cfg):
        x = torch.from_numpy(np.ascontiguousarray(padded[sl]))[None, None]
        probs = model.predict_probs(x)[0].numpy().astype(np.float64)
        if acc is None:
            acc = np.zeros((probs.shape[0],) + padded.shape, dtype=np.float64)
        acc[(slice(None),) + sl] += probs
        counts[sl] += 1.0
    probs = acc / counts
    # undo the symmetric edge padding
    crop = tuple(slice((pn - n) // 2, (pn - n) // 2 + n) for pn, n in zip(padded.shape, shape))
    return probs[(slice(None),) + crop]


def sliding_window_predict(model, v, cfg: SlidingWindowConfig) -> LabelMap:
    image = v.data if isinstance(v, Volume) else np.asarray(v)
    probs = sliding_window_probs(model, image, cfg)
    return LabelMap(probs.argmax(0).astype(np.int64), probs.shape[0])


@dataclass
class EvaluationTable:
    rows: list
    summary: list

    def overall(self):
        return next(s for s in self.summary if s.cls == "all")

    def write(self, path) -> Path:
        return write_metrics_csv(self.rows, path, self.summary)


def evaluate(model, cases: Sequence, cfg: SlidingWindowConfig, num_classes: Optional[int] = None,
             spacing_aware: bool = False, save_dir=None) -> EvaluationTable:
    """Predict each ``(Volume, LabelMap)`` case and tabulate per-class metrics."""
    rows = []
    for v, y in cases:
        pred = sliding_window_predict(model, v, cfg)
        k = num_classes or y.num_classes
        rows.extend(case_metrics(v.identifier, pred.data, y.data, k, v.spacing if spacing_aware else None))
        if save_dir is not None:
            save_nifti(pred, Path(save_dir) / f"{v.identifier}_pred.nii", spacing=v.spacing)
    return EvaluationTable(rows, summarize(rows))
