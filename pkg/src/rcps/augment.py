"""Intensity views and grid distortion for 3D patches.

Both operate on plain numpy arrays of shape (H, W, D); the training loop
works on raw patch arrays rather than ``Volume`` objects.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage


def _check_range(name, rng_, lo_bound=None):
    lo, hi = rng_
    if lo > hi:
        raise ValueError(f"{name} must be ordered, got {rng_}")
    if lo_bound is not None and lo < lo_bound:
        raise ValueError(f"{name} must be >= {lo_bound}, got {rng_}")


def _check_prob(name, p):
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {p}")


@dataclass(frozen=True)
class IntensityAugmentConfig:
    scale_range: tuple = (0.9, 1.1)
    shift_range: tuple = (-0.1, 0.1)
    noise_sigma_range: tuple = (0.0, 0.1)
    probability: float = 0.8

    def __post_init__(self):
        for name in ("scale_range", "shift_range", "noise_sigma_range"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        _check_range("scale_range", self.scale_range)
        _check_range("shift_range", self.shift_range)
        _check_range("noise_sigma_range", self.noise_sigma_range, 0.0)
        _check_prob("probability", self.probability)


@dataclass(frozen=True)
class GridDistortConfig:
    grid_cells: int = 4
    max_displacement: float = 2.0
    probability: float = 0.5

    def __post_init__(self):
        if self.grid_cells < 2:
            raise ValueError("grid_cells must be >= 2")
        if self.max_displacement < 0:
            raise ValueError("max_displacement must be >= 0")
        _check_prob("probability", self.probability)


def intensity_augment(x: np.ndarray, cfg: IntensityAugmentConfig, rng: np.random.Generator):
    """Random scale, then shift, then i.i.d. Gaussian noise, each gated by ``cfg.probability``.

    All random parameters are drawn every call so the rng stream advances by
    the same amount whatever the gates decide.
    """
    gates = rng.random(3) < cfg.probability
    scale = rng.uniform(*cfg.scale_range)
    shift = rng.uniform(*cfg.shift_range)
    sigma = rng.uniform(*cfg.noise_sigma_range)
    noise = rng.standard_normal(x.shape)
    out = np.array(x, dtype=np.float32, copy=True)
    if gates[0]:
        out *= np.float32(scale)
    if gates[1]:
        out += np.float32(shift)
    if gates[2] and sigma > 0:
        out += (sigma * noise).astype(np.float32)
    return out


def make_views(x: np.ndarray, cfg: IntensityAugmentConfig, rng: np.random.Generator):
    """Two independently augmented intensity views of ``x`` sharing its geometry."""
    if not np.all(np.isfinite(x)):
        raise ValueError("input patch contains non-finite values")
    return intensity_augment(x, cfg, rng), intensity_augment(x, cfg, rng)


def random_displacement(shape, cfg: GridDistortConfig, rng: np.random.Generator) -> np.ndarray:
    """Smooth displacement field of shape (3, *shape) in voxel units.

    Control-point offsets are drawn uniformly in ``+/- max_displacement`` on a
    ``grid_cells + 1`` lattice per axis and interpolated linearly, so the
    dense field never exceeds the bound.
    """
    n = cfg.grid_cells + 1
    coarse = rng.uniform(-cfg.max_displacement, cfg.max_displacement, size=(3, n, n, n))
    dense = np.empty((3,) + tuple(shape), dtype=np.float64)
    for a in range(3):
        zoomed = ndimage.zoom(coarse[a], [s / n for s in shape], order=1, mode="nearest", grid_mode=True)
        dense[a] = zoomed[: shape[0], : shape[1], : shape[2]]
    return dense


def apply_displacement(arr: np.ndarray, disp: np.ndarray, order: int) -> np.ndarray:
    coords = np.indices(arr.shape, dtype=np.float64) + disp
    return ndimage.map_coordinates(arr, coords, order=order, mode="nearest")


def grid_distort(x: np.ndarray, y: Optional[np.ndarray], cfg: GridDistortConfig,
                 rng: np.random.Generator):
    """Warp image (trilinear) and label (nearest) with one shared random field."""
    if y is not None and y.shape != x.shape:
        raise ValueError(f"image {x.shape} and label {y.shape} differ")
    apply = rng.random() < cfg.probability
    if not apply or cfg.max_displacement == 0:
        return x, y
    disp = random_displacement(x.shape, cfg, rng)
    x_out = apply_displacement(x, disp, order=1).astype(x.dtype, copy=False)
    y_out = None if y is None else apply_displacement(y, disp, order=0).astype(y.dtype, copy=False)
    return x_out, y_out
