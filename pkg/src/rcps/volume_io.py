"""Volume containers, NIfTI I/O, preprocessing and synthetic phantoms."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import nibabel as nib
import numpy as np
from scipy import ndimage


class NiftiFormatError(ValueError):
    """Raised for NIfTI files that are not 3D scalar volumes or cannot be parsed."""


class DegenerateInputError(ValueError):
    """Raised when an input carries no usable signal (constant volume, empty label)."""


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    identifier: str = ""
    affine: Optional[np.ndarray] = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume must be a non-empty 3D grid, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def replace(self, data: np.ndarray, **kwargs) -> "Volume":
        kw = dict(spacing=self.spacing, identifier=self.identifier, affine=self.affine)
        kw.update(kwargs)
        return Volume(data, **kw)


@dataclass(frozen=True, eq=False)
class LabelMap:
    data: np.ndarray
    num_classes: int

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"label map must be 3D, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.integer):
            raise ValueError(f"label map must hold integers, got {data.dtype}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if data.size and (data.min() < 0 or data.max() >= self.num_classes):
            raise ValueError(f"label values must lie in [0, {self.num_classes - 1}]")
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def one_hot(self) -> np.ndarray:
        return np.eye(self.num_classes, dtype=np.float32)[self.data].transpose(3, 0, 1, 2)


@dataclass(frozen=True)
class Dataset:
    """Labeled pairs, unlabeled volumes and an optional held-out labeled test split."""

    labeled: tuple = ()
    unlabeled: tuple = ()
    test: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "labeled", tuple(self.labeled))
        object.__setattr__(self, "unlabeled", tuple(self.unlabeled))
        object.__setattr__(self, "test", tuple(self.test))
        ids = [v.identifier for v, _ in self.labeled]
        ids += [v.identifier for v in self.unlabeled]
        ids += [v.identifier for v, _ in self.test]
        if len(set(ids)) != len(ids):
            raise ValueError("dataset identifiers must be unique across splits")
        for v, y in self.labeled + self.test:
            if v.shape != y.shape:
                raise ValueError(f"{v.identifier}: image {v.shape} and label {y.shape} differ")

    @property
    def num_labeled(self) -> int:
        return len(self.labeled)

    @property
    def num_unlabeled(self) -> int:
        return len(self.unlabeled)


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of the synthetic ellipsoid phantoms.

    ``intensity_means`` holds one mean per class (background first). Each
    volume additionally gets a global contrast factor drawn from
    ``1 +/- contrast_jitter`` applied to the class means, which mimics
    scanner-to-scanner intensity variation. ``noise_jitter`` does the same
    for the noise level: each volume draws sigma from
    ``noise_sigma * (1 +/- noise_jitter)``.
    """

    volume_shape: tuple = (64, 64, 64)
    num_classes: int = 3
    shapes_per_class: tuple = (1, 2)
    intensity_means: tuple = (0.0, 0.6, -0.6)
    noise_sigma: float = 0.15
    bias_field_strength: float = 0.2
    seed: int = 0
    radius_range: tuple = (0.12, 0.28)
    contrast_jitter: float = 0.0
    noise_jitter: float = 0.0

    def __post_init__(self):
        for name in ("volume_shape", "shapes_per_class", "intensity_means", "radius_range"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if len(self.volume_shape) != 3 or min(self.volume_shape) < 1:
            raise ValueError("volume_shape must be 3 positive integers")
        if self.num_classes < 2 or len(self.intensity_means) != self.num_classes:
            raise ValueError("intensity_means must give one mean per class")
        if len(set(self.intensity_means)) != len(self.intensity_means):
            raise ValueError("intensity_means must be pairwise distinct")
        if self.noise_sigma < 0 or self.bias_field_strength < 0 or self.contrast_jitter < 0:
            raise ValueError("noise_sigma, bias_field_strength and contrast_jitter must be >= 0")
        if not 0 <= self.noise_jitter <= 1:
            raise ValueError("noise_jitter must lie in [0, 1]")
        lo, hi = self.shapes_per_class
        if lo < 0 or hi < lo:
            raise ValueError("shapes_per_class must be an ordered pair of non-negative integers")
        rlo, rhi = self.radius_range
        if not 0 < rlo <= rhi:
            raise ValueError("radius_range must be an ordered pair of positive fractions")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# NIfTI I/O
# ---------------------------------------------------------------------------


def load_nifti(path, label: bool = False):
    """Load a NIfTI-1 file as ``(Volume, LabelMap | None)``.

    With ``label=True`` the voxel values are also returned as a LabelMap
    whose class count is ``max + 1``. Trailing singleton dimensions are
    dropped; anything else that is not 3D is rejected. Voxel order is kept
    as stored (no reorientation).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such NIfTI file: {path}")
    try:
        img = nib.load(str(path))
        data = np.asanyarray(img.dataobj)
        zooms = img.header.get_zooms()
    except Exception as exc:  # nibabel raises several unrelated types
        raise NiftiFormatError(f"cannot read {path}: {exc}") from exc
    while data.ndim > 3 and data.shape[-1] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise NiftiFormatError(f"{path}: expected a 3D volume, got shape {data.shape}")
    spacing = tuple(float(z) if z > 0 else 1.0 for z in zooms[:3])
    ident = path.name.split(".")[0]
    vol = Volume(np.asarray(data, dtype=np.float32), spacing, ident, np.asarray(img.affine))
    if not label:
        return vol, None
    ints = np.rint(data).astype(np.int64)
    if ints.min() < 0:
        raise NiftiFormatError(f"{path}: negative label values")
    return vol, LabelMap(ints, max(int(ints.max()) + 1, 2))


def save_nifti(obj, path, spacing=None) -> Path:
    """Write a Volume, LabelMap or bare array to ``path`` (.nii or .nii.gz)."""
    path = Path(path)
    if isinstance(obj, Volume):
        data, spacing, affine = obj.data.astype(np.float32), obj.spacing, obj.affine
    elif isinstance(obj, LabelMap):
        data, affine = obj.data.astype(np.int16), None
    else:
        data, affine = np.asarray(obj), None
    if affine is None:
        affine = np.diag(list(spacing or (1.0, 1.0, 1.0)) + [1.0])
    img = nib.Nifti1Image(data, affine)
    if spacing is not None:
        img.header.set_zooms(tuple(spacing))
    path.parent.mkdir(parents=True, exist_ok=True)
    nib.save(img, str(path))
    return path


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def window_hu(v: Volume, level: float, width: float) -> Volume:
    if width <= 0:
        raise ValueError(f"window width must be positive, got {width}")
    lo, hi = level - width / 2.0, level + width / 2.0
    return v.replace(np.clip(v.data, lo, hi))


def normalize_zscore(v: Volume, allow_constant: bool = False) -> Volume:
    data = v.data.astype(np.float64)
    std = data.std()
    if not np.isfinite(std):
        raise DegenerateInputError(f"{v.identifier}: non-finite intensities")
    if std == 0:
        if not allow_constant:
            raise DegenerateInputError(f"{v.identifier}: constant volume cannot be z-scored")
        return v.replace(np.zeros(v.shape, dtype=np.float32))
    out = (data - data.mean()) / std
    return v.replace(out.astype(np.float32))


def foreground_bbox(y: LabelMap, margin: int = 0):
    """Inclusive-exclusive slices of the nonzero-label bounding box plus ``margin``."""
    coords = np.nonzero(y.data)
    if len(coords[0]) == 0:
        raise DegenerateInputError("label map has no foreground voxels")
    slices = []
    for axis, c in enumerate(coords):
        lo = max(int(c.min()) - margin, 0)
        hi = min(int(c.max()) + margin + 1, y.shape[axis])
        slices.append(slice(lo, hi))
    return tuple(slices)


def crop_roi_with_margin(v: Volume, y: LabelMap, margin: int = 25):
    if v.shape != y.shape:
        raise ValueError(f"image {v.shape} and label {y.shape} differ")
    if margin < 0:
        raise ValueError("margin must be non-negative")
    sl = foreground_bbox(y, margin)
    return v.replace(v.data[sl].copy()), LabelMap(y.data[sl].copy(), y.num_classes)


def resample_isotropic(v: Volume, y: Optional[LabelMap] = None, spacing: float = 1.0):
    """Resample to isotropic ``spacing``: trilinear for images, nearest for labels."""
    if spacing <= 0:
        raise ValueError("target spacing must be positive")
    factors = [s / spacing for s in v.spacing]
    img = ndimage.zoom(v.data.astype(np.float32), factors, order=1, mode="nearest")
    out_v = v.replace(img, spacing=(spacing,) * 3, affine=None)
    if y is None:
        return out_v, None
    lab = ndimage.zoom(y.data, factors, order=0, mode="nearest")
    return out_v, LabelMap(lab.astype(y.data.dtype), y.num_classes)


def pad_to_shape(arr: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Edge-replicate ``arr`` symmetrically so every axis is at least ``shape``."""
    pad = []
    for n, p in zip(arr.shape, shape):
        extra = max(p - n, 0)
        pad.append((extra // 2, extra - extra // 2))
    if not any(a or b for a, b in pad):
        return arr
    return np.pad(arr, pad, mode="edge")


def random_patch_slices(shape, patch_size, rng: np.random.Generator):
    return tuple(
        slice(o, o + p)
        for o, p in ((int(rng.integers(0, n - p + 1)), p) for n, p in zip(shape, patch_size))
    )


def extract_patch(v: Volume, y: Optional[LabelMap], patch_size, rng: np.random.Generator):
    """Crop a uniformly placed patch, padding undersized axes by edge replication."""
    patch_size = tuple(int(p) for p in patch_size)
    img = pad_to_shape(v.data, patch_size)
    sl = random_patch_slices(img.shape, patch_size, rng)
    out_v = v.replace(img[sl].copy())
    if y is None:
        return out_v, None
    if y.shape != v.shape:
        raise ValueError(f"image {v.shape} and label {y.shape} differ")
    lab = pad_to_shape(y.data, patch_size)
    return out_v, LabelMap(lab[sl].copy(), y.num_classes)


# ---------------------------------------------------------------------------
# Synthetic phantoms
# ---------------------------------------------------------------------------

_SPLIT_CODES = {"labeled": 0, "unlabeled": 1, "test": 2}
_SPLIT_PREFIX = {"labeled": "lab", "unlabeled": "unl", "test": "test"}


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.diag(r))


def _bias_field(shape, rng, strength):
    coarse = rng.uniform(-1.0, 1.0, size=(3, 3, 3))
    field_ = ndimage.zoom(coarse, [n / 3.0 for n in shape], order=3, mode="nearest")
    field_ = field_[: shape[0], : shape[1], : shape[2]]
    peak = np.abs(field_).max()
    if peak > 0:
        field_ = field_ / peak
    return 1.0 + strength * field_


def paint_phantom(spec: PhantomSpec, rng: np.random.Generator):
    """Draw one (image, label, ellipsoids) triple.

    Returns the float32 image, the int label grid and the list of painted
    ellipsoids as ``(class, center, axes, rotation)`` tuples, in painting
    order (later ellipsoids overwrite earlier ones).
    """
    shape = spec.volume_shape
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij"), -1)
    label = np.zeros(shape, dtype=np.int64)
    ellipsoids = []
    extent = min(shape)
    lo, hi = spec.shapes_per_class
    for c in range(1, spec.num_classes):
        for _ in range(int(rng.integers(lo, hi + 1))):
            axes = rng.uniform(*spec.radius_range, size=3) * extent
            margin = np.minimum(axes.max(), np.asarray(shape) / 2.0 - 1)
            center = np.array([rng.uniform(m, n - 1 - m) for m, n in zip(margin, shape)])
            rot = _random_rotation(rng)
            local = (grid - center) @ rot
            inside = ((local / axes) ** 2).sum(-1) <= 1.0
            label[inside] = c
            ellipsoids.append((c, center, axes, rot))
    means = np.asarray(spec.intensity_means, dtype=np.float64)
    if spec.contrast_jitter > 0:
        means = means * rng.uniform(1 - spec.contrast_jitter, 1 + spec.contrast_jitter)
    image = means[label]
    if spec.bias_field_strength > 0:
        image = image * _bias_field(shape, rng, spec.bias_field_strength)
    sigma = spec.noise_sigma
    if spec.noise_jitter > 0:
        sigma = sigma * rng.uniform(1 - spec.noise_jitter, 1 + spec.noise_jitter)
    if sigma > 0:
        image = image + rng.normal(0.0, sigma, size=shape)
    return image.astype(np.float32), label, ellipsoids


def make_phantom(spec: PhantomSpec, split: str, index: int):
    rng = np.random.default_rng([spec.seed, _SPLIT_CODES[split], index])
    image, label, _ = paint_phantom(spec, rng)
    ident = f"{_SPLIT_PREFIX[split]}_{index:03d}"
    return Volume(image, (1.0, 1.0, 1.0), ident), LabelMap(label, spec.num_classes)


def generate_phantoms(spec: PhantomSpec, count_labeled: int, count_unlabeled: int,
                      count_test: int = 0) -> Dataset:
    """Synthesize a dataset; each case depends only on (seed, split, index)."""
    if min(count_labeled, count_unlabeled, count_test) < 0:
        raise ValueError("phantom counts must be non-negative")
    if count_labeled + count_unlabeled + count_test < 1:
        raise ValueError("at least one phantom must be requested")
    labeled = [make_phantom(spec, "labeled", i) for i in range(count_labeled)]
    unlabeled = [make_phantom(spec, "unlabeled", i)[0] for i in range(count_unlabeled)]
    test = [make_phantom(spec, "test", i) for i in range(count_test)]
    return Dataset(labeled, unlabeled, test)


# ---------------------------------------------------------------------------
# Dataset persistence
# ---------------------------------------------------------------------------

MANIFEST = "manifest.json"


def save_dataset(dataset: Dataset, out_dir, spec: Optional[PhantomSpec] = None) -> Path:
    """Write images/labels as uncompressed NIfTI plus a JSON manifest.

    Uncompressed files keep reruns byte-identical (gzip stamps mtimes).
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    splits = {"labeled": [], "unlabeled": [], "test": []}
    num_classes = None
    for split, items in (("labeled", dataset.labeled), ("test", dataset.test)):
        for v, y in items:
            save_nifti(v, out_dir / "images" / f"{v.identifier}.nii")
            save_nifti(y, out_dir / "labels" / f"{v.identifier}.nii", spacing=v.spacing)
            splits[split].append(v.identifier)
            num_classes = y.num_classes
    for v in dataset.unlabeled:
        save_nifti(v, out_dir / "images" / f"{v.identifier}.nii")
        splits["unlabeled"].append(v.identifier)
    manifest = {
        "format": "rcps-dataset/1",
        "num_classes": spec.num_classes if spec is not None else num_classes,
        "splits": splits,
        "phantom_spec": spec.to_dict() if spec is not None else None,
    }
    tmp = out_dir / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, out_dir / MANIFEST)
    return out_dir / MANIFEST


def read_manifest(root) -> dict:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    return json.loads(path.read_text())


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = read_manifest(root)
    num_classes = manifest.get("num_classes")

    def pair(ident):
        v, _ = load_nifti(root / "images" / f"{ident}.nii")
        _, y = load_nifti(root / "labels" / f"{ident}.nii", label=True)
        if num_classes:
            y = LabelMap(y.data, num_classes)
        return v, y

    splits = manifest["splits"]
    return Dataset(
        [pair(i) for i in splits.get("labeled", [])],
        [load_nifti(root / "images" / f"{i}.nii")[0] for i in splits.get("unlabeled", [])],
        [pair(i) for i in splits.get("test", [])],
    )
