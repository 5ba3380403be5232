"""Foreground cropping, nonzero-region z-scoring, and spacing resampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError
from .volume import Case, LabelVolume, MultiModalVolume, VoxelGrid


@dataclass(frozen=True)
class BoundingBox:
    lo: tuple[int, int, int]
    hi: tuple[int, int, int]  # inclusive

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(a, b + 1) for a, b in zip(self.lo, self.hi))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(b - a + 1 for a, b in zip(self.lo, self.hi))


def foreground_box(mask: np.ndarray) -> BoundingBox:
    if not mask.any():
        raise DegenerateInputError("no nonzero voxels to crop around")
    lo, hi = [], []
    for axis in range(mask.ndim):
        other = tuple(a for a in range(mask.ndim) if a != axis)
        idx = np.flatnonzero(mask.any(axis=other))
        lo.append(int(idx[0]))
        hi.append(int(idx[-1]))
    return BoundingBox(tuple(lo), tuple(hi))


def crop_foreground(case: Case) -> tuple[Case, BoundingBox]:
    """Crop every channel (and the truth) to the union nonzero support."""
    stack = case.images.stack()
    try:
        box = foreground_box(np.any(stack != 0, axis=0))
    except DegenerateInputError:
        raise DegenerateInputError(f"case {case.id}: all channels are zero") from None
    sl = box.slices
    images = MultiModalVolume({m: g.with_data(g.data[sl]) for m, g in case.images.channels.items()})
    truth = case.truth.with_labels(case.truth.labels[sl]) if case.truth is not None else None
    return Case(case.id, images, truth, case.domain), box


def normalize_nonzero(grid: VoxelGrid) -> VoxelGrid:
    """Z-score the nonzero voxels with their own mean and population std.

    Zero voxels are left exactly zero.
    """
    data = grid.data
    nz = data != 0
    if not nz.any():
        raise DegenerateInputError("cannot normalize an all-zero grid")
    vals = data[nz].astype(np.float64)
    mu = vals.mean()
    sigma = vals.std()
    if sigma == 0.0:
        raise DegenerateInputError("nonzero voxels have zero variance")
    out = np.zeros(data.shape, np.float32)
    out[nz] = ((vals - mu) / sigma).astype(np.float32)
    return grid.with_data(out)


def _source_coords(n_in: int, s_in: float, s_out: float) -> tuple[int, np.ndarray]:
    n_out = max(1, int(round(n_in * s_in / s_out)))
    # voxel-centre alignment: output centre (i + 0.5) * s_out in physical units
    x = (np.arange(n_out) + 0.5) * (s_out / s_in) - 0.5
    return n_out, np.clip(x, 0.0, n_in - 1)


def _linear_axis(arr: np.ndarray, axis: int, coords: np.ndarray) -> np.ndarray:
    lo = np.floor(coords).astype(np.intp)
    hi = np.minimum(lo + 1, arr.shape[axis] - 1)
    t = coords - lo
    shape = [1] * arr.ndim
    shape[axis] = -1
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    # a + t*(b - a) keeps constant signals exact
    return a + t.reshape(shape) * (b - a)


def resize_linear(arr: np.ndarray, shape) -> np.ndarray:
    """Linear resize of a 3D array to an explicit shape (voxel-centre aligned)."""
    out = arr.astype(np.float64)
    for axis, n_out in enumerate(shape):
        n_in = out.shape[axis]
        if n_in == n_out:
            continue
        x = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1)
        out = _linear_axis(out, axis, x)
    return out


def resample_trilinear(grid: VoxelGrid, target_spacing) -> VoxelGrid:
    """Resample to ``target_spacing`` with separable linear interpolation."""
    target = VoxelGrid(np.zeros((1, 1, 1), np.float32), target_spacing).spacing
    if target == grid.spacing:
        return grid
    arr = grid.data.astype(np.float64)
    for axis in range(3):
        _, coords = _source_coords(arr.shape[axis], grid.spacing[axis], target[axis])
        arr = _linear_axis(arr, axis, coords)
    return grid.with_data(arr.astype(np.float32), target)


def resample_nearest(labels: LabelVolume, target_spacing) -> LabelVolume:
    target = LabelVolume(np.zeros((1, 1, 1), np.uint8), target_spacing).spacing
    if target == labels.spacing:
        return labels
    arr = labels.labels
    for axis in range(3):
        _, coords = _source_coords(arr.shape[axis], labels.spacing[axis], target[axis])
        idx = np.minimum(np.floor(coords + 0.5).astype(np.intp), arr.shape[axis] - 1)
        arr = np.take(arr, idx, axis=axis)
    return labels.with_labels(arr, target)


def resample(grid: VoxelGrid | LabelVolume, target_spacing):
    if isinstance(grid, LabelVolume):
        return resample_nearest(grid, target_spacing)
    return resample_trilinear(grid, target_spacing)


def preprocess_case(case: Case, target_spacing=(1.0, 1.0, 1.0)) -> Case:
    """Crop, normalize each channel, then resample images and truth."""
    cropped, _ = crop_foreground(case)
    channels = {}
    for m, grid in cropped.images.channels.items():
        try:
            norm = normalize_nonzero(grid)
        except DegenerateInputError as exc:
            raise DegenerateInputError(f"case {case.id}, channel {m}: {exc}") from None
        channels[m] = resample_trilinear(norm, target_spacing)
    truth = resample_nearest(cropped.truth, target_spacing) if cropped.truth is not None else None
    return Case(case.id, MultiModalVolume(channels), truth, case.domain)
