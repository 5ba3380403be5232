from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gliostyle.errors import DegenerateInputError
from gliostyle.phantom import DegradeSpec, degrade_case
from gliostyle.preprocess import (BoundingBox, crop_foreground, foreground_box, normalize_nonzero,
                                  preprocess_case, resample, resample_nearest, resample_trilinear,
                                  resize_linear)
from gliostyle.volume import LabelVolume, VoxelGrid, region_mask

from conftest import make_case

sparse_8 = arrays(np.float32, (4, 8, 8, 8),
                  elements=st.sampled_from([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, -2.5]))


# ---------------------------------------------------------------------------
# Cropping
# ---------------------------------------------------------------------------


def test_crop_full_support_is_noop():
    img = np.random.default_rng(0).random((4, 3, 4, 5)) + 1
    case = make_case("a", img, np.zeros((3, 4, 5)))
    out, box = crop_foreground(case)
    assert box == BoundingBox((0, 0, 0), (2, 3, 4))
    assert np.array_equal(out.images.stack(), case.images.stack())


def test_crop_single_voxel():
    img = np.zeros((4, 5, 5, 5))
    img[2, 2, 2, 2] = 1.0
    out, box = crop_foreground(make_case("a", img, np.zeros((5, 5, 5))))
    assert box.lo == box.hi == (2, 2, 2)
    assert out.images.dims == (1, 1, 1)
    assert out.truth.dims == (1, 1, 1)


def test_crop_all_zero_is_degenerate():
    with pytest.raises(DegenerateInputError, match="all channels are zero"):
        crop_foreground(make_case("z", np.zeros((4, 2, 2, 2))))


@given(sparse_8)
def test_crop_box_matches_coordinate_scan(img):
    union = np.any(img != 0, axis=0)
    if not union.any():
        return
    coords = np.argwhere(union)
    _, box = crop_foreground(make_case("s", img))
    assert box.lo == tuple(int(v) for v in coords.min(axis=0))
    assert box.hi == tuple(int(v) for v in coords.max(axis=0))


@given(sparse_8)
def test_crop_is_idempotent(img):
    if not np.any(img != 0):
        return
    once, _ = crop_foreground(make_case("s", img))
    twice, box = crop_foreground(once)
    assert box.shape == once.images.dims
    assert np.array_equal(once.images.stack(), twice.images.stack())


def test_foreground_box_empty():
    with pytest.raises(DegenerateInputError):
        foreground_box(np.zeros((2, 2, 2), bool))


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def test_normalize_two_point():
    data = np.zeros((2, 2, 2), np.float32)
    data[0, 0, 0], data[1, 1, 1] = 2.0, 4.0
    out = normalize_nonzero(VoxelGrid(data)).data
    assert out[0, 0, 0] == -1.0 and out[1, 1, 1] == 1.0
    assert np.count_nonzero(out) == 2


def test_normalize_degenerate_inputs():
    with pytest.raises(DegenerateInputError):
        normalize_nonzero(VoxelGrid(np.zeros((2, 2, 2))))
    with pytest.raises(DegenerateInputError, match="zero variance"):
        normalize_nonzero(VoxelGrid(np.full((2, 2, 2), 7.0)))


@given(arrays(np.float32, (5, 6, 7), elements=st.floats(-100, 100, width=32)))
def test_normalize_moments_and_zero_set(data):
    nz = data != 0
    if nz.sum() < 2 or np.ptp(data[nz]) < 1e-2:
        return
    out = normalize_nonzero(VoxelGrid(data)).data
    assert np.array_equal(out == 0, ~nz | (out == 0))
    assert np.all(out[~nz] == 0)
    vals = out[nz].astype(np.float64)
    assert abs(vals.mean()) < 1e-5
    assert abs(vals.std() - 1.0) < 1e-5


def test_normalize_is_idempotent_on_standardized_input():
    rng = np.random.default_rng(1)
    first = normalize_nonzero(VoxelGrid(rng.normal(5, 3, (6, 6, 6))))
    again = normalize_nonzero(first)
    assert np.max(np.abs(first.data - again.data)) < 1e-6


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def test_resample_identity():
    g = VoxelGrid(np.random.default_rng(2).random((3, 4, 5)), (1.0, 2.0, 3.0))
    assert resample_trilinear(g, (1.0, 2.0, 3.0)) is g


def _linear_oracle(values, s_in, s_out):
    """Hand closed form: output centre (i + 1/2) s_out maps to input index (i + 1/2) s_out / s_in - 1/2."""
    n_out = max(1, round(len(values) * s_in / s_out))
    out = []
    for i in range(n_out):
        x = min(max((i + 0.5) * s_out / s_in - 0.5, 0.0), len(values) - 1)
        lo = int(np.floor(x))
        hi = min(lo + 1, len(values) - 1)
        out.append(values[lo] + (x - lo) * (values[hi] - values[lo]))
    return out


def test_resample_ramp_downsample():
    ramp = np.arange(4, dtype=np.float32).reshape(1, 1, 4)
    out = resample_trilinear(VoxelGrid(ramp, (1.0, 1.0, 1.0)), (1.0, 1.0, 2.0))
    assert out.dims == (1, 1, 2)
    assert out.spacing == (1.0, 1.0, 2.0)
    np.testing.assert_allclose(out.data.ravel(), [0.5, 2.5])
    np.testing.assert_allclose(out.data.ravel(), _linear_oracle([0, 1, 2, 3], 1.0, 2.0))


@pytest.mark.parametrize("s_in,s_out", [(1.0, 2.0), (2.0, 1.0), (1.0, 0.7), (1.5, 1.0), (3.0, 1.25)])
def test_resample_matches_closed_form(s_in, s_out):
    values = np.random.default_rng(4).random(7).astype(np.float32)
    out = resample_trilinear(VoxelGrid(values.reshape(1, 1, 7), (1.0, 1.0, s_in)), (1.0, 1.0, s_out))
    np.testing.assert_allclose(out.data.ravel(), _linear_oracle(values.astype(np.float64), s_in, s_out),
                               rtol=1e-6, atol=1e-6)


@given(st.floats(0.1, 10), st.tuples(*[st.floats(0.3, 3.0)] * 3), st.tuples(*[st.floats(0.3, 3.0)] * 3))
def test_resample_constant_is_exact_both_ways(value, src, dst):
    g = VoxelGrid(np.full((5, 4, 6), value, np.float32), src)
    there = resample_trilinear(g, dst)
    back = resample_trilinear(there, src)
    assert np.all(there.data == np.float32(value))
    assert np.all(back.data == np.float32(value))


def test_resample_output_dims_rule():
    g = VoxelGrid(np.ones((10, 7, 3)), (1.0, 1.0, 1.0))
    assert resample_trilinear(g, (3.0, 0.5, 10.0)).dims == (3, 14, 1)


@given(arrays(np.uint8, (6, 5, 4), elements=st.sampled_from([0, 1, 3])),
       st.tuples(*[st.floats(0.4, 2.5)] * 3))
def test_nearest_never_invents_codes(labels, spacing):
    out = resample_nearest(LabelVolume(labels), spacing)
    assert set(np.unique(out.labels)) <= set(np.unique(labels))


def test_resample_dispatch():
    lab = LabelVolume(np.ones((2, 2, 2), np.uint8))
    assert isinstance(resample(lab, (0.5, 0.5, 0.5)), LabelVolume)
    assert isinstance(resample(VoxelGrid(np.ones((2, 2, 2))), (0.5, 0.5, 0.5)), VoxelGrid)


def test_resize_linear_shape_and_constants():
    out = resize_linear(np.full((4, 4, 4), 3.0), (2, 8, 3))
    assert out.shape == (2, 8, 3) and np.all(out == 3.0)


# ---------------------------------------------------------------------------
# Full chain
# ---------------------------------------------------------------------------


def test_preprocess_chain_on_phantom(small_phantom):
    out = preprocess_case(small_phantom, (1.0, 1.0, 1.0))
    cropped, box = crop_foreground(small_phantom)
    assert out.images.dims == box.shape
    for m, g in out.images.channels.items():
        nz = g.data != 0
        assert np.array_equal(nz, cropped.images.channels[m].data != 0)
        assert abs(g.data[nz].mean()) < 1e-5 and abs(g.data[nz].std() - 1) < 1e-5
    assert np.array_equal(out.truth.labels, small_phantom.truth.labels[box.slices])


def test_preprocess_chain_resamples_truth_with_images(small_phantom):
    out = preprocess_case(small_phantom, (2.0, 2.0, 2.0))
    assert out.truth.dims == out.images.dims
    assert out.truth.spacing == (2.0, 2.0, 2.0)
    assert region_mask(out.truth, "WT").any()


def test_preprocess_idempotent_on_prepared_case(small_phantom):
    once = preprocess_case(small_phantom)
    twice = preprocess_case(once)
    assert np.max(np.abs(once.images.stack() - twice.images.stack())) < 1e-6
    assert np.array_equal(once.truth.labels, twice.truth.labels)


def test_preprocess_keeps_zero_slab_zero(small_phantom):
    degraded = degrade_case(small_phantom, DegradeSpec(slab=6, seed=1))
    # re-attach an intensity outside the brain so the slab survives cropping
    img = degraded.images.stack().copy()
    img[:, 0, 0, 0] = 1.0
    case = make_case("slab", img, degraded.truth.labels)
    out = preprocess_case(case)
    stack = out.images.stack()
    # only the re-attached corner voxel is nonzero inside the slab
    assert np.count_nonzero(stack[:, :6]) == 4
    assert np.all(stack[:, 0, 0, 0] != 0)
