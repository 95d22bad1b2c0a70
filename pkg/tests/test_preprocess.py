import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import labels, make_geometry, rotation, volume
from petseg.errors import ValidationError
from petseg.preprocess import (
    CT_FILL,
    NormalizationSpec,
    extract_patch,
    index_from_world,
    normalize,
    normalize_ct,
    resample_to_grid,
    world_from_index,
)
from petseg.volume_io import Geometry, LabelMap, Volume3D


@pytest.mark.parametrize(
    "origin, spacing, ijk, xyz",
    [
        ((0, 0, 0), (1, 1, 1), (3, 4, 5), (3, 4, 5)),
        ((10, 0, 0), (2, 1, 1), (3, 0, 0), (16, 0, 0)),
        ((7, -2, 5), (3, 2, 1), (0, 0, 0), (7, -2, 5)),
    ],
)
def test_world_from_index_examples(origin, spacing, ijk, xyz):
    g = make_geometry((8, 8, 8), spacing, origin)
    assert np.array_equal(world_from_index(g, ijk), np.array(xyz, dtype=float))


def test_world_index_inverse():
    g = Geometry((4, 5, 6), (0.5, 1.5, 2.0), (3.0, -1.0, 8.0), rotation(0.4, 0.1, -1.2))
    ijk = np.random.default_rng(0).uniform(-2, 8, size=(20, 3))
    np.testing.assert_allclose(index_from_world(g, world_from_index(g, ijk)), ijk, atol=1e-12)


# -- resampling ------------------------------------------------------------------------

def test_identity_resample_exact():
    v = volume(np.random.default_rng(1).normal(size=(5, 4, 3)), spacing=(1.2, 0.8, 2.0))
    out = resample_to_grid(v, v.geometry)
    assert np.array_equal(out.data, v.data)


def test_identity_geometry_through_general_path():
    # an equal-but-distinct grid with a rotation takes the interpolation path
    g = Geometry((5, 4, 3), (1.2, 0.8, 2.0), (1.0, 2.0, 3.0), rotation(0.3, 0.2, 0.1))
    data = np.random.default_rng(1).normal(size=(5, 4, 3))
    out = resample_to_grid(Volume3D(g, data), Geometry(g.dims, g.spacing, g.origin, g.direction.copy()))
    assert np.abs(out.data - data).max() <= 1e-12


def test_grid_coincident_shift_exact():
    data = np.random.default_rng(2).normal(size=(6, 6, 6))
    g = Geometry((6, 6, 6), (2.0, 1.0, 1.5), (0.0, 0.0, 0.0), rotation(0.5, -0.4, 0.9))
    shift = np.array([1, 2, 0])
    origin = world_from_index(g, shift)
    tgt = Geometry((4, 3, 5), g.spacing, tuple(origin), g.direction)
    out = resample_to_grid(Volume3D(g, data), tgt)
    assert np.abs(out.data - data[1:5, 2:5, 0:5]).max() <= 1e-12


def test_constant_preserved():
    src = volume(np.full((6, 6, 6), 100.0), spacing=(2, 2, 2))
    tgt = Geometry((7, 5, 9), (1.1, 1.7, 0.9), (0.5, 0.2, 1.3), rotation(0.2, 0.1, 0.05))
    out = resample_to_grid(src, tgt)
    inside = out.data != CT_FILL
    assert inside.sum() > 50
    assert np.abs(out.data[inside] - 100.0).max() <= 1e-9


@pytest.mark.parametrize("spacing", [1.0, 2.0, 0.75])
def test_ramp_midpoints(spacing):
    n = 8
    ramp = np.broadcast_to(np.arange(n, dtype=float)[:, None, None], (n, 2, 2))
    src = volume(ramp, spacing=(spacing, 1, 1))
    tgt = make_geometry((n - 1, 2, 2), (spacing, 1, 1), (spacing / 2, 0, 0))
    out = resample_to_grid(src, tgt)
    expected = np.arange(n - 1) + 0.5
    assert np.abs(out.data[:, 0, 0] - expected).max() <= 1e-9
    assert np.abs(out.data - expected[:, None, None]).max() <= 1e-9


def test_outside_support_gets_fill():
    src = volume(np.ones((3, 3, 3)))
    tgt = make_geometry((3, 3, 3), origin=(10, 0, 0))
    assert np.all(resample_to_grid(src, tgt).data == CT_FILL)
    assert np.all(resample_to_grid(src, tgt, fill=0.0).data == 0.0)


def test_labels_require_nearest():
    lab = labels(np.zeros((2, 2, 2)))
    with pytest.raises(ValidationError):
        resample_to_grid(lab, make_geometry((3, 3, 3), (0.5, 0.5, 0.5)), mode="trilinear")


def test_nearest_label_value_set():
    arr = np.random.default_rng(3).integers(0, 3, size=(6, 6, 6))
    lab = labels(arr)
    tgt = Geometry((9, 7, 8), (0.7, 0.9, 0.8), (-1.0, 0.3, 0.2), rotation(0.3, 0.2, 0.1))
    out = resample_to_grid(lab, tgt, mode="nearest", fill=7)
    assert isinstance(out, LabelMap)
    assert set(np.unique(out.labels)) <= {0, 1, 2, 7}


def multilinear(coef, x, y, z):
    a, b, c, d, e, f, g, h = coef
    return a + b * x + c * y + d * z + e * x * y + f * x * z + g * y * z + h * x * y * z


@given(
    coef=st.lists(st.floats(-5, 5), min_size=8, max_size=8),
    origin=st.tuples(*(st.floats(0, 3),) * 3),
    spacing=st.tuples(*(st.floats(0.3, 1.5),) * 3),
)
def test_trilinear_reproduces_multilinear_functions(coef, origin, spacing):
    """Trilinear interpolation is exact for functions linear in each axis separately.

    Sample points within 1e-9 voxel of a grid node are snapped onto it, so the
    tolerance scales with the function's magnitude.
    """
    n = 6
    i, j, k = np.meshgrid(*(np.arange(n, dtype=float),) * 3, indexing="ij")
    src = volume(multilinear(coef, i, j, k))
    tgt = make_geometry((4, 4, 4), spacing, origin)
    out = resample_to_grid(src, tgt)
    pts = world_from_index(tgt, np.stack(np.meshgrid(*(np.arange(4),) * 3, indexing="ij"), -1).reshape(-1, 3))
    inside = np.all((pts >= 0) & (pts <= n - 1), axis=1)
    expected = multilinear(coef, *pts.T)
    got = out.data.reshape(-1)
    scale = 1.0 + np.abs(src.data).max()
    assert np.abs(got[inside] - expected[inside]).max(initial=0) <= 1e-9 * scale
    assert np.all(got[~inside] == CT_FILL)


@given(seed=st.integers(0, 2**32 - 1), angles=st.tuples(*(st.floats(-1, 1),) * 3))
def test_trilinear_bounded_by_source_range(seed, angles):
    rng = np.random.default_rng(seed)
    src = volume(rng.normal(size=(5, 5, 5)))
    tgt = Geometry((6, 6, 6), (0.8, 0.8, 0.8), (0.5, 0.5, 0.5), rotation(*angles))
    out = resample_to_grid(src, tgt, fill=1e6).data
    vals = out[out != 1e6]
    assert np.all(vals >= src.data.min() - 1e-12) and np.all(vals <= src.data.max() + 1e-12)


@given(seed=st.integers(0, 2**32 - 1), angles=st.tuples(*(st.floats(-1, 1),) * 3))
def test_nearest_commutes_with_relabeling(seed, angles):
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 5, size=(5, 5, 5))
    perm = rng.permutation(5)
    tgt = Geometry((6, 6, 6), (0.7, 0.9, 0.8), (0.2, 0.1, 0.3), rotation(*angles))
    a = resample_to_grid(labels(arr), tgt, mode="nearest", fill=0).labels
    b = resample_to_grid(labels(perm[arr]), tgt, mode="nearest", fill=int(perm[0])).labels
    assert np.array_equal(perm[a], b)


# -- normalisation ------------------------------------------------------------------------

def test_constant_normalises_to_zero():
    assert np.all(normalize_ct(volume(np.full((3, 3, 3), 40.0))).data == 0.0)


def test_clipping_before_zscore():
    out = normalize(volume(np.array([-2000.0, 0.0]).reshape(2, 1, 1)), NormalizationSpec(mode="none"))
    assert out.data.ravel().tolist() == [-1024.0, 0.0]


def test_two_voxel_zscore():
    out = normalize_ct(volume(np.array([-1.0, 1.0]).reshape(2, 1, 1)))
    assert out.data.ravel().tolist() == [-1.0, 1.0]


def test_invalid_spec():
    with pytest.raises(ValidationError):
        NormalizationSpec(5, 5)
    with pytest.raises(ValidationError):
        NormalizationSpec(mode="minmax")


@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(1e-3, 300))
def test_zscore_mean_zero_std_one(seed, scale):
    x = np.random.default_rng(seed).normal(0, scale, size=(4, 5, 6))
    x = np.clip(x, -1000, 1000)
    out = normalize_ct(volume(x)).data
    assert abs(out.mean()) <= 1e-9
    assert abs(out.std() - 1.0) <= 1e-9


# -- patches ------------------------------------------------------------------------

def test_patch_whole_volume():
    v = volume(np.arange(8.0).reshape(2, 2, 2), origin=(1, 2, 3))
    p = extract_patch(v, (0, 0, 0), (2, 2, 2))
    assert np.array_equal(p.data, v.data)
    assert p.geometry.same_grid(v.geometry)


def test_patch_beyond_volume_is_pad():
    v = volume(np.arange(8.0).reshape(2, 2, 2))
    assert np.all(extract_patch(v, (5, 5, 5), (2, 3, 1), pad_value=-7).data == -7)


def test_patch_negative_corner():
    v = volume(np.arange(8.0).reshape(2, 2, 2), spacing=(2, 1, 1))
    p = extract_patch(v, (-1, 0, 0), (2, 2, 2), pad_value=-1)
    assert np.all(p.data[0] == -1)
    assert np.array_equal(p.data[1], v.data[0])
    assert p.geometry.origin == (-2.0, 0.0, 0.0)


def test_patch_of_labels_stays_labels():
    p = extract_patch(labels(np.ones((3, 3, 3))), (1, 1, 1), (3, 3, 3))
    assert isinstance(p, LabelMap)
    assert p.labels.sum() == 8


def test_patch_size_positive():
    with pytest.raises(ValidationError):
        extract_patch(volume(np.zeros((2, 2, 2))), (0, 0, 0), (0, 1, 1))
