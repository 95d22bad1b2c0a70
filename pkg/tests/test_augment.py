import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import labels, make_geometry, volume
from petseg.augment import (
    AugmentationSpec,
    SampledTransform,
    apply_gamma,
    apply_transform,
    rotation_matrix,
    sample_transform,
    warp_arrays,
)
from petseg.errors import GridMismatchError, ValidationError
from petseg.volume_io import LabelMap

ALWAYS = AugmentationSpec(p_rotation=1.0, p_scale=1.0, p_elastic=1.0, p_gamma=1.0, p_mirror=1.0)


def blob(shape=(12, 12, 12), seed=0):
    rng = np.random.default_rng(seed)
    img = rng.normal(size=shape)
    lab = np.zeros(shape, np.uint8)
    lab[3:7, 4:8, 5:9] = 1
    lab[8:10, 2:4, 2:4] = 3
    return img, lab


def test_sampling_is_deterministic():
    for s in range(20):
        assert sample_transform(AugmentationSpec(), s) == sample_transform(AugmentationSpec(), s)


def test_disabled_spec_is_identity():
    for s in range(50):
        assert sample_transform(AugmentationSpec.disabled(), s).is_identity


def test_consecutive_seeds_differ():
    diffs = sum(sample_transform(ALWAYS, s) != sample_transform(ALWAYS, s + 1) for s in range(100))
    assert diffs == 100


def test_spec_round_trip_and_validation():
    spec = AugmentationSpec(mirror_axes=(2, 0), p_gamma=0.9)
    assert AugmentationSpec.from_dict(spec.to_dict()) == spec
    assert spec.mirror_axes == (0, 2)
    for bad in ({"p_scale": 1.5}, {"scale": (1.2, 0.8)}, {"scale": (0.0, 1.0)}, {"gamma": (-1.0, 1.0)},
                {"mirror_axes": (3,)}, {"elastic_sigma_mm": 0.0}):
        with pytest.raises(ValidationError):
            AugmentationSpec(**bad)


def test_identity_is_bit_exact():
    img, lab = blob()
    vi, vl = volume(img), labels(lab)
    out_i, out_l = apply_transform(vi, vl, SampledTransform(seed=0))
    assert np.array_equal(out_i.data, vi.data) and np.array_equal(out_l.labels, vl.labels)


def test_mirror_twice_restores():
    img, lab = blob()
    t = SampledTransform(seed=0, mirror=(True, False, True))
    a, la = warp_arrays(img, lab, (1, 1, 1), t)
    assert np.array_equal(a, img[::-1, :, ::-1])
    b, lb = warp_arrays(a, la, (1, 1, 1), t)
    assert np.array_equal(b, img) and np.array_equal(lb, lab)


def test_neutral_parameters_change_nothing():
    img, lab = blob()
    img = img - img.min()
    out, _ = warp_arrays(img, lab, (1, 1, 1), SampledTransform(seed=0, gamma=1.0))
    assert np.abs(out - img).max() <= 1e-12
    out, lo = warp_arrays(img, lab, (1, 1, 1), SampledTransform(seed=0, elastic_amplitude_mm=0.0))
    assert np.array_equal(out, img) and np.array_equal(lo, lab)


def test_quarter_turn_moves_marker_analytically():
    lab = np.zeros((9, 9, 9), np.uint8)
    lab[6, 4, 4] = 1          # centre + (2, 0, 0)
    img = lab.astype(float)
    t = SampledTransform(seed=0, rotation_deg=(0.0, 0.0, 90.0))
    _, out = warp_arrays(img, lab, (1, 1, 1), t)
    expected = np.rint(rotation_matrix((0, 0, 90)) @ np.array([2.0, 0.0, 0.0])).astype(int) + 4
    assert out.sum() == 1 and out[tuple(expected)] == 1
    assert tuple(expected) == (4, 6, 4)


def test_rotation_matrix_is_orthonormal():
    r = rotation_matrix((10.0, -25.0, 40.0))
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-15)
    assert np.linalg.det(r) == pytest.approx(1.0)


def test_gamma_examples():
    x = np.array([0.0, 0.25, 1.0])
    np.testing.assert_allclose(apply_gamma(x, 2.0), [0.0, 0.0625, 1.0])
    assert np.array_equal(apply_gamma(np.full(4, 3.0), 2.0), np.full(4, 3.0))


def test_grid_mismatch():
    img, lab = blob()
    other = LabelMap(make_geometry(lab.shape, origin=(1, 0, 0)), lab)
    with pytest.raises(GridMismatchError):
        apply_transform(volume(img), other, sample_transform(ALWAYS, 0))


def test_channels_share_one_warp():
    img, lab = blob()
    t = sample_transform(ALWAYS, 5)
    both, _ = warp_arrays(np.stack([img, img]), lab, (1, 1, 1), t)
    single, _ = warp_arrays(img, lab, (1, 1, 1), t)
    assert np.array_equal(both[0], both[1]) and np.array_equal(both[0], single)


# -- properties ------------------------------------------------------------------------

@given(seed=st.integers(0, 2**31))
def test_labels_keep_value_set(seed):
    img, lab = blob(seed=seed % 7)
    _, out = warp_arrays(img, lab, (1.0, 1.5, 2.0), sample_transform(ALWAYS, seed))
    assert set(np.unique(out)) <= {0, 1, 3}
    assert out.dtype == lab.dtype and out.shape == lab.shape


@given(seed=st.integers(0, 2**31))
def test_image_and_labels_stay_aligned(seed):
    # an image equal to the label map must warp onto the warped labels wherever the
    # trilinear sample is fully inside one label region
    _, lab = blob()
    img = (lab > 0).astype(np.float64)
    t = sample_transform(AugmentationSpec(p_rotation=1.0, p_scale=1.0, p_elastic=1.0, p_gamma=0.0, p_mirror=1.0), seed)
    oi, ol = warp_arrays(img, lab, (1, 1, 1), t)
    pure = np.isin(oi, [0.0, 1.0])
    assert np.array_equal(oi[pure], (ol[pure] > 0).astype(float))


@given(seed=st.integers(0, 2**31), g=st.floats(0.5, 2.0))
def test_gamma_preserves_range(seed, g):
    x = np.random.default_rng(seed).normal(size=(5, 5, 5))
    y = apply_gamma(x, g)
    assert y.min() == pytest.approx(x.min(), abs=1e-12) and y.max() == pytest.approx(x.max(), abs=1e-12)
    assert np.array_equal(np.argsort(x, axis=None, kind="stable")[[0, -1]], np.argsort(y, axis=None, kind="stable")[[0, -1]])


@given(seed=st.integers(0, 2**31))
def test_disabled_output_bit_equal(seed):
    img, lab = blob()
    t = sample_transform(AugmentationSpec.disabled(), seed)
    oi, ol = apply_transform(volume(img), labels(lab), t)
    assert np.array_equal(oi.data, img) and np.array_equal(ol.labels, lab)
