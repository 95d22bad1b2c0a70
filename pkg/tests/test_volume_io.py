import gzip
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import make_geometry, rotation
from petseg.errors import (
    DimensionalityError,
    NiftiFormatError,
    RangeError,
    TruncatedFileError,
    UnsupportedDtypeError,
    ValidationError,
)
from petseg.volume_io import (
    Geometry,
    LabelMap,
    Volume3D,
    build_header,
    encode_nifti,
    read_header,
    read_nifti,
    voxel_volume_ml,
    write_nifti,
)


def assert_geometry_close(a: Geometry, b: Geometry, tol=1e-6):
    assert a.dims == b.dims
    np.testing.assert_allclose(a.spacing, b.spacing, atol=tol, rtol=0)
    np.testing.assert_allclose(a.origin, b.origin, atol=tol, rtol=0)
    np.testing.assert_allclose(a.direction, b.direction, atol=tol, rtol=0)


# Field offsets of the 348-byte NIfTI-1 header, read with struct as an oracle
# independent of the package's numpy record layout.
OFF = {"sizeof_hdr": 0, "dim": 40, "datatype": 70, "bitpix": 72, "pixdim": 76, "vox_offset": 108,
       "scl_slope": 112, "scl_inter": 116, "qform_code": 252, "sform_code": 254, "srow_x": 280, "magic": 344}


def raw_header(path):
    with open(path, "rb") as fh:
        head = fh.read()
    if head[:2] == b"\x1f\x8b":
        head = gzip.decompress(head)
    return head


def col(values):
    return np.asarray(values, dtype=np.float64).reshape(-1, 1, 1)


def patch(blob: bytes, offset: int, fmt: str, *values) -> bytes:
    b = bytearray(blob)
    struct.pack_into(fmt, b, offset, *values)
    return bytes(b)


# -- examples ------------------------------------------------------------------------

@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_float32_round_trip_bit_exact(tmp_path, suffix):
    g = Geometry((2, 2, 2), (0.7, 1.3, 2.1), (-5.0, 3.25, 100.0), rotation(0.3, -0.2, 1.1))
    data = np.arange(8, dtype=np.float32).reshape(2, 2, 2) * np.float32(0.1) - np.float32(0.3)
    path = tmp_path / f"v{suffix}"
    write_nifti(Volume3D(g, data), path)
    back = read_nifti(path)
    assert isinstance(back, Volume3D)
    assert np.array_equal(back.data.astype(np.float32), data)
    assert_geometry_close(back.geometry, g)


def test_uint8_labels_pass_through(tmp_path):
    g = make_geometry((3, 2, 2))
    lab = np.array([0, 1, 2] * 4, dtype=np.uint8).reshape(3, 2, 2)
    write_nifti(LabelMap(g, lab), tmp_path / "l.nii.gz")
    back = read_nifti(tmp_path / "l.nii.gz")
    assert isinstance(back, LabelMap)
    assert set(np.unique(back.labels)) == {0, 1, 2}
    assert np.array_equal(back.labels, lab)


def test_max_label_nine_round_trips(tmp_path):
    lab = np.arange(10, dtype=np.uint8).reshape(10, 1, 1)
    write_nifti(LabelMap(make_geometry((10, 1, 1)), lab), tmp_path / "l.nii")
    assert np.array_equal(read_nifti(tmp_path / "l.nii").labels, lab)


def test_nan_volume_rejected():
    with pytest.raises(ValidationError):
        Volume3D(make_geometry((2, 1, 1)), col([1.0, np.nan]))


def test_spacing_in_header_pixdim(tmp_path):
    path = tmp_path / "s.nii"
    write_nifti(Volume3D(make_geometry((2, 2, 2), (2, 2, 3)), np.zeros((2, 2, 2))), path)
    raw = raw_header(path)
    assert struct.unpack_from("<i", raw, OFF["sizeof_hdr"])[0] == 348
    pixdim = struct.unpack_from("<8f", raw, OFF["pixdim"])
    assert pixdim[1:4] == (2.0, 2.0, 3.0)
    assert struct.unpack_from("<2f", raw, OFF["scl_slope"]) == (1.0, 0.0)
    assert struct.unpack_from("<h", raw, OFF["sform_code"])[0] > 0
    assert raw[OFF["magic"] : OFF["magic"] + 4] == b"n+1\x00"
    assert read_header(path).geometry.spacing == (2.0, 2.0, 3.0)


def test_bad_magic_is_format_error(tmp_path):
    blob = encode_nifti(Volume3D(make_geometry((2, 2, 2)), np.zeros((2, 2, 2))))
    (tmp_path / "bad.nii").write_bytes(patch(blob, OFF["magic"], "4s", b"ni1\x00"))
    with pytest.raises(NiftiFormatError):
        read_nifti(tmp_path / "bad.nii")


def test_unsupported_datatype(tmp_path):
    blob = encode_nifti(Volume3D(make_geometry((2, 2, 2)), np.zeros((2, 2, 2))))
    (tmp_path / "c.nii").write_bytes(patch(blob, OFF["datatype"], "<h", 32))  # complex64
    with pytest.raises(UnsupportedDtypeError):
        read_nifti(tmp_path / "c.nii")


def test_truncated_payload(tmp_path):
    blob = encode_nifti(Volume3D(make_geometry((4, 4, 4)), np.ones((4, 4, 4))))
    (tmp_path / "t.nii").write_bytes(blob[:-5])
    with pytest.raises(TruncatedFileError):
        read_nifti(tmp_path / "t.nii")
    (tmp_path / "h.nii").write_bytes(blob[:200])
    with pytest.raises(TruncatedFileError):
        read_nifti(tmp_path / "h.nii")


def test_truncated_gzip_stream(tmp_path):
    write_nifti(Volume3D(make_geometry((8, 8, 8)), np.ones((8, 8, 8))), tmp_path / "g.nii.gz")
    data = (tmp_path / "g.nii.gz").read_bytes()
    (tmp_path / "cut.nii.gz").write_bytes(data[: len(data) // 2])
    with pytest.raises(TruncatedFileError):
        read_nifti(tmp_path / "cut.nii.gz")


def test_dimensionality(tmp_path):
    blob = encode_nifti(Volume3D(make_geometry((2, 2, 2)), np.zeros((2, 2, 2))))
    # trailing singleton dims are squeezed
    (tmp_path / "a.nii").write_bytes(patch(blob, OFF["dim"], "<8h", 5, 2, 2, 2, 1, 1, 1, 1))
    assert read_nifti(tmp_path / "a.nii").geometry.dims == (2, 2, 2)
    (tmp_path / "b.nii").write_bytes(patch(blob, OFF["dim"], "<8h", 4, 2, 2, 1, 2, 1, 1, 1))
    with pytest.raises(DimensionalityError):
        read_nifti(tmp_path / "b.nii")
    (tmp_path / "c.nii").write_bytes(patch(blob, OFF["dim"], "<8h", 2, 2, 4, 1, 1, 1, 1, 1))
    with pytest.raises(DimensionalityError):
        read_nifti(tmp_path / "c.nii")


def test_unrepresentable_values_range_error(tmp_path):
    v = Volume3D(make_geometry((2, 1, 1)), col([0.0, 300.0]))
    with pytest.raises(RangeError):
        write_nifti(v, tmp_path / "x.nii", dtype="uint8")
    with pytest.raises(RangeError):
        write_nifti(Volume3D(make_geometry((1, 1, 1)), col([0.5])), tmp_path / "y.nii", dtype="int16")
    with pytest.raises(RangeError):
        write_nifti(Volume3D(make_geometry((1, 1, 1)), col([1e39])), tmp_path / "z.nii")


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        write_nifti(Volume3D(make_geometry((1, 1, 1)), col([0.0])), tmp_path / "missing" / "x.nii")


def test_geometry_priority_sform_then_qform_then_pixdim(tmp_path):
    g = Geometry((3, 3, 3), (1.5, 2.0, 2.5), (10.0, -20.0, 30.0), rotation(0.1, 0.5, -0.7))
    v = Volume3D(g, np.zeros((3, 3, 3)))
    both = encode_nifti(v)
    # move the sform origin: sform must win over qform
    moved = patch(both, OFF["srow_x"] + 12, "<f", 99.0)
    (tmp_path / "s.nii").write_bytes(moved)
    h = read_header(tmp_path / "s.nii")
    assert h.geometry_source == "sform"
    assert h.geometry.origin[0] == pytest.approx(99.0)

    (tmp_path / "q.nii").write_bytes(encode_nifti(v, sform_code=0))
    h = read_header(tmp_path / "q.nii")
    assert h.geometry_source == "qform"
    assert_geometry_close(h.geometry, g, tol=1e-5)

    (tmp_path / "p.nii").write_bytes(encode_nifti(v, sform_code=0, qform_code=0))
    h = read_header(tmp_path / "p.nii")
    assert h.geometry_source == "pixdim"
    assert h.geometry.spacing == (1.5, 2.0, 2.5)
    assert h.geometry.origin == (0.0, 0.0, 0.0)
    assert np.array_equal(h.geometry.direction, np.eye(3))


def test_qform_reflection_via_qfac(tmp_path):
    d = np.diag([1.0, 1.0, -1.0])
    g = Geometry((2, 2, 2), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), d)
    (tmp_path / "r.nii").write_bytes(encode_nifti(Volume3D(g, np.zeros((2, 2, 2))), sform_code=0))
    assert_geometry_close(read_header(tmp_path / "r.nii").geometry, g)


def test_scaling_applied(tmp_path):
    blob = encode_nifti(Volume3D(make_geometry((2, 1, 1)), col([1.0, 2.0])))
    (tmp_path / "s.nii").write_bytes(patch(blob, OFF["scl_slope"], "<2f", 2.0, -1.0))
    assert np.array_equal(read_nifti(tmp_path / "s.nii").data.ravel(), [1.0, 3.0])
    # slope 0 means "no scaling"
    (tmp_path / "z.nii").write_bytes(patch(blob, OFF["scl_slope"], "<2f", 0.0, 5.0))
    assert np.array_equal(read_nifti(tmp_path / "z.nii").data.ravel(), [1.0, 2.0])


def test_big_endian_file(tmp_path):
    g = make_geometry((2, 3, 1), (1.0, 2.0, 3.0))
    data = np.arange(6, dtype=np.int16).reshape(2, 3, 1) - 2
    hdr = build_header(g, "int16")
    big = hdr.astype(hdr.dtype.newbyteorder(">"))
    blob = big.tobytes() + b"\x00" * 4 + data.astype(">i2").tobytes(order="F")
    (tmp_path / "be.nii").write_bytes(blob)
    back = read_nifti(tmp_path / "be.nii")
    assert np.array_equal(back.data, data)
    assert back.geometry.spacing == (1.0, 2.0, 3.0)


@pytest.mark.parametrize("dtype", ["uint8", "int16", "int32", "float32", "float64"])
def test_all_supported_dtypes(tmp_path, dtype):
    data = np.arange(8).reshape(2, 2, 2)
    write_nifti(Volume3D(make_geometry((2, 2, 2)), data), tmp_path / "d.nii", dtype=dtype)
    back = read_nifti(tmp_path / "d.nii", kind="volume")
    assert np.array_equal(back.data, data)


def test_gzip_output_is_deterministic(tmp_path):
    v = Volume3D(make_geometry((4, 4, 4)), np.random.default_rng(0).normal(size=(4, 4, 4)))
    write_nifti(v, tmp_path / "a.nii.gz")
    write_nifti(v, tmp_path / "b.nii.gz")
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()


@pytest.mark.parametrize("spacing, ml", [((1, 1, 1), 0.001), ((2, 2, 2), 0.008), ((2, 2, 3), 0.012)])
def test_voxel_volume_ml(spacing, ml):
    assert voxel_volume_ml(make_geometry((1, 1, 1), spacing)) == pytest.approx(ml, rel=1e-15)


def test_geometry_invariants():
    with pytest.raises(ValidationError):
        make_geometry((0, 1, 1))
    with pytest.raises(ValidationError):
        make_geometry((1, 1, 1), (1, -1, 1))
    with pytest.raises(ValidationError):
        make_geometry((1, 1, 1), direction=[[1, 0, 0], [0.1, 1, 0], [0, 0, 1]])


def test_volumes_are_immutable():
    v = Volume3D(make_geometry((2, 1, 1)), col([1.0, 2.0]))
    with pytest.raises(ValueError):
        v.data[0] = 5.0


# -- properties ------------------------------------------------------------------------

dims_st = st.tuples(*(st.integers(1, 5),) * 3)


@given(dims=dims_st, data=st.data(), gz=st.booleans())
def test_single_voxel_index_round_trips(tmp_path_factory, dims, data, gz):
    ijk = tuple(data.draw(st.integers(0, d - 1)) for d in dims)
    lab = np.zeros(dims, dtype=np.uint8)
    lab[ijk] = 1
    path = tmp_path_factory.mktemp("vox") / ("m.nii.gz" if gz else "m.nii")
    write_nifti(LabelMap(make_geometry(dims), lab), path)
    back = read_nifti(path).labels
    assert tuple(int(i) for i in np.argwhere(back)[0]) == ijk


@given(
    dims=dims_st,
    seed=st.integers(0, 2**32 - 1),
    spacing=st.tuples(*(st.floats(0.1, 10.0),) * 3),
    origin=st.tuples(*(st.floats(-500, 500),) * 3),
    angles=st.tuples(*(st.floats(-np.pi, np.pi),) * 3),
)
def test_float32_round_trip_property(tmp_path_factory, dims, seed, spacing, origin, angles):
    data = np.random.default_rng(seed).normal(0, 1000, size=dims).astype(np.float32)
    g = Geometry(dims, spacing, origin, rotation(*angles))
    path = tmp_path_factory.mktemp("rt") / "v.nii.gz"
    write_nifti(Volume3D(g, data), path)
    back = read_nifti(path)
    assert np.array_equal(back.data.astype(np.float32), data)
    # header stores float32; compare at float32 resolution of the magnitudes involved
    np.testing.assert_allclose(back.geometry.spacing, np.float32(spacing), rtol=1e-6)
    np.testing.assert_allclose(back.geometry.origin, np.float32(origin), rtol=0, atol=1e-6 * 512)
    np.testing.assert_allclose(back.geometry.direction, g.direction, atol=1e-6)
