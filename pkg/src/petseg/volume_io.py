"""Volumes, voxel grids and NIfTI-1 reading/writing.

Voxel data is held as a 3D numpy array indexed ``[i, j, k]``. On disk NIfTI
stores ``i`` fastest (Fortran order); :attr:`Volume3D.flat` exposes that same
order, so a voxel at index ``(i, j, k)`` sits at flat position
``i + dims[0] * (j + dims[1] * k)`` everywhere in the package.

Header float fields are 32-bit, so geometry survives a write/read round trip
to float32 precision (well inside 1e-6 for clinically sized grids).
"""
from __future__ import annotations

import gzip
import io
import logging
import os
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import (
    DimensionalityError,
    NiftiFormatError,
    RangeError,
    TruncatedFileError,
    UnsupportedDtypeError,
    ValidationError,
)

log = logging.getLogger(__name__)

ORTHO_TOL = 1e-6

# NIfTI-1 datatype code -> numpy dtype (native byte order; swapped on read)
NIFTI_DTYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
DTYPE_CODES = {v.name: k for k, v in NIFTI_DTYPES.items()}

HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]
HEADER_DTYPE = np.dtype(HEADER_FIELDS)
assert HEADER_DTYPE.itemsize == 348

MAGIC_SINGLE = b"n+1\x00"
VOX_OFFSET = 352


@dataclass(frozen=True, eq=False)
class Geometry:
    """Voxel-to-world mapping: ``xyz = origin + direction @ (ijk * spacing)``."""

    dims: tuple
    spacing: tuple
    origin: tuple = (0.0, 0.0, 0.0)
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        direction = np.array(self.direction, dtype=np.float64).reshape(3, 3)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValidationError(f"dims must be 3 positive integers, got {self.dims}")
        if len(spacing) != 3 or not all(np.isfinite(spacing)) or any(s <= 0 for s in spacing):
            raise ValidationError(f"spacing must be 3 positive reals, got {self.spacing}")
        if len(origin) != 3 or not all(np.isfinite(origin)):
            raise ValidationError(f"origin must be 3 finite reals, got {self.origin}")
        if np.abs(direction.T @ direction - np.eye(3)).max() > ORTHO_TOL:
            raise ValidationError("direction columns must be orthonormal")
        direction.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    @property
    def affine(self) -> np.ndarray:
        a = np.eye(4)
        a[:3, :3] = self.direction * np.asarray(self.spacing)
        a[:3, 3] = self.origin
        return a

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @classmethod
    def from_affine(cls, affine, dims) -> "Geometry":
        affine = np.asarray(affine, dtype=np.float64)
        cols = affine[:3, :3]
        spacing = np.linalg.norm(cols, axis=0)
        if np.any(spacing <= 0):
            raise ValidationError("affine has a zero-length axis")
        direction = cols / spacing
        err = np.abs(direction.T @ direction - np.eye(3)).max()
        if err > ORTHO_TOL:
            if err > 1e-3:
                raise ValidationError(f"affine axes are sheared (orthogonality error {err:.2g})")
            # nearest orthonormal matrix; float32 header rounding lands here
            u, _, vt = np.linalg.svd(direction)
            direction = u @ vt
        return cls(tuple(dims), tuple(spacing), tuple(affine[:3, 3]), direction)

    def same_grid(self, other: "Geometry", tol: float = 1e-6) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=tol)
            and np.allclose(self.origin, other.origin, rtol=0, atol=tol)
            and np.allclose(self.direction, other.direction, rtol=0, atol=tol)
        )

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "origin": list(self.origin),
            "direction": self.direction.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Geometry":
        return cls(tuple(d["dims"]), tuple(d["spacing"]), tuple(d["origin"]), np.array(d["direction"]))


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Scalar field on a grid; 64-bit reals, immutable."""

    geometry: Geometry
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.shape != self.geometry.dims:
            raise ValidationError(f"data shape {data.shape} != dims {self.geometry.dims}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("volume contains NaN or Inf")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def flat(self) -> np.ndarray:
        return self.data.ravel(order="F")

    def with_data(self, data) -> "Volume3D":
        return Volume3D(self.geometry, data)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Integer class ids in [0, 256) on a grid; stored as uint8, immutable."""

    geometry: Geometry
    labels: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.labels)
        if raw.shape != self.geometry.dims:
            raise ValidationError(f"label shape {raw.shape} != dims {self.geometry.dims}")
        if raw.dtype.kind == "f":
            if not np.all(np.isfinite(raw)) or np.any(raw != np.round(raw)):
                raise ValidationError("label values must be integers")
        elif raw.dtype.kind not in "iub":
            raise ValidationError(f"unsupported label dtype {raw.dtype}")
        if raw.size and (raw.min() < 0 or raw.max() > 255):
            raise ValidationError("label values must lie in [0, 255]")
        object.__setattr__(self, "labels", _frozen(raw.astype(np.uint8)))

    @property
    def flat(self) -> np.ndarray:
        return self.labels.ravel(order="F")

    @property
    def data(self) -> np.ndarray:
        return self.labels

    def with_labels(self, labels) -> "LabelMap":
        return LabelMap(self.geometry, labels)


AnyVolume = Union[Volume3D, LabelMap]


def voxel_volume_ml(geometry: Geometry) -> float:
    s = geometry.spacing
    return s[0] * s[1] * s[2] / 1000.0


# -- quaternion helpers -------------------------------------------------------

def quaternion_to_rotation(b: float, c: float, d: float) -> np.ndarray:
    a2 = 1.0 - (b * b + c * c + d * d)
    if a2 < 0:
        # b,c,d were normalised with a = 0 (180 degree rotation) up to rounding
        norm = np.sqrt(b * b + c * c + d * d)
        b, c, d = b / norm, c / norm, d / norm
        a = 0.0
    else:
        a = np.sqrt(a2)
    return np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )


def rotation_to_quaternion(direction: np.ndarray):
    """Return (b, c, d, qfac) for a direction matrix; qfac=-1 when det < 0."""
    r = np.array(direction, dtype=np.float64)
    qfac = 1.0
    if np.linalg.det(r) < 0:
        qfac = -1.0
        r[:, 2] = -r[:, 2]
    a = 1.0 + r[0, 0] + r[1, 1] + r[2, 2]
    if a > 0.5:
        a = 0.5 * np.sqrt(a)
        b = 0.25 * (r[2, 1] - r[1, 2]) / a
        c = 0.25 * (r[0, 2] - r[2, 0]) / a
        d = 0.25 * (r[1, 0] - r[0, 1]) / a
    else:
        xd = 1.0 + r[0, 0] - (r[1, 1] + r[2, 2])
        yd = 1.0 + r[1, 1] - (r[0, 0] + r[2, 2])
        zd = 1.0 + r[2, 2] - (r[0, 0] + r[1, 1])
        if xd > 1.0:
            b = 0.5 * np.sqrt(xd)
            c = 0.25 * (r[0, 1] + r[1, 0]) / b
            d = 0.25 * (r[0, 2] + r[2, 0]) / b
            a = 0.25 * (r[2, 1] - r[1, 2]) / b
        elif yd > 1.0:
            c = 0.5 * np.sqrt(yd)
            b = 0.25 * (r[0, 1] + r[1, 0]) / c
            d = 0.25 * (r[1, 2] + r[2, 1]) / c
            a = 0.25 * (r[0, 2] - r[2, 0]) / c
        else:
            d = 0.5 * np.sqrt(zd)
            b = 0.25 * (r[0, 2] + r[2, 0]) / d
            c = 0.25 * (r[1, 2] + r[2, 1]) / d
            a = 0.25 * (r[1, 0] - r[0, 1]) / d
        if a < 0:
            b, c, d = -b, -c, -d
    return float(b), float(c), float(d), qfac


# -- header -------------------------------------------------------------------

@dataclass(frozen=True)
class NiftiHeader:
    """Decoded header fields plus which source produced the geometry."""

    raw: np.ndarray
    byteorder: str
    dims: tuple
    datatype: int
    vox_offset: int
    scl_slope: float
    scl_inter: float
    geometry: Geometry
    geometry_source: str  # "sform", "qform" or "pixdim"


def _open_bytes(path) -> bytes:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        if head == b"\x1f\x8b":
            try:
                with gzip.GzipFile(fileobj=fh) as gz:
                    return gz.read()
            except EOFError as exc:
                raise TruncatedFileError(f"{path}: truncated gzip stream") from exc
        return fh.read()


def _decode_header(buf: bytes, path="<bytes>") -> NiftiHeader:
    if len(buf) < 348:
        raise TruncatedFileError(f"{path}: {len(buf)} bytes, header needs 348")
    for order in ("<", ">"):
        hdr = np.frombuffer(buf[:348], dtype=HEADER_DTYPE.newbyteorder(order))[0]
        if int(hdr["sizeof_hdr"]) == 348:
            break
    else:
        raise NiftiFormatError(f"{path}: sizeof_hdr is not 348 in either byte order")
    if bytes(hdr["magic"]).ljust(4, b"\x00") != MAGIC_SINGLE:
        raise NiftiFormatError(f"{path}: magic {bytes(hdr['magic'])!r} is not single-file NIfTI-1")

    ndim = int(hdr["dim"][0])
    if not 1 <= ndim <= 7:
        raise DimensionalityError(f"{path}: dim[0]={ndim}")
    dims = [int(d) for d in hdr["dim"][1 : ndim + 1]]
    while len(dims) > 3 and dims[-1] == 1:
        dims.pop()
    if len(dims) != 3:
        raise DimensionalityError(f"{path}: expected a 3D volume, got dims {dims}")
    if any(d < 1 for d in dims):
        raise DimensionalityError(f"{path}: non-positive dimension in {dims}")

    datatype = int(hdr["datatype"])
    if datatype not in NIFTI_DTYPES:
        raise UnsupportedDtypeError(f"{path}: datatype code {datatype} not supported")

    pixdim = np.asarray(hdr["pixdim"], dtype=np.float64)
    sform_code = int(hdr["sform_code"])
    qform_code = int(hdr["qform_code"])
    if sform_code > 0:
        affine = np.eye(4)
        affine[0] = hdr["srow_x"]
        affine[1] = hdr["srow_y"]
        affine[2] = hdr["srow_z"]
        geometry = Geometry.from_affine(affine, dims)
        source = "sform"
    elif qform_code > 0:
        rot = quaternion_to_rotation(float(hdr["quatern_b"]), float(hdr["quatern_c"]), float(hdr["quatern_d"]))
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        rot[:, 2] *= qfac
        affine = np.eye(4)
        affine[:3, :3] = rot * np.abs(pixdim[1:4])
        affine[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
        geometry = Geometry.from_affine(affine, dims)
        source = "qform"
    else:
        geometry = Geometry(tuple(dims), tuple(np.abs(pixdim[1:4])))
        source = "pixdim"

    return NiftiHeader(
        raw=hdr,
        byteorder=order,
        dims=tuple(dims),
        datatype=datatype,
        vox_offset=int(hdr["vox_offset"]),
        scl_slope=float(hdr["scl_slope"]),
        scl_inter=float(hdr["scl_inter"]),
        geometry=geometry,
        geometry_source=source,
    )


def read_header(path) -> NiftiHeader:
    return _decode_header(_open_bytes(path), path)


def read_nifti(path, kind: str = "auto") -> AnyVolume:
    """Load a single-file NIfTI-1 volume (``.nii`` or ``.nii.gz``).

    ``kind="auto"`` returns a :class:`LabelMap` for unscaled uint8 files and a
    :class:`Volume3D` otherwise; pass ``"volume"`` or ``"labels"`` to force one.
    """
    buf = _open_bytes(path)
    hdr = _decode_header(buf, path)
    dtype = NIFTI_DTYPES[hdr.datatype].newbyteorder(hdr.byteorder)
    n = int(np.prod(hdr.dims))
    start = max(hdr.vox_offset, 348)
    need = start + n * dtype.itemsize
    if len(buf) < need:
        raise TruncatedFileError(f"{path}: payload has {len(buf) - start} bytes, expected {n * dtype.itemsize}")
    raw = np.frombuffer(buf, dtype=dtype, count=n, offset=start).reshape(hdr.dims, order="F")

    scaled = hdr.scl_slope != 0 and np.isfinite(hdr.scl_slope) and (hdr.scl_slope, hdr.scl_inter) != (1.0, 0.0)
    if kind == "auto":
        kind = "labels" if (hdr.datatype == 2 and not scaled) else "volume"
    if kind == "labels":
        if scaled:
            raw = raw * hdr.scl_slope + hdr.scl_inter
        return LabelMap(hdr.geometry, raw)
    if kind != "volume":
        raise ValueError(f"kind must be auto, volume or labels, got {kind!r}")
    data = raw.astype(np.float64)
    if scaled:
        data = data * hdr.scl_slope + hdr.scl_inter
    return Volume3D(hdr.geometry, data)


def build_header(geometry: Geometry, dtype: str, sform_code: int = 1, qform_code: int = 1) -> np.ndarray:
    """Little-endian 348-byte header for ``geometry`` with identity scaling."""
    if dtype not in DTYPE_CODES:
        raise UnsupportedDtypeError(f"cannot write datatype {dtype!r}")
    hdr = np.zeros((), dtype=HEADER_DTYPE.newbyteorder("<"))
    hdr["sizeof_hdr"] = 348
    hdr["regular"] = b"r"
    hdr["dim"] = [3, *geometry.dims, 1, 1, 1, 1]
    code = DTYPE_CODES[dtype]
    hdr["datatype"] = code
    hdr["bitpix"] = NIFTI_DTYPES[code].itemsize * 8
    b, c, d, qfac = rotation_to_quaternion(geometry.direction)
    hdr["pixdim"] = [qfac, *geometry.spacing, 1, 1, 1, 1]
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # mm
    hdr["qform_code"] = qform_code
    hdr["sform_code"] = sform_code
    hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"] = b, c, d
    hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"] = geometry.origin
    aff = geometry.affine
    hdr["srow_x"], hdr["srow_y"], hdr["srow_z"] = aff[0], aff[1], aff[2]
    hdr["magic"] = MAGIC_SINGLE
    return hdr


def _checked_cast(values: np.ndarray, dtype: str) -> np.ndarray:
    target = np.dtype(dtype)
    if not np.all(np.isfinite(values)):
        raise ValidationError("cannot write NaN or Inf")
    if target.kind in "iu":
        info = np.iinfo(target)
        if values.size and (values.min() < info.min or values.max() > info.max):
            raise RangeError(f"values span [{values.min()}, {values.max()}], outside {dtype}")
        if values.dtype.kind == "f" and np.any(values != np.round(values)):
            raise RangeError(f"non-integer values cannot be written as {dtype}")
    elif target == np.float32 and values.size and np.abs(values).max() > np.finfo(np.float32).max:
        raise RangeError("values overflow float32")
    return values.astype(target.newbyteorder("<"))


def encode_nifti(volume: AnyVolume, dtype: str | None = None, sform_code: int = 1, qform_code: int = 1) -> bytes:
    if dtype is None:
        dtype = "uint8" if isinstance(volume, LabelMap) else "float32"
    payload = _checked_cast(np.asarray(volume.data), dtype)
    hdr = build_header(volume.geometry, dtype, sform_code, qform_code)
    out = io.BytesIO()
    out.write(hdr.tobytes())
    out.write(b"\x00" * (VOX_OFFSET - 348))  # empty extension block
    out.write(payload.tobytes(order="F"))
    return out.getvalue()


def write_nifti(volume: AnyVolume, path, dtype: str | None = None) -> None:
    """Write ``volume``; gzip-compress when ``path`` ends in ``.gz``.

    Compressed output carries no timestamp or filename, so identical inputs
    give byte-identical files.
    """
    blob = encode_nifti(volume, dtype)
    path = os.fspath(path)
    if path.endswith(".gz"):
        with open(path, "wb") as fh, gzip.GzipFile(filename="", mode="wb", fileobj=fh, mtime=0) as gz:
            gz.write(blob)
    else:
        with open(path, "wb") as fh:
            fh.write(blob)
