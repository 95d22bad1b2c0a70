"""Grid-to-grid resampling, CT intensity normalisation and patch extraction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .volume_io import Geometry, LabelMap, Volume3D

CT_FILL = -1024.0
PET_FILL = 0.0

# sample positions this close to an integer index are treated as on-grid
SNAP_TOL = 1e-9


@dataclass(frozen=True)
class NormalizationSpec:
    clip_lo: float = -1024.0
    clip_hi: float = 1024.0
    mode: str = "zscore_per_volume"

    def __post_init__(self):
        if not self.clip_lo < self.clip_hi:
            raise ValidationError(f"clip_lo {self.clip_lo} must be < clip_hi {self.clip_hi}")
        if self.mode not in ("zscore_per_volume", "none"):
            raise ValidationError(f"unknown normalisation mode {self.mode!r}")


CT_NORMALIZATION = NormalizationSpec()
PET_NORMALIZATION = NormalizationSpec(-np.inf, np.inf, "none")


def world_from_index(geometry: Geometry, ijk) -> np.ndarray:
    """Map voxel indices (shape ``(3,)`` or ``(n, 3)``) to world mm."""
    ijk = np.asarray(ijk, dtype=np.float64)
    scaled = ijk * np.asarray(geometry.spacing)
    return np.asarray(geometry.origin) + scaled @ geometry.direction.T


def index_from_world(geometry: Geometry, xyz) -> np.ndarray:
    xyz = np.asarray(xyz, dtype=np.float64)
    local = (xyz - np.asarray(geometry.origin)) @ geometry.direction
    return local / np.asarray(geometry.spacing)


def _snap(coords: np.ndarray) -> np.ndarray:
    nearest = np.round(coords)
    return np.where(np.abs(coords - nearest) <= SNAP_TOL, nearest, coords)


def interpolate(data: np.ndarray, coords: np.ndarray, mode: str, fill) -> np.ndarray:
    """Sample ``data`` at continuous voxel indices ``coords`` of shape ``(3, ...)``.

    A point is inside the support when every coordinate lies in ``[0, n-1]``;
    anything else takes ``fill``. Nearest mode rounds halves upward.
    """
    coords = _snap(np.asarray(coords, dtype=np.float64))
    shape = np.array(data.shape).reshape((3,) + (1,) * (coords.ndim - 1))
    inside = np.all((coords >= 0) & (coords <= shape - 1), axis=0)

    if mode == "nearest":
        idx = np.floor(coords + 0.5).astype(np.intp)
        idx = np.clip(idx, 0, shape - 1)
        out = data[idx[0], idx[1], idx[2]]
        return np.where(inside, out, np.asarray(fill, dtype=out.dtype))
    if mode != "trilinear":
        raise ValidationError(f"unknown interpolation mode {mode!r}")

    vals = data.astype(np.float64, copy=False)
    c = np.clip(coords, 0, shape - 1)
    lo = np.minimum(np.floor(c).astype(np.intp), np.maximum(shape - 2, 0))
    frac = c - lo
    hi = np.minimum(lo + 1, shape - 1)
    fx, fy, fz = frac
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    out = (
        vals[x0, y0, z0] * (1 - fx) * (1 - fy) * (1 - fz)
        + vals[x1, y0, z0] * fx * (1 - fy) * (1 - fz)
        + vals[x0, y1, z0] * (1 - fx) * fy * (1 - fz)
        + vals[x1, y1, z0] * fx * fy * (1 - fz)
        + vals[x0, y0, z1] * (1 - fx) * (1 - fy) * fz
        + vals[x1, y0, z1] * fx * (1 - fy) * fz
        + vals[x0, y1, z1] * (1 - fx) * fy * fz
        + vals[x1, y1, z1] * fx * fy * fz
    )
    return np.where(inside, out, float(fill))


def resample_to_grid(src, target: Geometry, mode: str = "trilinear", fill: float | None = None):
    """Resample ``src`` onto ``target`` by pulling each target voxel's world point.

    LabelMaps must use nearest mode and return a LabelMap. The default fill is
    ``-1024`` for scalar volumes (air) and ``0`` for labels.
    """
    is_labels = isinstance(src, LabelMap)
    if is_labels and mode != "nearest":
        raise ValidationError("label maps can only be resampled with nearest interpolation")
    if fill is None:
        fill = 0 if is_labels else CT_FILL

    if src.geometry.same_grid(target, tol=0.0):
        return src

    # target index -> world -> source index, as one affine
    m = np.linalg.solve(src.geometry.affine, target.affine)
    out = np.empty(target.dims, dtype=src.data.dtype if is_labels else np.float64)
    j, k = np.meshgrid(np.arange(target.dims[1]), np.arange(target.dims[2]), indexing="ij")
    plane = np.stack([np.zeros_like(j), j, k]).reshape(3, -1).astype(np.float64)
    for i in range(target.dims[0]):
        plane[0] = i
        coords = m[:3, :3] @ plane + m[:3, 3:4]
        out[i] = interpolate(src.data, coords, mode, fill).reshape(target.dims[1:])
    return LabelMap(target, out) if is_labels else Volume3D(target, out)


def normalize(vol: Volume3D, spec: NormalizationSpec) -> Volume3D:
    x = np.clip(vol.data, spec.clip_lo, spec.clip_hi)
    if spec.mode == "zscore_per_volume":
        std = x.std()
        x = np.zeros_like(x) if std < 1e-8 else (x - x.mean()) / std
    return vol.with_data(x)


def normalize_ct(vol: Volume3D, spec: NormalizationSpec = CT_NORMALIZATION) -> Volume3D:
    return normalize(vol, spec)


def extract_patch(vol, corner, size, pad_value: float = 0.0):
    """Cut a ``size`` block starting at voxel ``corner``; missing voxels get ``pad_value``."""
    corner = np.asarray(corner, dtype=np.intp)
    size = np.asarray(size, dtype=np.intp)
    if np.any(size < 1):
        raise ValidationError(f"patch size must be positive, got {tuple(size)}")
    dims = np.asarray(vol.geometry.dims)
    out = np.full(tuple(size), pad_value, dtype=vol.data.dtype)
    lo = np.maximum(corner, 0)
    hi = np.minimum(corner + size, dims)
    if np.all(hi > lo):
        src = tuple(slice(a, b) for a, b in zip(lo, hi))
        dst = tuple(slice(a - c, b - c) for a, b, c in zip(lo, hi, corner))
        out[dst] = vol.data[src]
    g = vol.geometry
    geom = Geometry(tuple(size), g.spacing, tuple(world_from_index(g, corner)), g.direction)
    if isinstance(vol, LabelMap):
        return LabelMap(geom, out)
    return Volume3D(geom, out)
