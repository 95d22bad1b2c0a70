"""Training-time spatial and intensity augmentation.

All spatial transforms are folded into one pull-back warp, resampled once
(trilinear for images, nearest for labels). The content is transformed in the
fixed order mirror -> rotate -> scale -> elastic about the volume centre, in
voxel-axis coordinates scaled to mm. Gamma is applied to the image afterwards.

Draws use numpy's PCG64 generator (``np.random.default_rng(seed)``) in a fixed
order that does not depend on which transforms end up applied.

Default ranges (rotation +-30 deg, scale [0.7, 1.4], gamma [0.7, 1.5]) are
toolkit defaults, not tuned values.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import GridMismatchError, ValidationError
from .preprocess import interpolate
from .volume_io import LabelMap, Volume3D


def _range(r, name):
    lo, hi = float(r[0]), float(r[1])
    if not lo <= hi:
        raise ValidationError(f"{name} range {r} is not ordered")
    return (lo, hi)


def _prob(p, name):
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"{name} probability {p} outside [0, 1]")
    return float(p)


@dataclass(frozen=True)
class AugmentationSpec:
    rotation_deg: tuple = ((-30.0, 30.0), (-30.0, 30.0), (-30.0, 30.0))
    scale: tuple = (0.7, 1.4)
    elastic_amplitude_mm: tuple = (0.0, 4.0)
    elastic_sigma_mm: float = 8.0
    elastic_control_stride: int = 4
    gamma: tuple = (0.7, 1.5)
    mirror_axes: tuple = (0, 1, 2)
    p_rotation: float = 0.2
    p_scale: float = 0.2
    p_elastic: float = 0.2
    p_gamma: float = 0.3
    p_mirror: float = 0.5

    def __post_init__(self):
        rot = tuple(_range(r, "rotation") for r in self.rotation_deg)
        if len(rot) != 3:
            raise ValidationError("rotation_deg needs one range per axis")
        object.__setattr__(self, "rotation_deg", rot)
        scale = _range(self.scale, "scale")
        if scale[0] <= 0:
            raise ValidationError("scale factors must be positive")
        object.__setattr__(self, "scale", scale)
        amp = _range(self.elastic_amplitude_mm, "elastic amplitude")
        if amp[0] < 0:
            raise ValidationError("elastic amplitude must be non-negative")
        object.__setattr__(self, "elastic_amplitude_mm", amp)
        gamma = _range(self.gamma, "gamma")
        if gamma[0] <= 0:
            raise ValidationError("gamma must be positive")
        object.__setattr__(self, "gamma", gamma)
        if self.elastic_sigma_mm <= 0 or self.elastic_control_stride < 1:
            raise ValidationError("elastic smoothing and control stride must be positive")
        if not set(self.mirror_axes) <= {0, 1, 2}:
            raise ValidationError(f"mirror axes {self.mirror_axes} not in {{0, 1, 2}}")
        object.__setattr__(self, "mirror_axes", tuple(sorted(set(self.mirror_axes))))
        for name in ("p_rotation", "p_scale", "p_elastic", "p_gamma", "p_mirror"):
            _prob(getattr(self, name), name)

    @classmethod
    def disabled(cls) -> "AugmentationSpec":
        return cls(p_rotation=0.0, p_scale=0.0, p_elastic=0.0, p_gamma=0.0, p_mirror=0.0)

    def to_dict(self) -> dict:
        return {
            "rotation_deg": [list(r) for r in self.rotation_deg],
            "scale": list(self.scale),
            "elastic_amplitude_mm": list(self.elastic_amplitude_mm),
            "elastic_sigma_mm": self.elastic_sigma_mm,
            "elastic_control_stride": self.elastic_control_stride,
            "gamma": list(self.gamma),
            "mirror_axes": list(self.mirror_axes),
            "p_rotation": self.p_rotation,
            "p_scale": self.p_scale,
            "p_elastic": self.p_elastic,
            "p_gamma": self.p_gamma,
            "p_mirror": self.p_mirror,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationSpec":
        d = dict(d)
        for key in ("scale", "elastic_amplitude_mm", "gamma", "mirror_axes"):
            if key in d:
                d[key] = tuple(d[key])
        if "rotation_deg" in d:
            d["rotation_deg"] = tuple(tuple(r) for r in d["rotation_deg"])
        return cls(**d)


@dataclass(frozen=True)
class SampledTransform:
    seed: int
    rotation_deg: tuple = (0.0, 0.0, 0.0)
    scale: float = 1.0
    elastic_amplitude_mm: float = 0.0
    elastic_sigma_mm: float = 8.0
    elastic_control_stride: int = 4
    elastic_seed: int = 0
    gamma: float = 1.0
    mirror: tuple = (False, False, False)

    @property
    def has_warp(self) -> bool:
        return any(r != 0.0 for r in self.rotation_deg) or self.scale != 1.0 or self.elastic_amplitude_mm > 0

    @property
    def is_identity(self) -> bool:
        return not self.has_warp and not any(self.mirror) and self.gamma == 1.0


def sample_transform(spec: AugmentationSpec, seed: int) -> SampledTransform:
    rng = np.random.default_rng(seed)
    # every draw happens unconditionally so the stream layout is fixed
    u = rng.random(7)  # apply draws: rotation, scale, elastic, gamma, mirror x3
    angles = [rng.uniform(lo, hi) for lo, hi in spec.rotation_deg]
    scale = rng.uniform(*spec.scale)
    amp = rng.uniform(*spec.elastic_amplitude_mm)
    elastic_seed = int(rng.integers(0, 2**63 - 1))
    gamma = rng.uniform(*spec.gamma)

    return SampledTransform(
        seed=seed,
        rotation_deg=tuple(float(a) for a in angles) if u[0] < spec.p_rotation else (0.0, 0.0, 0.0),
        scale=float(scale) if u[1] < spec.p_scale else 1.0,
        elastic_amplitude_mm=float(amp) if u[2] < spec.p_elastic else 0.0,
        elastic_sigma_mm=spec.elastic_sigma_mm,
        elastic_control_stride=spec.elastic_control_stride,
        elastic_seed=elastic_seed,
        gamma=float(gamma) if u[3] < spec.p_gamma else 1.0,
        mirror=tuple(bool(ax in spec.mirror_axes and u[4 + ax] < spec.p_mirror) for ax in range(3)),
    )


def rotation_matrix(angles_deg) -> np.ndarray:
    """Rotation applied to content: about axis 0, then axis 1, then axis 2."""
    a, b, c = np.deg2rad(angles_deg)
    rx = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
    ry = np.array([[np.cos(b), 0, np.sin(b)], [0, 1, 0], [-np.sin(b), 0, np.cos(b)]])
    rz = np.array([[np.cos(c), -np.sin(c), 0], [np.sin(c), np.cos(c), 0], [0, 0, 1]])
    return rz @ ry @ rx


def elastic_field(dims, spacing, t: SampledTransform) -> np.ndarray:
    """Displacement in mm, shape ``(3, *dims)``; peak component magnitude equals the amplitude."""
    rng = np.random.default_rng(t.elastic_seed)
    stride = t.elastic_control_stride
    ctrl = tuple(max(2, -(-d // stride) + 1) for d in dims)
    field_ = rng.uniform(-1.0, 1.0, size=(3,) + ctrl)
    sigma = [t.elastic_sigma_mm / (stride * s) for s in spacing]
    field_ = np.stack([ndimage.gaussian_filter(f, sigma, mode="nearest") for f in field_])
    peak = np.abs(field_).max()
    if peak > 0:
        field_ *= t.elastic_amplitude_mm / peak
    # trilinear upsampling of control points onto the voxel grid
    grid = np.meshgrid(*[np.arange(d) * (c - 1) / max(d - 1, 1) for d, c in zip(dims, ctrl)], indexing="ij")
    coords = np.stack(grid)
    return np.stack([interpolate(f, coords, "trilinear", 0.0) for f in field_])


def source_coordinates(dims, spacing, t: SampledTransform) -> np.ndarray:
    """Voxel indices in the input to sample for every output voxel, shape ``(3, *dims)``."""
    dims = tuple(dims)
    s = np.asarray(spacing, dtype=np.float64).reshape(3, 1, 1, 1)
    centre = (np.asarray(dims, dtype=np.float64) - 1).reshape(3, 1, 1, 1) / 2
    idx = np.stack(np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij"))
    p = (idx - centre) * s  # output position in mm

    # undo in reverse order: elastic, scale, rotate, mirror
    if t.elastic_amplitude_mm > 0:
        # displacement field is defined in pull form
        p = p - elastic_field(dims, spacing, t)
    p = p / t.scale
    rot = rotation_matrix(t.rotation_deg)
    p = np.einsum("ji,j...->i...", rot, p)  # R^T p
    for ax in range(3):
        if t.mirror[ax]:
            p[ax] = -p[ax]
    return p / s + centre


def apply_gamma(x: np.ndarray, gamma: float) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if gamma == 1.0 or hi <= lo:
        return x
    return ((x - lo) / (hi - lo)) ** gamma * (hi - lo) + lo


def warp_arrays(image: np.ndarray, labels: np.ndarray | None, spacing, t: SampledTransform):
    """Array-level core of :func:`apply_transform`; ``image`` may carry leading channels."""
    chans = image if image.ndim == 4 else image[None]
    if t.has_warp:
        src = source_coordinates(chans.shape[1:], spacing, t)
        chans = np.stack([interpolate(c, src, "trilinear", float(c.min())) for c in chans])
        if labels is not None:
            labels = interpolate(labels, src, "nearest", 0)
    elif any(t.mirror):
        axes = tuple(ax for ax in range(3) if t.mirror[ax])
        chans = np.flip(chans, axis=tuple(a + 1 for a in axes))
        if labels is not None:
            labels = np.flip(labels, axis=axes)
    if t.gamma != 1.0:
        chans = np.stack([apply_gamma(c, t.gamma) for c in chans])
    out = chans if image.ndim == 4 else chans[0]
    return np.ascontiguousarray(out), (None if labels is None else np.ascontiguousarray(labels))


def apply_transform(image: Volume3D, labels: LabelMap, t: SampledTransform):
    if not image.geometry.same_grid(labels.geometry):
        raise GridMismatchError("image and labels must share a grid")
    if t.is_identity:
        return image, labels
    img, lab = warp_arrays(image.data, labels.labels, image.geometry.spacing, t)
    return image.with_data(img), labels.with_labels(lab)
