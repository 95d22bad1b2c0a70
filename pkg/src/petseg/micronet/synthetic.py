"""Synthetic PET/CT studies with lesion-mimicking organs.

Uptake in the "organs" is drawn from the same range as in the lesions, so
intensity alone cannot tell them apart; size, position and a faint CT density
difference can. That is the confusion the multilabel arm is meant to resolve.

Each organ has its own anatomy: a fixed anchor relative to the volume centre,
a typical size and a soft-tissue density, all jittered per study. Without
this, organ classes would be interchangeable and a multilabel target would
ask the network to separate indistinguishable blobs.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..errors import ValidationError
from ..label_fusion import DEFAULT_CLASS_NAMES, LabelSchema, fuse_labels
from ..preprocess import normalize_ct
from ..volume_io import Geometry, LabelMap, Volume3D

SPACING_MM = 4.0
UPTAKE_RANGE = (3.0, 6.0)
LESION_AXES_VOX = (1.2, 2.6)
PET_NOISE = 0.25
BODY_HU, AIR_HU = 40.0, -1000.0
ANCHOR_JITTER_FRAC = 0.04
AXES_JITTER = (0.85, 1.15)

# name: (centre offset, semi-axes, both as fractions of the volume size; CT HU)
ORGAN_ANATOMY = {
    "liver": ((0.05, -0.15, 0.0), (0.16, 0.2, 0.15), 60.0),
    "kidneys": ((-0.1, 0.18, 0.1), (0.12, 0.1, 0.1), 30.0),
    "urinary_bladder": ((-0.3, 0.0, -0.05), (0.1, 0.11, 0.1), 8.0),
    "spleen": ((0.05, 0.2, -0.1), (0.12, 0.1, 0.1), 45.0),
    "lung": ((0.25, -0.1, 0.1), (0.15, 0.12, 0.12), -700.0),
    "brain": ((0.36, 0.0, 0.0), (0.1, 0.12, 0.12), 32.0),
    "heart": ((0.22, 0.08, -0.05), (0.11, 0.11, 0.11), 45.0),
    "stomach": ((0.0, 0.12, 0.15), (0.12, 0.1, 0.1), 20.0),
}


def _ellipsoid(dims, centre, axes, rot):
    grid = np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij"), axis=-1)
    local = (grid - centre) @ rot
    return ((local / axes) ** 2).sum(axis=-1) <= 1.0


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.diag(r))


def generate_synthetic_study(size=(32, 32, 32), n_organs: int = 3, n_lesions: int = 2, seed: int = 0):
    """Return ``(pet, ct, lesion, organs)``; ``organs`` is one binary LabelMap per organ."""
    dims = tuple(int(s) for s in size)
    if len(dims) != 3 or min(dims) < 16:
        raise ValidationError(f"synthetic studies need at least 16 voxels per axis, got {size}")
    if n_organs < 0 or n_lesions < 0:
        raise ValidationError("organ and lesion counts must be non-negative")
    if n_organs > len(ORGAN_ANATOMY):
        raise ValidationError(f"at most {len(ORGAN_ANATOMY)} organs can be generated")
    rng = np.random.default_rng(seed)
    d = np.asarray(dims, dtype=np.float64)
    centre = (d - 1) / 2
    body = _ellipsoid(dims, centre, 0.46 * d, np.eye(3))

    organs, organ_hu = [], []
    for name in DEFAULT_CLASS_NAMES[2 : 2 + n_organs]:
        offset, axes_frac, hu = ORGAN_ANATOMY[name]
        c = centre + (np.asarray(offset) + rng.uniform(-ANCHOR_JITTER_FRAC, ANCHOR_JITTER_FRAC, 3)) * d
        axes = np.asarray(axes_frac) * rng.uniform(*AXES_JITTER, 3) * d
        organs.append(_ellipsoid(dims, c, axes, _random_rotation(rng)) & body)
        organ_hu.append(hu)
    any_organ = np.zeros(dims, bool)
    for m in organs:
        any_organ |= m

    lesion = np.zeros(dims, bool)
    lesion_uptake = np.zeros(dims)
    for _ in range(n_lesions):
        axes = rng.uniform(*LESION_AXES_VOX, 3)
        for _attempt in range(50):
            c = centre + rng.uniform(-0.35, 0.35, 3) * d
            m = _ellipsoid(dims, c, axes, _random_rotation(rng)) & body
            if m.any() and not (m & (any_organ | lesion)).any():
                break
        lesion |= m
        lesion_uptake[m] = rng.uniform(*UPTAKE_RANGE)

    pet = np.where(body, 1.0, 0.1) + 0.3 * ndimage.gaussian_filter(rng.normal(size=dims), 2.0) * body
    for m in organs:
        pet[m] = rng.uniform(*UPTAKE_RANGE)
    pet[lesion] = lesion_uptake[lesion]
    pet = pet + PET_NOISE * rng.normal(size=dims)
    pet = np.maximum(pet, 0.0)

    ct = np.where(body, BODY_HU, AIR_HU) + 15.0 * ndimage.gaussian_filter(rng.normal(size=dims), 2.5) * body
    for m, hu in zip(organs, organ_hu):
        ct[m] = hu + 15.0 * ndimage.gaussian_filter(rng.normal(size=dims), 2.5)[m]
    ct = ndimage.gaussian_filter(ct, 0.6) + 5.0 * rng.normal(size=dims)

    geom = Geometry(dims, (SPACING_MM,) * 3)
    return (
        Volume3D(geom, pet),
        Volume3D(geom, ct),
        LabelMap(geom, lesion.astype(np.uint8)),
        [LabelMap(geom, m.astype(np.uint8)) for m in organs],
    )


def histogram_intersection(a, b, bins: int = 32) -> float:
    """Overlap of two normalised histograms on their common range, in [0, 1]."""
    a, b = np.ravel(a), np.ravel(b)
    if a.size == 0 or b.size == 0:
        return 0.0
    lo, hi = min(a.min(), b.min()), max(a.max(), b.max())
    ha, _ = np.histogram(a, bins=bins, range=(lo, hi))
    hb, _ = np.histogram(b, bins=bins, range=(lo, hi))
    return float(np.minimum(ha / a.size, hb / b.size).sum())


def synthetic_schema(n_organs: int) -> LabelSchema:
    """Background, lesion and the first ``n_organs`` organ names."""
    if n_organs > len(DEFAULT_CLASS_NAMES) - 2:
        raise ValidationError(f"at most {len(DEFAULT_CLASS_NAMES) - 2} organs are named")
    return LabelSchema(DEFAULT_CLASS_NAMES[: 2 + n_organs])


def study_to_sample(pet: Volume3D, ct: Volume3D, lesion: LabelMap, organs, multilabel: bool):
    """Network input ``(2, D, H, W)`` float64 and a target label array.

    PET is used as is; CT is clipped and z-scored. The multilabel target fuses
    organs below the lesion; the single-label target is the lesion mask.
    """
    x = np.stack([pet.data, normalize_ct(ct).data])
    if multilabel and organs:
        target = fuse_labels(lesion, organs, schema=synthetic_schema(len(organs)))
        target = target.labels
    else:
        target = lesion.labels
    return x, np.ascontiguousarray(target)


def synthetic_dataset(n_cases: int, size=(32, 32, 32), n_organs: int = 3, n_lesions: int = 2,
                      seed: int = 0, multilabel: bool = True):
    """``n_cases`` (x, y) pairs; case ``i`` uses seed ``seed * 100003 + i``."""
    out = []
    for i in range(n_cases):
        study = generate_synthetic_study(size, n_organs, n_lesions, seed * 100003 + i)
        out.append(study_to_sample(*study, multilabel=multilabel))
    return out

