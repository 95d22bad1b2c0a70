"""Fold ensembling of class-probability volumes."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInputError, ShapeError, ValidationError
from .volume_io import Geometry, LabelMap, Volume3D, read_nifti, write_nifti

SIMPLEX_TOL = 1e-5


@dataclass(frozen=True, eq=False)
class ProbabilityVolume:
    """Per-class probabilities, ``probs[c, i, j, k]``; every voxel lies on the simplex."""

    geometry: Geometry
    probs: np.ndarray
    class_names: tuple = ()

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64)
        if p.ndim != 4 or p.shape[1:] != self.geometry.dims:
            raise ShapeError(f"probs shape {p.shape} does not match (C, *{self.geometry.dims})")
        if not np.all(np.isfinite(p)) or p.min() < 0:
            raise ValidationError("probabilities must be finite and non-negative")
        if np.abs(p.sum(axis=0) - 1.0).max() > SIMPLEX_TOL:
            raise ValidationError("class probabilities do not sum to 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)
        names = tuple(self.class_names) or tuple(f"class{c}" for c in range(p.shape[0]))
        if len(names) != p.shape[0]:
            raise ShapeError(f"{len(names)} class names for {p.shape[0]} classes")
        object.__setattr__(self, "class_names", names)

    @property
    def n_classes(self) -> int:
        return self.probs.shape[0]


def _check_compatible(maps) -> None:
    if not maps:
        raise EmptyInputError("nothing to ensemble")
    ref = maps[0]
    for m in maps[1:]:
        if m.n_classes != ref.n_classes:
            raise ShapeError(f"class count {m.n_classes} != {ref.n_classes}")
        if not m.geometry.same_grid(ref.geometry):
            raise ShapeError("probability volumes are on different grids")


def _one_hot(labels: np.ndarray, c: int) -> np.ndarray:
    return (labels[None] == np.arange(c).reshape((c, 1, 1, 1))).astype(np.float64)


def average_probabilities(maps, mode: str = "mean") -> ProbabilityVolume:
    """Voxelwise mean of the members' probabilities (``mode="vote"`` averages their one-hot argmaxes).

    Members are sorted per voxel before summation so the result is bitwise
    independent of input order.
    """
    maps = list(maps)
    _check_compatible(maps)
    if mode == "mean":
        stack = np.stack([m.probs for m in maps])
    elif mode == "vote":
        stack = np.stack([_one_hot(np.argmax(m.probs, axis=0), m.n_classes) for m in maps])
    else:
        raise ValidationError(f"unknown ensemble mode {mode!r}")
    mean = np.sort(stack, axis=0).sum(axis=0) / len(maps)
    return ProbabilityVolume(maps[0].geometry, mean, maps[0].class_names)


def argmax_labels(probs: ProbabilityVolume) -> LabelMap:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return LabelMap(probs.geometry, np.argmax(probs.probs, axis=0).astype(np.uint8))


def class_path(prefix, c: int) -> str:
    return f"{os.fspath(prefix)}_class{c}.nii.gz"


def write_probability_volume(pv: ProbabilityVolume, prefix) -> list:
    """Write one float32 NIfTI per class plus ``<prefix>.json`` naming them."""
    paths = []
    for c in range(pv.n_classes):
        path = class_path(prefix, c)
        write_nifti(Volume3D(pv.geometry, pv.probs[c]), path, dtype="float32")
        paths.append(path)
    sidecar = {
        "classes": [{"id": c, "name": n} for c, n in enumerate(pv.class_names)],
        "files": [os.path.basename(p) for p in paths],
    }
    with open(f"{os.fspath(prefix)}.json", "w") as fh:
        json.dump(sidecar, fh, indent=2)
    return paths


def read_probability_volume(prefix) -> ProbabilityVolume:
    prefix = os.fspath(prefix)
    if prefix.endswith(".json"):
        prefix = prefix[:-5]
    with open(f"{prefix}.json") as fh:
        sidecar = json.load(fh)
    classes = sorted(sidecar["classes"], key=lambda e: e["id"])
    vols = [read_nifti(class_path(prefix, e["id"]), kind="volume") for e in classes]
    probs = np.stack([v.data for v in vols])
    # float32 storage: renormalise the rounding drift away
    probs = probs / probs.sum(axis=0, keepdims=True)
    return ProbabilityVolume(vols[0].geometry, probs, tuple(e["name"] for e in classes))
