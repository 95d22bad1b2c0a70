"""Fuse a lesion mask and binary organ masks into one multilabel map, and back."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatchError, ValidationError
from .volume_io import LabelMap, voxel_volume_ml

LESION = 1

DEFAULT_CLASS_NAMES = (
    "background",
    "lesion",
    "liver",
    "kidneys",
    "urinary_bladder",
    "spleen",
    "lung",
    "brain",
    "heart",
    "stomach",
)


@dataclass(frozen=True)
class LabelSchema:
    names: tuple = DEFAULT_CLASS_NAMES

    def __post_init__(self):
        names = tuple(self.names)
        if len(names) < 2 or names[0] != "background" or names[1] != "lesion":
            raise ValidationError("schema must start with background (0) and lesion (1)")
        if len(set(names)) != len(names):
            raise ValidationError("class names must be unique")
        if len(names) > 256:
            raise ValidationError("at most 256 classes fit in a uint8 label map")
        object.__setattr__(self, "names", names)

    @property
    def n_classes(self) -> int:
        return len(self.names)

    @property
    def foreground(self) -> tuple:
        return tuple(range(1, self.n_classes))

    @property
    def organ_names(self) -> tuple:
        return self.names[2:]

    def id_of(self, name: str) -> int:
        return self.names.index(name)

    def subset(self, organs) -> "LabelSchema":
        """Schema with background, lesion and the given organs, renumbered consecutively."""
        for o in organs:
            if o not in self.organ_names:
                raise ValidationError(f"unknown organ {o!r}")
        return LabelSchema(("background", "lesion", *organs))

    def to_json(self) -> str:
        return json.dumps([{"id": i, "name": n} for i, n in enumerate(self.names)], indent=2)

    @classmethod
    def from_json(cls, text: str) -> "LabelSchema":
        entries = sorted(json.loads(text), key=lambda e: e["id"])
        if [e["id"] for e in entries] != list(range(len(entries))):
            raise ValidationError("schema ids must be consecutive from 0")
        return cls(tuple(e["name"] for e in entries))


DEFAULT_SCHEMA = LabelSchema()
BINARY_SCHEMA = LabelSchema(("background", "lesion"))


@dataclass(frozen=True)
class FusionPolicy:
    """Class ids in decreasing priority; a voxel takes the first class whose mask covers it."""

    precedence: tuple = ()

    @classmethod
    def default(cls, schema: LabelSchema = DEFAULT_SCHEMA) -> "FusionPolicy":
        return cls(schema.foreground)

    def check(self, schema: LabelSchema) -> None:
        if sorted(self.precedence) != list(schema.foreground):
            raise ValidationError(f"precedence {self.precedence} is not a permutation of {schema.foreground}")


def _binary(mask: LabelMap, what: str) -> np.ndarray:
    vals = mask.labels
    if vals.size and vals.max() > 1:
        raise ValidationError(f"{what} mask is not binary (max value {vals.max()})")
    return vals.astype(bool)


def fuse_labels(lesion: LabelMap, organs, policy: FusionPolicy | None = None,
                schema: LabelSchema = DEFAULT_SCHEMA) -> LabelMap:
    organs = list(organs)
    if len(organs) != schema.n_classes - 2:
        raise ValidationError(f"schema expects {schema.n_classes - 2} organ masks, got {len(organs)}")
    policy = policy or FusionPolicy.default(schema)
    policy.check(schema)
    for name, m in zip(schema.organ_names, organs):
        if not m.geometry.same_grid(lesion.geometry):
            raise GridMismatchError(f"{name} mask is not on the lesion grid; resample first")

    masks = {LESION: _binary(lesion, "lesion")}
    for cls_id, (name, m) in enumerate(zip(schema.organ_names, organs), start=2):
        masks[cls_id] = _binary(m, name)

    fused = np.zeros(lesion.geometry.dims, dtype=np.uint8)
    for cls_id in reversed(policy.precedence):
        fused[masks[cls_id]] = cls_id
    return LabelMap(lesion.geometry, fused)


def reduce_to_lesion(multilabel: LabelMap, schema: LabelSchema = DEFAULT_SCHEMA) -> LabelMap:
    vals = multilabel.labels
    if vals.size and vals.max() >= schema.n_classes:
        raise ValidationError(f"label {vals.max()} outside schema of {schema.n_classes} classes")
    return multilabel.with_labels((vals == LESION).astype(np.uint8))


@dataclass
class LabelReport:
    valid: bool
    out_of_schema: list
    counts: dict = field(default_factory=dict)
    volumes_ml: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "valid": self.valid,
            "out_of_schema": self.out_of_schema,
            "counts": self.counts,
            "volumes_ml": self.volumes_ml,
        }


def validate_label_map(label_map: LabelMap, schema: LabelSchema = DEFAULT_SCHEMA) -> LabelReport:
    hist = np.bincount(label_map.labels.ravel(), minlength=256)
    bad = [int(v) for v in np.nonzero(hist[schema.n_classes:])[0] + schema.n_classes]
    ml = voxel_volume_ml(label_map.geometry)
    counts = {name: int(hist[i]) for i, name in enumerate(schema.names)}
    volumes = {name: counts[name] * ml for name in schema.names}
    return LabelReport(not bad, bad, counts, volumes)


def overlap_counts(lesion: LabelMap, organs, schema: LabelSchema = DEFAULT_SCHEMA) -> dict:
    """Pairwise voxel overlaps between input masks, keyed ``"a&b"``; zero pairs omitted."""
    named = [("lesion", _binary(lesion, "lesion"))]
    named += [(n, _binary(m, n)) for n, m in zip(schema.organ_names, organs)]
    out = {}
    for a in range(len(named)):
        for b in range(a + 1, len(named)):
            n = int(np.count_nonzero(named[a][1] & named[b][1]))
            if n:
                out[f"{named[a][0]}&{named[b][0]}"] = n
    return out
