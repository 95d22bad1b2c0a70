"""Lesion metrics: Dice, false-positive/negative volume, normalized surface dice.

Masks may be passed as :class:`LabelMap` (grids are checked) or as plain
boolean/integer arrays together with a :class:`Geometry`.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import EmptyInputError, GridMismatchError, ValidationError
from .label_fusion import DEFAULT_SCHEMA, LabelSchema, reduce_to_lesion
from .volume_io import Geometry, LabelMap, voxel_volume_ml

CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}
DEFAULT_CONNECTIVITY = 26
DEFAULT_NSD_TOLERANCE_MM = 2.0
METRIC_NAMES = ("dice", "fpv_ml", "fnv_ml", "nsd")

# relative slack on the NSD tolerance so both distance routes agree at the boundary
_DIST_SLACK = 1e-12


def _mask(m) -> np.ndarray:
    arr = m.labels if isinstance(m, LabelMap) else np.asarray(m)
    if arr.dtype != bool:
        if arr.size and arr.max() > 1:
            raise ValidationError("mask is not binary")
        arr = arr.astype(bool)
    if arr.ndim != 3:
        raise ValidationError(f"mask must be 3D, got shape {arr.shape}")
    return arr


def _pair(pred, gt):
    if isinstance(pred, LabelMap) and isinstance(gt, LabelMap):
        if not pred.geometry.same_grid(gt.geometry):
            raise GridMismatchError("prediction and ground truth are on different grids")
    p, g = _mask(pred), _mask(gt)
    if p.shape != g.shape:
        raise GridMismatchError(f"shape {p.shape} != {g.shape}")
    return p, g


def _geometry(geom, *masks) -> Geometry:
    if geom is not None:
        return geom
    for m in masks:
        if isinstance(m, LabelMap):
            return m.geometry
    raise ValidationError("a Geometry is required for volume metrics on raw arrays")


def connected_components(mask, conn: int = DEFAULT_CONNECTIVITY):
    """Label maximal components; ids 1..K in ascending order of each component's first voxel (C order)."""
    if conn not in CONNECTIVITY_RANK:
        raise ValidationError(f"connectivity must be 6, 18 or 26, got {conn}")
    structure = ndimage.generate_binary_structure(3, CONNECTIVITY_RANK[conn])
    labels, k = ndimage.label(_mask(mask), structure=structure)
    return labels, int(k)


def dice(pred, gt) -> float:
    p, g = _pair(pred, gt)
    sp, sg = int(p.sum()), int(g.sum())
    if sp + sg == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(p & g)) / (sp + sg)


def _untouched_volume(a: np.ndarray, b: np.ndarray, conn: int) -> int:
    """Voxel count of components of ``a`` that share no voxel with ``b``."""
    labels, k = connected_components(a, conn)
    if k == 0:
        return 0
    sizes = np.bincount(labels.ravel(), minlength=k + 1)
    touched = np.bincount(labels[b], minlength=k + 1) > 0
    touched[0] = True
    return int(sizes[~touched].sum())


def false_positive_volume(pred, gt, geom: Geometry | None = None, conn: int = DEFAULT_CONNECTIVITY) -> float:
    p, g = _pair(pred, gt)
    return _untouched_volume(p, g, conn) * voxel_volume_ml(_geometry(geom, pred, gt))


def false_negative_volume(pred, gt, geom: Geometry | None = None, conn: int = DEFAULT_CONNECTIVITY) -> float:
    p, g = _pair(pred, gt)
    return _untouched_volume(g, p, conn) * voxel_volume_ml(_geometry(geom, pred, gt))


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a background 6-neighbour; outside the volume counts as background."""
    m = _mask(mask)
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[1:-1, 1:-1, 1:-1].copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return m & ~interior


def _within_brute(src: np.ndarray, dst: np.ndarray, spacing, tol: float, chunk: int = 4096) -> int:
    """Count points of ``src`` (voxel index rows) within ``tol`` mm of any ``dst`` point."""
    s = np.asarray(spacing)
    a = src * s
    b = dst * s
    limit = tol * (1 + _DIST_SLACK) + _DIST_SLACK
    hits = 0
    for start in range(0, len(a), chunk):
        block = a[start : start + chunk]
        d2 = ((block[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        hits += int(np.count_nonzero(np.sqrt(d2.min(axis=1)) <= limit))
    return hits


def _within_edt(src: np.ndarray, dst: np.ndarray, spacing, tol: float) -> int:
    dist = ndimage.distance_transform_edt(~dst, sampling=spacing)
    limit = tol * (1 + _DIST_SLACK) + _DIST_SLACK
    return int(np.count_nonzero(dist[src] <= limit))


def surface_dice(pred, gt, geom: Geometry | None = None, tolerance_mm: float = DEFAULT_NSD_TOLERANCE_MM,
                 method: str = "edt") -> float:
    """Normalized surface dice between voxel-boundary sets.

    Distances are between voxel centres in world mm; the direction matrix is
    orthonormal so index offsets scaled by spacing give the same lengths.
    ``method="brute"`` compares every boundary pair and is the reference for
    the distance-transform route.
    """
    if tolerance_mm < 0:
        raise ValidationError("tolerance must be non-negative")
    p, g = _pair(pred, gt)
    spacing = _geometry(geom, pred, gt).spacing
    bp, bg = boundary(p), boundary(g)
    n_p, n_g = int(bp.sum()), int(bg.sum())
    if n_p + n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    if method == "edt":
        hits = _within_edt(bp, bg, spacing, tolerance_mm) + _within_edt(bg, bp, spacing, tolerance_mm)
    elif method == "brute":
        ip, ig = np.argwhere(bp).astype(np.float64), np.argwhere(bg).astype(np.float64)
        hits = _within_brute(ip, ig, spacing, tolerance_mm) + _within_brute(ig, ip, spacing, tolerance_mm)
    else:
        raise ValidationError(f"unknown surface distance method {method!r}")
    return hits / (n_p + n_g)


@dataclass
class CaseMetrics:
    study_id: str
    dice: float
    fpv_ml: float
    fnv_ml: float
    nsd: float | None = None


def evaluate_case(pred: LabelMap, gt: LabelMap, schema: LabelSchema = DEFAULT_SCHEMA,
                  conn: int = DEFAULT_CONNECTIVITY, tolerance_mm: float = DEFAULT_NSD_TOLERANCE_MM,
                  study_id: str = "", with_nsd: bool = True) -> CaseMetrics:
    """Score the lesion class of ``pred`` against ``gt`` (multilabel maps are reduced first)."""
    if not pred.geometry.same_grid(gt.geometry):
        raise GridMismatchError(f"{study_id}: prediction and ground truth are on different grids")
    p = reduce_to_lesion(pred, schema)
    g = reduce_to_lesion(gt, schema)
    geom = gt.geometry
    return CaseMetrics(
        study_id=study_id,
        dice=dice(p, g),
        fpv_ml=false_positive_volume(p, g, geom, conn),
        fnv_ml=false_negative_volume(p, g, geom, conn),
        nsd=surface_dice(p, g, geom, tolerance_mm) if with_nsd else None,
    )


@dataclass
class MetricsReport:
    rows: list
    aggregates: dict = field(default_factory=dict)
    ci_method: str = "percentile_bootstrap"
    ci_level: float = 0.95
    n_boot: int = 10000
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "aggregates": self.aggregates,
            "ci_method": self.ci_method,
            "ci_level": self.ci_level,
            "n_boot": self.n_boot,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("study_id",) + METRIC_NAMES)
        for r in self.rows:
            w.writerow((r.study_id, r.dice, r.fpv_ml, r.fnv_ml, "" if r.nsd is None else r.nsd))
        return buf.getvalue()


def bootstrap_ci(values: np.ndarray, idx: np.ndarray, ci_level: float):
    means = values[idx].mean(axis=1)
    alpha = (1.0 - ci_level) / 2.0
    lo, hi = np.percentile(means, [100 * alpha, 100 * (1 - alpha)])
    return float(lo), float(hi)


def summarize(rows, ci_level: float = 0.95, n_boot: int = 10000, seed: int = 0) -> MetricsReport:
    """Per-metric mean, population std and percentile-bootstrap CI of the mean.

    Rows are sorted by study id first and all metrics share one resampling
    matrix, so the result depends only on the row set and ``seed``.
    """
    rows = sorted(rows, key=lambda r: r.study_id)
    if not rows:
        raise EmptyInputError("cannot summarise zero cases")
    if not 0 < ci_level < 1:
        raise ValidationError(f"ci_level must be in (0, 1), got {ci_level}")
    rng = np.random.default_rng(seed)
    n = len(rows)
    idx = rng.integers(0, n, size=(n_boot, n))

    aggregates = {}
    for name in METRIC_NAMES:
        vals = [getattr(r, name) for r in rows]
        if any(v is None for v in vals):
            continue
        vals = np.asarray(vals, dtype=np.float64)
        mean = float(vals.mean())
        lo, hi = bootstrap_ci(vals, idx, ci_level) if n > 1 else (mean, mean)
        aggregates[name] = {
            "mean": mean,
            "std": float(vals.std()),
            "ci_lo": min(lo, mean),
            "ci_hi": max(hi, mean),
        }
    return MetricsReport(rows, aggregates, "percentile_bootstrap", ci_level, n_boot, seed)
