"""Independent set-based reference implementations used as test oracles.

Nothing here imports the package's metric code or scipy: components come from
an explicit breadth-first search over neighbour offsets, surfaces from
per-voxel neighbour checks, and surface distances from all-pairs comparison.
"""
from __future__ import annotations

import itertools
import math
from collections import deque


def neighbour_offsets(conn: int):
    """Offsets whose squared length is 1 (6), <= 2 (18) or <= 3 (26)."""
    limit = {6: 1, 18: 2, 26: 3}[conn]
    return [d for d in itertools.product((-1, 0, 1), repeat=3) if 0 < sum(c * c for c in d) <= limit]


def voxel_set(mask):
    return {tuple(int(i) for i in idx) for idx in zip(*mask.nonzero())}


def components(voxels: set, conn: int) -> list:
    """Maximal connected subsets of ``voxels`` as a list of sets."""
    offsets = neighbour_offsets(conn)
    remaining = set(voxels)
    out = []
    while remaining:
        seed = min(remaining)
        comp = {seed}
        queue = deque([seed])
        remaining.discard(seed)
        while queue:
            v = queue.popleft()
            for d in offsets:
                n = (v[0] + d[0], v[1] + d[1], v[2] + d[2])
                if n in remaining:
                    remaining.discard(n)
                    comp.add(n)
                    queue.append(n)
        out.append(comp)
    return out


def dice(p: set, g: set) -> float:
    if not p and not g:
        return 1.0
    return 2.0 * len(p & g) / (len(p) + len(g))


def untouched_count(a: set, b: set, conn: int) -> int:
    return sum(len(c) for c in components(a, conn) if not (c & b))


def surface(voxels: set, shape) -> set:
    """Voxels with at least one 6-neighbour outside the set (or outside the grid)."""
    out = set()
    for v in voxels:
        for d in neighbour_offsets(6):
            n = (v[0] + d[0], v[1] + d[1], v[2] + d[2])
            inside = all(0 <= n[i] < shape[i] for i in range(3))
            if not inside or n not in voxels:
                out.add(v)
                break
    return out


def _dist(a, b, spacing) -> float:
    return math.sqrt(sum(((a[i] - b[i]) * spacing[i]) ** 2 for i in range(3)))


def nsd(p: set, g: set, shape, spacing, tol: float) -> float:
    sp, sg = surface(p, shape), surface(g, shape)
    if not sp and not sg:
        return 1.0
    if not sp or not sg:
        return 0.0
    hit_p = sum(1 for a in sp if min(_dist(a, b, spacing) for b in sg) <= tol)
    hit_g = sum(1 for b in sg if min(_dist(b, a, spacing) for a in sp) <= tol)
    return (hit_p + hit_g) / (len(sp) + len(sg))


def case_metrics(pred, gt, spacing, conn: int, tol: float) -> dict:
    """All four lesion metrics for boolean arrays ``pred`` and ``gt``."""
    p, g = voxel_set(pred), voxel_set(gt)
    vox_ml = spacing[0] * spacing[1] * spacing[2] / 1000.0
    return {
        "inter": len(p & g),
        "fp_voxels": untouched_count(p, g, conn),
        "fn_voxels": untouched_count(g, p, conn),
        "n_components": len(components(p, conn)),
        "dice": dice(p, g),
        "fpv_ml": untouched_count(p, g, conn) * vox_ml,
        "fnv_ml": untouched_count(g, p, conn) * vox_ml,
        "nsd": nsd(p, g, pred.shape, spacing, tol),
    }

