"""Small constructors shared by the test modules."""
import numpy as np

from petseg.volume_io import Geometry, LabelMap, Volume3D


def make_geometry(dims, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), direction=None):
    return Geometry(tuple(dims), tuple(spacing), tuple(origin), np.eye(3) if direction is None else direction)


def labels(arr, spacing=(1.0, 1.0, 1.0)):
    arr = np.asarray(arr)
    return LabelMap(make_geometry(arr.shape, spacing), arr.astype(np.uint8))


def volume(arr, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    arr = np.asarray(arr, dtype=np.float64)
    return Volume3D(make_geometry(arr.shape, spacing, origin), arr)


def rotation(ax, ay, az):
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx
