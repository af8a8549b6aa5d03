"""Local-patch projection-distance descriptors.

For a point p_i with neighbours p_j (j = 1..K):

    d1[i, j] = |p_i . n_j - p_j . n_j|   (offset of p_i from p_j's tangent plane)
    d2[i, j] = |p_j . n_i - p_i . n_i|   (offset of p_j from p_i's tangent plane)

Values below 1e-6 are clamped to exactly 0.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .pointcloud import PointCloud
from .spatial import build_index

THRESHOLD = 1e-6
DEFAULT_K = 20

_MAGIC = b"EFD1"
_VERSION = 1


class NormalsRequiredError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PatchDescriptors:
    d1: np.ndarray
    d2: np.ndarray
    neighbor_indices: np.ndarray

    @property
    def k(self) -> int:
        return self.d1.shape[1]

    @property
    def n(self) -> int:
        return self.d1.shape[0]


def _dot3(a, b):
    # fixed left-to-right order; the scalar oracle in the tests relies on it
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def projection_distance(p, q, n) -> float:
    """|p.n - q.n|, or 0.0 when that falls below the 1e-6 threshold."""
    p, q, n = (np.asarray(v, dtype=np.float64) for v in (p, q, n))
    v = float(abs(_dot3(p, n) - _dot3(q, n)))
    return v if v >= THRESHOLD else 0.0


def descriptors_from_neighbors(points: np.ndarray, normals: np.ndarray, nbr: np.ndarray):
    pi = points[:, None, :]
    ni = normals[:, None, :]
    pj = points[nbr]
    nj = normals[nbr]
    d1 = np.abs(_dot3(pi, nj) - _dot3(pj, nj))
    d2 = np.abs(_dot3(pj, ni) - _dot3(pi, ni))
    d1[d1 < THRESHOLD] = 0.0
    d2[d2 < THRESHOLD] = 0.0
    return d1, d2


def compute_descriptors(cloud: PointCloud, k: int = DEFAULT_K) -> PatchDescriptors:
    """D1/D2 matrices (N x k) over each point's k nearest neighbours (self excluded).

    Columns follow ascending neighbour distance.
    """
    if cloud.normals is None:
        raise NormalsRequiredError("descriptors need per-point normals; estimate them first")
    index = build_index(cloud)
    nbr, _ = index.neighbors(k)
    d1, d2 = descriptors_from_neighbors(cloud.points, cloud.normals, nbr)
    return PatchDescriptors(d1, d2, nbr)


def save_descriptors(desc: PatchDescriptors, path) -> None:
    n, k = desc.d1.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", _VERSION, n, k))
        fh.write(np.ascontiguousarray(desc.d1, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(desc.d2, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(desc.neighbor_indices, dtype="<u4").tobytes())


def load_descriptors(path) -> PatchDescriptors:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a descriptor file (bad magic)")
    version, n, k = struct.unpack_from("<III", raw, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported descriptor version {version}")
    expected = 16 + n * k * 12
    if len(raw) != expected:
        raise ValueError(f"{path}: truncated, expected {expected} bytes, got {len(raw)}")
    off = 16
    d1 = np.frombuffer(raw, "<f4", n * k, off).reshape(n, k).astype(np.float32)
    off += 4 * n * k
    d2 = np.frombuffer(raw, "<f4", n * k, off).reshape(n, k).astype(np.float32)
    off += 4 * n * k
    nbr = np.frombuffer(raw, "<u4", n * k, off).reshape(n, k).astype(np.int64)
    return PatchDescriptors(d1, d2, nbr)
