"""Exact kNN queries and normal estimation."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components, minimum_spanning_tree
from scipy.spatial import cKDTree

from .pointcloud import PointCloud, read_obj


class InsufficientNeighborsError(ValueError):
    pass


class UndefinedNormalError(ValueError):
    def __init__(self, indices):
        self.indices = [int(i) for i in indices]
        shown = ", ".join(map(str, self.indices[:10]))
        more = "" if len(self.indices) <= 10 else f" (+{len(self.indices) - 10} more)"
        super().__init__(f"normal undefined for degenerate neighborhood at point(s) {shown}{more}")


def thread_count() -> int:
    """Parallelism cap from EDGEFORMER_THREADS, defaulting to the logical core count."""
    env = os.environ.get("EDGEFORMER_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


@dataclass(frozen=True)
class NeighborList:
    indices: np.ndarray
    distances: np.ndarray


class SpatialIndex:
    """Balanced kd-tree over a cloud's points. Queries return source-cloud indices."""

    def __init__(self, points: np.ndarray, leafsize: int = 16):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 1:
            raise ValueError("need an (N, 3) array with N >= 1")
        self.points = pts
        self.leafsize = leafsize
        self._tree = cKDTree(pts, leafsize=leafsize, balanced_tree=True, compact_nodes=True)

    def __len__(self):
        return len(self.points)

    @property
    def size(self) -> int:
        return len(self.points)

    def query_points(self, queries: np.ndarray, k: int):
        """Plain k nearest (self not excluded) for arbitrary query positions."""
        k = min(k, self.size)
        d, i = self._tree.query(np.asarray(queries, dtype=np.float64), k=k, workers=thread_count())
        if k == 1:
            d, i = d[:, None], i[:, None]
        return d, i

    def neighbors(self, k: int, rows: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """k nearest neighbours of each indexed point, self excluded.

        Returns (indices, distances), both (M, k), sorted by ascending distance
        with ties broken by lower point index.
        """
        n = self.size
        if k < 1:
            raise ValueError("k must be positive")
        if k >= n:
            raise InsufficientNeighborsError(f"k={k} needs at least {k + 1} points, cloud has {n}")
        rows = np.arange(n) if rows is None else np.asarray(rows, dtype=np.int64)
        out_i = np.empty((len(rows), k), dtype=np.int64)
        out_d = np.empty((len(rows), k), dtype=np.float64)
        pending = np.arange(len(rows))
        extra = 4
        while len(pending):
            m = min(n, k + 1 + extra)
            d, i = self._tree.query(self.points[rows[pending]], k=m, workers=thread_count())
            d = d.reshape(len(pending), m)
            i = i.reshape(len(pending), m)
            is_self = i == rows[pending][:, None]
            # self sorts last so it drops out whenever a tie at distance 0 exists
            d_key = np.where(is_self, np.inf, d)
            order = np.lexsort((i, d_key), axis=1)
            i_s = np.take_along_axis(i, order, 1)[:, :k]
            d_s = np.take_along_axis(d_key, order, 1)[:, :k]
            if m == n:
                done = np.ones(len(pending), dtype=bool)
            else:
                # neighbours beyond the m-th may tie with the k-th; widen those rows
                done = d[:, -1] > d_s[:, -1]
            out_i[pending[done]] = i_s[done]
            out_d[pending[done]] = d_s[done]
            pending = pending[~done]
            extra = extra * 4 + k
        return out_i, out_d


def build_index(cloud: PointCloud | np.ndarray, leafsize: int = 16) -> SpatialIndex:
    pts = cloud.points if isinstance(cloud, PointCloud) else cloud
    return SpatialIndex(pts, leafsize=leafsize)


def knn(index: SpatialIndex, query_index: int, k: int) -> NeighborList:
    i, d = index.neighbors(k, rows=np.array([query_index]))
    return NeighborList(i[0], d[0])


# ---------------------------------------------------------------- normals


def _pca_normals(points: np.ndarray, nbr: np.ndarray, rows: np.ndarray):
    patch = np.concatenate([points[rows][:, None, :], points[nbr]], axis=1)
    centered = patch - patch.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / patch.shape[1]
    w, v = np.linalg.eigh(cov)
    # rank < 2 leaves the smallest eigenvector ambiguous
    bad = w[:, 1] <= 1e-12 * np.maximum(w[:, 2], 1e-300)
    bad |= w[:, 2] <= 0
    if np.any(bad):
        raise UndefinedNormalError(rows[bad])
    return v[:, :, 0]


def orient_normals_mst(points: np.ndarray, normals: np.ndarray, nbr: np.ndarray) -> np.ndarray:
    """Make normal signs consistent by propagation over a kNN-graph spanning tree.

    Each component's root is its point farthest from the cloud centroid and is
    oriented away from the centroid.
    """
    n = len(points)
    k = nbr.shape[1]
    src = np.repeat(np.arange(n), k)
    dst = nbr.ravel()
    dots = np.abs(np.einsum("ij,ij->i", normals[src], normals[dst]))
    # csgraph treats 0 as a missing edge, so keep weights strictly positive
    w = (1.0 - dots) + 1e-9
    g = coo_matrix((w, (src, dst)), shape=(n, n)).tocsr()
    g = g.maximum(g.T)
    tree = minimum_spanning_tree(g)
    tree = tree + tree.T
    out = normals.copy()
    centroid = points.mean(axis=0)
    radial = points - centroid
    ncomp, comp = connected_components(tree, directed=False)
    dist = np.einsum("ij,ij->i", radial, radial)
    for c in range(ncomp):
        members = np.flatnonzero(comp == c)
        root = members[np.argmax(dist[members])]
        if out[root] @ radial[root] < 0:
            out[root] = -out[root]
        order, pred = breadth_first_order(tree, root, directed=False, return_predecessors=True)
        for node in order[1:]:
            if out[node] @ out[pred[node]] < 0:
                out[node] = -out[node]
    return out


def estimate_normals_pca(cloud: PointCloud, k: int = 20, orient: bool = True) -> PointCloud:
    """Unit normals from the smallest-eigenvalue eigenvector of each point's k-neighbourhood."""
    if cloud.n < k + 1:
        raise InsufficientNeighborsError(f"k={k} needs at least {k + 1} points, cloud has {cloud.n}")
    index = build_index(cloud)
    nbr, _ = index.neighbors(k)
    normals = _pca_normals(cloud.points, nbr, np.arange(cloud.n))
    if orient:
        normals = orient_normals_mst(cloud.points, normals, nbr)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return cloud.with_normals(normals)


def angle_weighted_normals(vertices: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-vertex normals as the incident-angle-weighted sum of face normals.

    Returns (normals, has_face); vertices with no usable face get a zero row.
    """
    v = np.asarray(vertices, dtype=np.float64)
    acc = np.zeros_like(v)
    has = np.zeros(len(v), dtype=bool)
    if len(faces) == 0:
        return acc, has
    f = np.asarray(faces, dtype=np.int64)
    p0, p1, p2 = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    fn = np.cross(p1 - p0, p2 - p0)
    area2 = np.linalg.norm(fn, axis=1)
    ok = area2 > 0
    fn = fn[ok] / area2[ok, None]
    f = f[ok]
    corners = [(v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]), (v[f[:, 1]], v[f[:, 2]], v[f[:, 0]]),
               (v[f[:, 2]], v[f[:, 0]], v[f[:, 1]])]
    for c, (a, b, cc) in enumerate(corners):
        e1, e2 = b - a, cc - a
        ang = np.arctan2(np.linalg.norm(np.cross(e1, e2), axis=1), np.einsum("ij,ij->i", e1, e2))
        np.add.at(acc, f[:, c], fn * ang[:, None])
        has[f[:, c]] = True
    return acc, has


def mesh_vertex_normals(obj_path, k: int = 20) -> PointCloud:
    """Vertex cloud of an OBJ mesh with angle-weighted face normals.

    Vertices without an incident face (or whose weighted sum cancels) fall back
    to PCA over their k nearest vertices.
    """
    verts, faces = read_obj(obj_path)
    acc, has = angle_weighted_normals(verts, faces)
    norms = np.linalg.norm(acc, axis=1)
    good = has & (norms > 1e-12)
    normals = np.zeros_like(acc)
    normals[good] = acc[good] / norms[good, None]
    missing = np.flatnonzero(~good)
    if len(missing):
        kk = min(k, len(verts) - 1)
        if kk < 2:
            raise UndefinedNormalError(missing)
        index = build_index(verts)
        nbr, _ = index.neighbors(kk, rows=missing)
        fb = _pca_normals(verts, nbr, missing)
        radial = verts[missing] - verts.mean(axis=0)
        sign = np.where(np.einsum("ij,ij->i", fb, radial) < 0, -1.0, 1.0)
        normals[missing] = fb * sign[:, None]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(verts, normals)
