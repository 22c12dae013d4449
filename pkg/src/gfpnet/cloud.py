"""Point clouds, rigid transforms, k-d tree queries and normal estimation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

# relative slack used when a k-d tree answer may hide an exact tie
_TIE_RTOL = 1e-9
_TIE_ATOL = 1e-12


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointCloud:
    """Ordered points with optional unit normals.

    Arrays are copied to float64 and frozen on construction; point order is
    meaningful (index correspondence is used throughout the pipeline).
    """

    points: np.ndarray
    normals: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("non-finite coordinates")
        object.__setattr__(self, "points", _readonly(pts))
        if self.normals is not None:
            nrm = np.array(self.normals, dtype=np.float64).reshape(-1, 3)
            if nrm.shape != pts.shape:
                raise ValueError(
                    f"normals shape {nrm.shape} does not match points {pts.shape}")
            if len(nrm) and np.max(np.abs(np.linalg.norm(nrm, axis=1) - 1.0)) > 1e-6:
                raise ValueError("normals must be unit length")
            object.__setattr__(self, "normals", _readonly(nrm))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def bounding_diagonal(self) -> float:
        return float(np.linalg.norm(self.points.max(axis=0) - self.points.min(axis=0)))

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx, dtype=np.intp)
        nrm = None if self.normals is None else self.normals[idx]
        return PointCloud(self.points[idx], nrm)

    def with_points(self, points) -> "PointCloud":
        return PointCloud(points, self.normals)

    def without_normals(self) -> "PointCloud":
        return PointCloud(self.points)


@dataclass(frozen=True)
class RigidTransform:
    """x -> scale * rotation @ x + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with det +1")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "rotation", _readonly(r))
        object.__setattr__(self, "translation", _readonly(t))
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(pts) @ self.rotation.T) + self.translation

    def inverse(self) -> "RigidTransform":
        rinv = self.rotation.T
        return RigidTransform(rinv, -(rinv @ self.translation) / self.scale, 1.0 / self.scale)

    def compose(self, first: "RigidTransform") -> "RigidTransform":
        """Transform equivalent to applying ``first`` and then ``self``."""
        return RigidTransform(
            self.rotation @ first.rotation,
            self.scale * (self.rotation @ first.translation) + self.translation,
            self.scale * first.scale,
        )


def rotation_about(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for ``angle`` radians about ``axis``."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def apply_transform(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    normals = None if cloud.normals is None else cloud.normals @ t.rotation.T
    return PointCloud(t.apply_points(cloud.points), normals)


def _dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # the one distance formula every query path uses, so indexed and brute
    # force answers agree to the last bit
    d = a - b
    return np.sqrt(np.sum(d * d, axis=-1))


class SpatialIndex:
    """Immutable k-d tree over a cloud's points.

    Every answer is re-scored with an explicit distance computation and ties
    are resolved towards the lowest point index, so results match a linear
    scan exactly.
    """

    def __init__(self, points):
        if isinstance(points, PointCloud):
            points = points.points
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise ValueError("empty cloud")
        self.points = _readonly(pts.copy())
        self._tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def nearest(self, query) -> tuple[int, float]:
        idx, dist = self.nearest_many(np.asarray(query, dtype=np.float64).reshape(1, 3))
        return int(idx[0]), float(dist[0])

    def nearest_many(self, queries) -> tuple[np.ndarray, np.ndarray]:
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if len(q) == 0:
            return np.zeros(0, dtype=np.intp), np.zeros(0)
        idx, _ = self.knn(q, 1)
        idx = idx[:, 0]
        return idx, _dist(q, self.points[idx])

    def knn(self, queries, k: int, exclude_self: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """k nearest neighbours per query, ordered by (distance, index).

        With ``exclude_self`` the queries must be this index's own points and
        row i never contains i.
        """
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        avail = n - 1 if exclude_self else n
        if k < 1 or k > avail:
            raise ValueError(f"k={k} out of range for {n} points")
        want = min(n, k + 1 + int(exclude_self))
        _, cand = self._tree.query(q, k=want)
        cand = np.asarray(cand).reshape(len(q), want)
        d = _dist(q[:, None, :], self.points[cand])
        if exclude_self:
            d = np.where(cand == np.arange(len(q))[:, None], np.inf, d)
        order = np.lexsort((cand, d), axis=-1)
        cand = np.take_along_axis(cand, order, axis=1)
        d = np.take_along_axis(d, order, axis=1)
        out_i = cand[:, :k].copy()
        out_d = d[:, :k].copy()
        if want > k + int(exclude_self):
            # the first unused candidate sits within tie slack of the k-th
            boundary = d[:, k - 1] * (1 + _TIE_RTOL) + _TIE_ATOL
            ambiguous = np.nonzero(d[:, k] <= boundary)[0]
        else:
            ambiguous = np.zeros(0, dtype=np.intp)
        for r in ambiguous:
            radius = d[r, k - 1] * (1 + _TIE_RTOL) + _TIE_ATOL
            c = np.array(self._tree.query_ball_point(q[r], radius), dtype=np.intp)
            if exclude_self:
                c = c[c != r]
            cd = _dist(q[r], self.points[c])
            o = np.lexsort((c, cd))[:k]
            out_i[r], out_d[r] = c[o], cd[o]
        return out_i, out_d

    def radius_search(self, center, radius: float) -> list[int]:
        if not radius > 0:
            raise ValueError("non-positive radius")
        c = np.asarray(center, dtype=np.float64).reshape(3)
        cand = np.array(self._tree.query_ball_point(c, radius * (1 + _TIE_RTOL) + _TIE_ATOL),
                        dtype=np.intp)
        keep = cand[_dist(c, self.points[cand]) <= radius] if len(cand) else cand
        return sorted(int(i) for i in keep)

    def radius_search_many(self, centers, radius: float) -> list[np.ndarray]:
        if not radius > 0:
            raise ValueError("non-positive radius")
        c = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        lists = self._tree.query_ball_point(c, radius * (1 + _TIE_RTOL) + _TIE_ATOL)
        out = []
        for row, cand in zip(c, lists):
            cand = np.array(sorted(cand), dtype=np.intp)
            if len(cand):
                cand = cand[_dist(row, self.points[cand]) <= radius]
            out.append(cand)
        return out


def build_index(cloud) -> SpatialIndex:
    return SpatialIndex(cloud)


def nearest(index: SpatialIndex, query) -> tuple[int, float]:
    return index.nearest(query)


def radius_search(index: SpatialIndex, center, radius: float) -> list[int]:
    return index.radius_search(center, radius)


def estimate_normals(cloud: PointCloud, k: int = 12) -> PointCloud:
    """PCA normals from each point plus its ``k`` nearest neighbours.

    Normals point away from the cloud centroid. Points whose neighbourhood
    covariance has rank < 2 get the centroid-outward direction instead, and
    their indices are listed in ``meta["degenerate"]``.
    """
    n = len(cloud)
    if k < 3:
        raise ValueError("k must be at least 3")
    if n < 3:
        raise ValueError("need at least 3 points")
    k_eff = min(k, n - 1)
    index = SpatialIndex(cloud.points)
    nbr, _ = index.knn(cloud.points, k_eff, exclude_self=True)
    hood = np.concatenate([cloud.points[:, None, :], cloud.points[nbr]], axis=1)
    centered = hood - hood.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / hood.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()

    outward = cloud.points - cloud.centroid()
    olen = np.linalg.norm(outward, axis=1)
    fallback = np.where(olen[:, None] > 1e-12, outward / np.maximum(olen, 1e-300)[:, None],
                        np.array([0.0, 0.0, 1.0]))
    degenerate = evals[:, 1] <= 1e-12 * np.maximum(evals[:, 2], 1e-300)
    normals[degenerate] = fallback[degenerate]

    flip = np.einsum("ij,ij->i", normals, outward) < 0
    normals[flip] *= -1
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    out = PointCloud(cloud.points, normals)
    out.meta["degenerate"] = [int(i) for i in np.nonzero(degenerate)[0]]
    return out


def normalize_cloud(cloud: PointCloud) -> tuple[PointCloud, RigidTransform]:
    """Center at the centroid and scale to unit bounding diagonal."""
    c = cloud.centroid()
    diag = cloud.bounding_diagonal()
    if diag <= 0:
        raise ValueError("degenerate geometry")
    t = RigidTransform(np.eye(3), -c / diag, 1.0 / diag)
    return apply_transform(cloud, t), t
