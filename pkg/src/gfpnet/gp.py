"""Generic primitives: Procrustes averaging of example shapes, MLS smoothing, resampling."""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import asdict, dataclass

import numpy as np

from .cloud import PointCloud, SpatialIndex, estimate_normals
from .formats import read_ply, write_ply
from .registration import icp, initial_guesses, oriented_diagonal

log = logging.getLogger(__name__)


@dataclass
class GenericPrimitive:
    class_name: str
    cloud: PointCloud
    source_count: int
    target_point_count: int
    config_hash: str = ""

    def __post_init__(self):
        if not self.cloud.has_normals:
            raise ValueError("generic primitive needs normals")

    def __len__(self):
        return len(self.cloud)


@dataclass(frozen=True)
class GpConfig:
    target_point_count: int = 2048
    mls_radius: float = 0.05  # in units of the normalised (unit-diagonal) shape
    poly_order: int = 2
    max_rounds: int = 20
    tol: float = 5e-4  # max point movement between rounds, unit-diagonal units
    icp_iters: int = 30
    normal_k: int = 12

    def digest(self) -> str:
        text = ";".join(f"{k}={v!r}" for k, v in sorted(asdict(self).items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def canonical_frame(points: np.ndarray) -> np.ndarray:
    """Rotation whose columns are the principal axes, largest variance first.

    Axis signs are fixed by the third moment so the frame follows the shape
    under rotation; the last axis completes a right-handed frame.
    """
    c = points - points.mean(axis=0)
    _, vecs = np.linalg.eigh(c.T @ c)
    axes = vecs[:, ::-1].copy()
    for j in range(2):
        if np.sum((c @ axes[:, j]) ** 3) < 0:
            axes[:, j] *= -1
    axes[:, 2] = np.cross(axes[:, 0], axes[:, 1])
    return axes


def _unit_normalize(pts: np.ndarray) -> np.ndarray:
    c = pts - pts.mean(axis=0)
    d = oriented_diagonal(c)
    return c / d if d > 0 else c


def procrustes_align(shapes: list[PointCloud], max_rounds: int = 20, tol: float = 5e-4,
                     icp_iters: int = 30) -> tuple[list[PointCloud], PointCloud]:
    """Generalised Procrustes analysis with nearest-neighbour correspondences.

    Each round fits every shape in turn (similarity transform) to the union
    of the other, already updated shapes. Outputs are centred and scaled to a unit bounding
    diagonal, and finally expressed in the mean's principal-axis frame so the
    result does not depend on a common pre-rotation of the inputs.
    ``mean.meta["converged"]`` is False if ``max_rounds`` ran out.
    """
    if len(shapes) < 2:
        raise ValueError("need ≥ 2 shapes")
    for s in shapes:
        if len(s) < 10:
            raise ValueError("each shape needs at least 10 points")
    aligned = [_unit_normalize(s.points) for s in shapes]
    frame = canonical_frame(np.concatenate(aligned))
    aligned = [_unit_normalize(a @ frame) for a in aligned]
    mean = np.concatenate(aligned)
    converged = False
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        before = np.concatenate(aligned)
        for i, pts in enumerate(aligned):
            # leave-one-out target: a shape matched against itself would not move
            others = PointCloud(np.concatenate([a for j, a in enumerate(aligned) if j != i]))
            # shapes start roughly aligned, so only the centroid guess is refined
            init = initial_guesses(pts, others.points)[0]
            res = icp(PointCloud(pts), others, icp_iters, tol=1e-12, trim_fraction=0.0, init=init)
            aligned[i] = _unit_normalize(res.transform.apply_points(pts))
        # pin the rotation gauge; otherwise the ensemble slowly spins as a whole
        mean = np.concatenate(aligned)
        frame = canonical_frame(mean)
        aligned = [_unit_normalize(a @ frame) for a in aligned]
        mean = np.concatenate(aligned)
        move = float(np.max(np.linalg.norm(mean - before, axis=1)))
        log.debug("gpa round %d move %.3g", rounds, move)
        if move < tol:
            converged = True
            break
    if not converged:
        log.warning("procrustes_align did not converge in %d rounds", max_rounds)
    centre = mean.mean(axis=0)
    frame = canonical_frame(mean)
    local = (mean - centre) @ frame
    scale = float(np.linalg.norm(local.max(axis=0) - local.min(axis=0)))
    out_clouds = []
    for s, pts in zip(shapes, aligned):
        p = (pts - centre) @ frame / scale
        out_clouds.append(PointCloud(p - p.mean(axis=0)))
    mean_cloud = PointCloud(local / scale)
    mean_cloud.meta["converged"] = converged
    mean_cloud.meta["rounds"] = rounds
    return out_clouds, mean_cloud


def mls_smooth(cloud: PointCloud, radius: float, poly_order: int = 2,
               min_neighbors: int = 6, chunk: int = 4096) -> PointCloud:
    """Project every point onto a locally fitted weighted polynomial surface.

    Weights are Gaussian with sigma = radius / 2 over the neighbours within
    ``radius`` (the point itself included). A weighted plane gives the local
    frame; with ``poly_order=2`` a height field h(u, v) of degree two is fitted
    on top. Points with fewer than ``min_neighbors`` other neighbours, a
    degenerate neighbourhood, or a projected move beyond 2 * radius are
    returned unchanged and listed in ``meta["unsmoothed"]``.
    """
    if radius <= 0:
        raise ValueError("non-positive radius")
    if poly_order not in (1, 2):
        raise ValueError("poly_order must be 1 or 2")
    pts = cloud.points
    n = len(pts)
    out = pts.copy()
    bad = np.zeros(n, dtype=bool)
    sigma = radius / 2.0
    index = SpatialIndex(pts)
    for lo in range(0, n, chunk):
        q = pts[lo : lo + chunk]
        lists = index.radius_search_many(q, radius)
        counts = np.array([len(l) for l in lists])
        kmax = max(int(counts.max()), 1)
        idx = np.zeros((len(q), kmax), dtype=np.int64)
        mask = np.zeros((len(q), kmax), dtype=bool)
        for i, l in enumerate(lists):
            idx[i, : len(l)] = l
            mask[i, : len(l)] = True
        nb = pts[idx]
        d2 = np.sum((nb - q[:, None, :]) ** 2, axis=2)
        w = np.where(mask, np.exp(-d2 / (2 * sigma * sigma)), 0.0)
        wsum = w.sum(axis=1)
        c = np.einsum("nk,nki->ni", w, nb) / wsum[:, None]
        x = nb - c[:, None, :]
        cov = np.einsum("nk,nki,nkj->nij", w, x, x) / wsum[:, None, None]
        evals, evecs = np.linalg.eigh(cov)
        normal = evecs[:, :, 0]
        e1, e2 = evecs[:, :, 2], evecs[:, :, 1]
        chunk_bad = (counts - 1 < min_neighbors) | (evals[:, 1] <= 1e-12 * np.maximum(evals[:, 2], 1e-300))

        rel = q - c
        u0 = np.einsum("ni,ni->n", rel, e1) / radius
        v0 = np.einsum("ni,ni->n", rel, e2) / radius
        if poly_order == 1:
            h0 = np.zeros(len(q))
        else:
            u = np.einsum("nki,ni->nk", x, e1) / radius
            v = np.einsum("nki,ni->nk", x, e2) / radius
            h = np.einsum("nki,ni->nk", x, normal)
            basis = np.stack([np.ones_like(u), u, v, u * u, u * v, v * v], axis=2)
            a = np.einsum("nk,nkp,nkq->npq", w, basis, basis)
            b = np.einsum("nk,nkp,nk->np", w, basis, h)
            ridge = 1e-12 * np.trace(a, axis1=1, axis2=2)
            a = a + ridge[:, None, None] * np.eye(6)
            coef = np.linalg.solve(a, b[:, :, None])[:, :, 0]
            q0 = np.stack([np.ones_like(u0), u0, v0, u0 * u0, u0 * v0, v0 * v0], axis=1)
            h0 = np.sum(coef * q0, axis=1)
        proj = c + (u0 * radius)[:, None] * e1 + (v0 * radius)[:, None] * e2 + h0[:, None] * normal
        ok = np.all(np.isfinite(proj), axis=1)
        moved = np.linalg.norm(proj - q, axis=1)
        chunk_bad |= ~ok | (moved > 2 * radius)
        sel = ~chunk_bad
        out[lo : lo + chunk][sel] = proj[sel]
        bad[lo : lo + chunk] = chunk_bad
    res = PointCloud(out)
    res.meta["unsmoothed"] = [int(i) for i in np.nonzero(bad)[0]]
    return res


def _voxel_reduce(pts: np.ndarray, edge: float):
    # half-voxel offset keeps flat faces at the bounding box off the cell walls
    keys = np.floor((pts - pts.min(axis=0)) / edge + 0.5).astype(np.int64)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    return inverse.ravel()


def _voxel_count(pts: np.ndarray, edge: float) -> int:
    return int(_voxel_reduce(pts, edge).max()) + 1


def resample(cloud: PointCloud, target_count: int, band: float = 0.02) -> PointCloud:
    """Voxel-grid downsample to ``target_count`` points (within ``band``).

    The voxel edge is found by bisection on a log scale. Each occupied voxel
    contributes its member point nearest to the voxel centroid, so every output
    point is an input point. Output order follows the voxel keys.
    """
    if target_count < 4:
        raise ValueError("target_count must be at least 4")
    n = len(cloud)
    if target_count >= n:
        if target_count > n:
            log.warning("resample target %d exceeds input size %d; returning input", target_count, n)
        return cloud
    pts = cloud.points
    lo_count, hi_count = target_count * (1 - band), target_count * (1 + band)
    lo, hi = np.log(cloud.bounding_diagonal() * 1e-6), np.log(cloud.bounding_diagonal() * 2.0)
    best_edge, best_gap = None, np.inf
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        cnt = _voxel_count(pts, float(np.exp(mid)))
        gap = abs(cnt - target_count)
        if gap < best_gap:
            best_edge, best_gap = float(np.exp(mid)), gap
        if lo_count <= cnt <= hi_count:
            break
        if cnt > target_count:
            lo = mid
        else:
            hi = mid
    if best_gap > band * target_count:
        log.warning("resample landed %d points away from target %d", best_gap, target_count)
    labels = _voxel_reduce(pts, best_edge)
    m = int(labels.max()) + 1
    counts = np.bincount(labels, minlength=m).astype(np.float64)
    cent = np.stack([np.bincount(labels, weights=pts[:, j], minlength=m) for j in range(3)], axis=1)
    cent /= counts[:, None]
    d = np.sum((pts - cent[labels]) ** 2, axis=1)
    dmin = np.full(m, np.inf)
    np.minimum.at(dmin, labels, d)
    # near-ties (e.g. a two-point voxel) go to the lowest index, robust to rounding
    cand = np.nonzero(d <= dmin[labels] + 1e-9 * best_edge * best_edge)[0]
    _, first = np.unique(labels[cand], return_index=True)
    keep = cand[first]
    return cloud.subset(keep)


def build_gp(class_name: str, shapes: list[PointCloud], config: GpConfig = GpConfig()) -> GenericPrimitive:
    """Average example shapes into a smoothed, resampled, centred primitive with normals."""
    if len(shapes) < 2:
        raise ValueError("need ≥ 2 shapes")
    _, mean = procrustes_align(shapes, config.max_rounds, config.tol, config.icp_iters)
    smooth = mls_smooth(mean, config.mls_radius, config.poly_order)
    small = resample(smooth, config.target_point_count)
    pts = small.points - small.points.mean(axis=0)
    cloud = estimate_normals(PointCloud(pts), config.normal_k)
    cloud.meta["converged"] = mean.meta["converged"]
    return GenericPrimitive(class_name, cloud, len(shapes), len(cloud), config.digest())


def save_gp(gp: GenericPrimitive, path) -> None:
    """Write the cloud as PLY and a ``<path>.meta`` key=value sidecar."""
    write_ply(gp.cloud, path)
    with open(str(path) + ".meta", "w", encoding="utf-8", newline="\n") as f:
        f.write(f"class_name={gp.class_name}\n")
        f.write(f"source_count={gp.source_count}\n")
        f.write(f"target_point_count={gp.target_point_count}\n")
        f.write(f"config_hash={gp.config_hash}\n")


def load_gp(path) -> GenericPrimitive:
    """Load a primitive; a missing sidecar yields a class named after the file."""
    cloud = read_ply(path)
    if not cloud.has_normals:
        cloud = estimate_normals(cloud)
    meta = {}
    side = str(path) + ".meta"
    if os.path.exists(side):
        with open(side, encoding="utf-8") as f:
            for line in f:
                if "=" in line:
                    k, v = line.rstrip("\n").split("=", 1)
                    meta[k] = v
    name = meta.get("class_name", os.path.splitext(os.path.basename(str(path)))[0])
    return GenericPrimitive(name, cloud, int(meta.get("source_count", 1)),
                            int(meta.get("target_point_count", len(cloud))), meta.get("config_hash", ""))
