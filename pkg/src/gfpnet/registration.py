"""ICP with a closed-form similarity (rotation, translation, uniform scale) solve."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud, RigidTransform, SpatialIndex, apply_transform

log = logging.getLogger(__name__)


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> RigidTransform:
    """Least-squares similarity mapping paired rows of ``src`` onto ``dst``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    u, d, vt = np.linalg.svd(cov)
    fix = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        fix[2, 2] = -1.0
    rot = u @ fix @ vt
    var_s = np.sum(xs * xs) / len(src)
    scale = float(np.sum(d * np.diag(fix)) / var_s) if with_scale and var_s > 0 else 1.0
    if scale <= 0:
        scale = 1.0
    return RigidTransform(rot, mu_d - scale * rot @ mu_s, scale)


def oriented_diagonal(points: np.ndarray) -> float:
    """Bounding-box diagonal measured in the cloud's principal-axis frame.

    Unlike the axis-aligned diagonal this does not change when the cloud is
    rotated.
    """
    c = points - points.mean(axis=0)
    _, vecs = np.linalg.eigh(c.T @ c)
    local = c @ vecs
    return float(np.linalg.norm(local.max(axis=0) - local.min(axis=0)))


def _check_geometry(points: np.ndarray):
    c = points - points.mean(axis=0)
    sv = np.linalg.svd(c, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise ValueError("degenerate geometry")


@dataclass
class IcpResult:
    transform: RigidTransform
    rmse: float
    history: list = field(default_factory=list)
    iterations: int = 0


def initial_guesses(source: np.ndarray, target: np.ndarray, shift: float = 0.25) -> list[RigidTransform]:
    """Centroid alignment with the oriented-diagonal scale ratio, then the same
    guess shifted by ``shift`` scaled-source diagonals along each principal
    axis of the target (both signs)."""
    scale = oriented_diagonal(target) / max(oriented_diagonal(source), 1e-300)
    base = target.mean(axis=0) - scale * source.mean(axis=0)
    c = target - target.mean(axis=0)
    _, axes = np.linalg.eigh(c.T @ c)
    step = shift * scale * oriented_diagonal(source)
    out = [RigidTransform(np.eye(3), base, scale)]
    for j in (2, 1, 0):
        for sign in (1.0, -1.0):
            out.append(RigidTransform(np.eye(3), base + sign * step * axes[:, j], scale))
    return out


def _icp_run(src: np.ndarray, tgt: np.ndarray, init: RigidTransform, max_iters: int, tol: float,
             trim_fraction: float, trim_after: int) -> IcpResult:
    current = init
    history = []
    prev = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        moved = current.apply_points(src)
        idx, dist = SpatialIndex(moved).nearest_many(tgt)
        keep = np.arange(len(tgt))
        if it > trim_after and trim_fraction > 0:
            n_keep = max(3, int(np.ceil((1 - trim_fraction) * len(tgt))))
            keep = np.sort(np.argsort(dist, kind="stable")[:n_keep])
        step = umeyama(moved[idx[keep]], tgt[keep])
        candidate = step.compose(current)
        resid = candidate.apply_points(src[idx[keep]]) - tgt[keep]
        rmse = float(np.sqrt(np.mean(np.sum(resid * resid, axis=1))))
        if rmse > prev:
            # numerical noise at convergence; keep the better transform
            rmse = prev
            history.append(rmse)
            break
        current = candidate
        history.append(rmse)
        if prev - rmse < tol:
            break
        prev = rmse
    return IcpResult(current, history[-1] if history else np.inf, history, it)


def icp(source: PointCloud, target: PointCloud, max_iters: int = 50, tol: float = 1e-10,
        trim_fraction: float = 0.1, trim_after: int = 2, init: RigidTransform | None = None) -> IcpResult:
    """Align ``source`` onto ``target``.

    Every target point is paired with its nearest transformed source point, so a
    complete source can be fitted to a partial target. From iteration
    ``trim_after + 1`` on, the worst ``trim_fraction`` of pairs are dropped.
    ``history`` holds the RMSE after each solve and never increases.

    Without ``init`` every guess from :func:`initial_guesses` is refined and
    the lowest final RMSE wins (earlier guesses win ties).
    """
    src, tgt = source.points, target.points
    if len(src) < 10 or len(tgt) < 10:
        raise ValueError("icp needs at least 10 points per cloud")
    _check_geometry(tgt)
    if init is not None:
        return _icp_run(src, tgt, init, max_iters, tol, trim_fraction, trim_after)
    best = None
    for guess in initial_guesses(src, tgt):
        res = _icp_run(src, tgt, guess, max_iters, tol, trim_fraction, trim_after)
        if best is None or res.rmse < best.rmse * (1 - 1e-9) - 1e-15:
            best = res
    return best


def icp_register(source: PointCloud, target: PointCloud, max_iters: int = 50,
                 tol: float = 1e-10) -> tuple[RigidTransform, float]:
    res = icp(source, target, max_iters, tol)
    return res.transform, res.rmse


def register_gp(gp, observation: PointCloud, rounds: int = 5, inner_iters: int = 20,
                tol: float = 1e-10) -> PointCloud:
    """Move a generic primitive into the observation's frame (normals follow)."""
    cloud = gp.cloud if hasattr(gp, "cloud") else gp
    if len(observation) < 10:
        raise ValueError("observation needs at least 10 points")
    res = icp(cloud, observation, rounds * inner_iters, tol)
    out = apply_transform(cloud, res.transform)
    out.meta["transform"] = res.transform
    out.meta["rmse"] = res.rmse
    return out
