"""Synthetic surface samplers for the toy benchmark and the tests."""

from __future__ import annotations

import numpy as np

from .cloud import PointCloud

_GOLDEN = np.pi * (3.0 - np.sqrt(5.0))


def fibonacci_sphere(n: int) -> np.ndarray:
    """Near-uniform unit vectors on the sphere (deterministic)."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = _GOLDEN * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def random_sphere_dirs(n: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sphere(n: int = 2000, radius: float = 1.0, center=(0.0, 0.0, 0.0), rng=None) -> PointCloud:
    dirs = fibonacci_sphere(n) if rng is None else random_sphere_dirs(n, rng)
    return PointCloud(np.asarray(center) + radius * dirs, dirs)


def ellipsoid(axes, n: int = 2000, rng=None, rotation=None) -> PointCloud:
    """Surface samples of an ellipsoid with semi-axes ``axes``.

    Directions are area-corrected by rejection so the density is roughly
    uniform on the surface; with ``rng=None`` a Fibonacci lattice is stretched
    instead.
    """
    a = np.asarray(axes, dtype=np.float64)
    if rng is None:
        pts = fibonacci_sphere(n) * a
    else:
        chunks, have = [], 0
        # accept with probability proportional to the local area stretch
        gmax = np.max(a) ** 2
        while have < n:
            u = random_sphere_dirs(4 * n, rng)
            p = u * a
            g = np.linalg.norm(u * np.array([a[1] * a[2], a[0] * a[2], a[0] * a[1]]), axis=1)
            ok = rng.random(len(u)) < g / gmax
            chunks.append(p[ok])
            have += int(ok.sum())
        pts = np.concatenate(chunks)[:n]
    normals = pts / (a * a)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    if rotation is not None:
        pts = pts @ np.asarray(rotation).T
        normals = normals @ np.asarray(rotation).T
    return PointCloud(pts, normals)


def plane(n_side: int = 30, size: float = 1.0, z: float = 0.0, jitter: float = 0.0, rng=None) -> PointCloud:
    """Points on z = const over a square; a regular grid unless ``jitter`` > 0."""
    g = np.linspace(-size / 2, size / 2, n_side)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel(), np.full(xx.size, z)], axis=1)
    if jitter > 0:
        step = size / (n_side - 1)
        pts[:, :2] += (rng or np.random.default_rng(0)).uniform(-jitter, jitter, (len(pts), 2)) * step
    return PointCloud(pts)


def cube_surface(n_per_face: int = 400, size: float = 1.0, rng=None) -> PointCloud:
    """Axis-aligned cube centred at the origin, sampled on its six faces."""
    rng = rng or np.random.default_rng(0)
    h = size / 2
    pts, nrm = [], []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            uv = rng.uniform(-h, h, size=(n_per_face, 2))
            p = np.insert(uv, axis, sign * h, axis=1)
            n = np.zeros((n_per_face, 3))
            n[:, axis] = sign
            pts.append(p)
            nrm.append(n)
    return PointCloud(np.concatenate(pts), np.concatenate(nrm))


def box_surface(lo, hi, n_per_face: int, rng: np.random.Generator) -> np.ndarray:
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    out = []
    for axis in range(3):
        for bound in (lo, hi):
            p = rng.uniform(lo, hi, size=(n_per_face, 3))
            p[:, axis] = bound[axis]
            out.append(p)
    return np.concatenate(out)


def car_like(n_per_face: int = 250, seed: int = 0) -> PointCloud:
    """Body box plus an off-centre cabin box; has no rotational symmetry."""
    rng = np.random.default_rng(seed)
    body = box_surface([-1.0, -0.4, 0.0], [1.0, 0.4, 0.5], n_per_face, rng)
    cabin = box_surface([-0.5, -0.35, 0.5], [0.3, 0.35, 0.85], max(1, n_per_face // 2), rng)
    return PointCloud(np.concatenate([body, cabin]))
