"""Patch extraction, whole-shape completion, partial-view synthesis and dataset building."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import minimum_filter
from scipy.spatial.transform import Rotation

from .cloud import PointCloud, SpatialIndex
from .formats import DatasetManifest, ManifestEntry, save_manifest, write_ply
from .gfs import GfsConfig, make_label
from .gp import GenericPrimitive, save_gp
from .net import NetworkConfig, Patch, iterative_complete_batch
from .registration import register_gp
from .shapes import fibonacci_sphere

log = logging.getLogger(__name__)

PATCH_RADIUS_FRACTION = 0.08
FOOTPRINT = 1.0  # pixel size at the surface, in median point spacings
HOLE_FILL = 2  # extra pixels searched for an occluding surface
DEPTH_TOL = 0.05  # fraction of the shape's extent
DEPTH_SLOPE = 3.0  # depth change allowed per unit of lateral distance
CHUNK = 256  # patches per work unit; fixed so results do not depend on the worker count


def patch_radius(cloud: PointCloud, fraction: float = PATCH_RADIUS_FRACTION) -> float:
    return fraction * cloud.bounding_diagonal()


def _fit_count(idx: np.ndarray, count: int, rng_seed, keep_first: bool = True) -> np.ndarray:
    """Bring an index list to ``count`` entries.

    Longer lists keep a seeded subset without repeats (always including
    ``idx[0]`` when ``keep_first``); shorter ones are repeated cyclically.
    """
    if len(idx) == count:
        return idx
    if len(idx) < count:
        return np.resize(idx, count)
    rng = np.random.default_rng(rng_seed)
    if keep_first:
        rest = rng.choice(len(idx) - 1, count - 1, replace=False)
        return np.concatenate([idx[:1], idx[1:][np.sort(rest)]])
    return idx[np.sort(rng.choice(len(idx), count, replace=False))]


def extract_patches(gp_registered: PointCloud, observation: PointCloud, radius: float,
                    cfg: NetworkConfig = NetworkConfig(), seed: int = 0,
                    indices=None) -> list[Patch]:
    """One patch per GP point (or per entry of ``indices``), in local coordinates.

    The local frame is (x - p_i) / radius. S always starts with p_i itself,
    so ``source.points[0]`` is the origin. T is empty when no observation
    point lies within ``radius``.
    """
    if not radius > 0:
        raise ValueError("non-positive radius")
    gp_pts = gp_registered.points
    normals = gp_registered.normals
    idx_all = np.arange(len(gp_pts)) if indices is None else np.asarray(indices, dtype=np.intp)
    centers = gp_pts[idx_all]
    s_lists = SpatialIndex(gp_pts).radius_search_many(centers, radius)
    if len(observation):
        t_lists = SpatialIndex(observation.points).radius_search_many(centers, radius)
    else:
        t_lists = [np.zeros(0, dtype=np.intp)] * len(idx_all)
    patches = []
    for i, c, s_idx, t_idx in zip(idx_all, centers, s_lists, t_lists):
        s_idx = np.concatenate([[i], s_idx[s_idx != i]]).astype(np.intp)
        s_idx = _fit_count(s_idx, cfg.source_count, (seed, int(i), 0))
        src = PointCloud((gp_pts[s_idx] - c) / radius, None if normals is None else normals[s_idx])
        if len(t_idx):
            t_idx = _fit_count(t_idx, cfg.template_count, (seed, int(i), 1), keep_first=False)
            tmpl = PointCloud((observation.points[t_idx] - c) / radius)
        else:
            tmpl = PointCloud(np.zeros((0, 3)))
        patches.append(Patch(c.copy(), src, tmpl, float(radius), int(i)))
    return patches


def patch_arrays(patches: list[Patch]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack patches into (P, N, 3) sources, (P, M, 3) templates and a has-template mask.

    Rows without a template are zero-filled in the template array.
    """
    if not patches:
        raise ValueError("no patches")
    n = len(patches[0].source)
    m = max((len(p.template) for p in patches), default=0)
    src = np.stack([p.source.points for p in patches])
    has = np.array([p.has_template for p in patches])
    tmpl = np.zeros((len(patches), m, 3))
    for k, p in enumerate(patches):
        if p.has_template:
            tmpl[k] = p.template.points
    assert src.shape[1] == n
    return src, tmpl, has


def complete_patches(params, cfg: NetworkConfig, patches: list[Patch], m_iters: int = 5,
                     threads: int = 1) -> np.ndarray:
    """Modeled sources (P, N, 3) in the local frame; empty-template patches pass through."""
    src, tmpl, has = patch_arrays(patches)
    out = src.copy()
    rows = np.nonzero(has)[0]
    if len(rows) == 0:
        return out
    chunks = [rows[lo:lo + CHUNK] for lo in range(0, len(rows), CHUNK)]

    def work(r):
        return iterative_complete_batch(params, cfg, src[r], tmpl[r], m_iters, chunk=CHUNK)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(work, chunks))
    else:
        results = [work(r) for r in chunks]
    for r, res in zip(chunks, results):
        out[r] = res
    return out


def commit_centers(gp_registered: PointCloud, patches: list[Patch], modeled: np.ndarray) -> np.ndarray:
    """Write back only each patch's centre point; every GP point is written once."""
    out = gp_registered.points.copy()
    for p, ms in zip(patches, modeled):
        out[p.index] = p.center + p.radius * ms[0]
    return out


def complete_shape(gp, observation: PointCloud, params, cfg: NetworkConfig, m_iters: int = 5,
                   radius: float | None = None, threads: int = 1, seed: int = 0) -> PointCloud:
    """Register the GP onto the observation, then re-position every GP point.

    Returns the modeled GP with the GP's point count and order. The registered
    (unmodeled) GP is kept in ``meta["registered"]``.
    """
    if len(observation) == 0:
        raise ValueError("empty observation")
    reg = register_gp(gp, observation)
    r = patch_radius(reg) if radius is None else radius
    patches = extract_patches(reg, observation, r, cfg, seed)
    modeled = complete_patches(params, cfg, patches, m_iters, threads)
    out = PointCloud(commit_centers(reg, patches, modeled))
    out.meta["registered"] = reg
    out.meta["radius"] = r
    return out


# ---------------------------------------------------------------------------
# synthetic observations


def _view_directions(n_views: int, rng: np.random.Generator) -> np.ndarray:
    """A randomly rotated, evenly spread set of unit view directions."""
    if n_views == 4:
        base = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64) / np.sqrt(3)
    else:
        base = fibonacci_sphere(n_views)
    rot = Rotation.random(random_state=rng).as_matrix()
    return base @ rot.T


def render_visible(shape: PointCloud, eye: np.ndarray, target: np.ndarray, image_size: int = 128,
                   splat: int = 3) -> np.ndarray:
    """Indices of the points that win at least one pixel of a splatted z-buffer.

    Pinhole camera at ``eye`` looking at ``target``. The pixel footprint is
    the larger of the one that fits the shape into the image and the typical
    point spacing, so splats close the gaps between neighbouring points.
    Winners lying well behind the nearest depth within a few pixels are
    treated as seen through a hole and dropped.
    """
    pts = shape.points
    fwd = target - eye
    dist = np.linalg.norm(fwd)
    fwd /= dist
    helper = np.array([0.0, 0.0, 1.0]) if abs(fwd[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, helper)
    right /= np.linalg.norm(right)
    up = np.cross(right, fwd)
    rel = pts - eye
    z = rel @ fwd
    x, y = rel @ right, rel @ up
    if np.any(z <= 0):
        raise ValueError("points behind the camera")
    half = image_size / 2.0
    bound = np.max(np.linalg.norm(pts - target, axis=1))
    f_fit = 0.95 * half * np.sqrt(max(dist * dist - bound * bound, 1e-12)) / max(bound, 1e-12)
    spacing = float(np.median(SpatialIndex(pts).knn(pts, 1, exclude_self=True)[1][:, 0]))
    f_density = dist / max(FOOTPRINT * spacing, 1e-12)
    f = min(f_fit, f_density)
    u = np.floor(f * x / z + half).astype(np.int64)
    v = np.floor(f * y / z + half).astype(np.int64)
    r = splat // 2
    offs = np.arange(-r, r + 1)
    du, dv = np.meshgrid(offs, offs, indexing="ij")
    pu = (u[:, None] + du.ravel()[None]).ravel()
    pv = (v[:, None] + dv.ravel()[None]).ravel()
    owner = np.repeat(np.arange(len(pts)), splat * splat)
    depth = np.repeat(z, splat * splat)
    inside = (pu >= 0) & (pu < image_size) & (pv >= 0) & (pv < image_size)
    pix = (pu * image_size + pv)[inside]
    owner, depth = owner[inside], depth[inside]
    order = np.lexsort((owner, depth, pix))
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix[order[1:]] != pix[order[:-1]]
    win_pix, win_owner, win_depth = pix[order[first]], owner[order[first]], depth[order[first]]
    # splats leave holes in sparse or irregular samplings; a winner far behind
    # the nearest depth in its window is a back surface seen through a hole
    zbuf = np.full(image_size * image_size, np.inf)
    zbuf[win_pix] = win_depth
    near = minimum_filter(zbuf.reshape(image_size, image_size), size=2 * HOLE_FILL + 1,
                          mode="constant", cval=np.inf).ravel()
    lateral = (HOLE_FILL + splat // 2) * win_depth / f
    tol = np.maximum(DEPTH_TOL * 2.0 * bound, DEPTH_SLOPE * lateral)
    return np.unique(win_owner[win_depth <= near[win_pix] + tol])


def make_partial_views(shape: PointCloud, n_views: int = 4, image_size: int = 128, seed: int = 0,
                       splat: int = 3) -> list[PointCloud]:
    """Single-viewpoint partial clouds from random viewpoints around the shape.

    Viewpoints lie on a sphere of radius twice the bounding diagonal. The
    z-buffer winners are returned as exact input points, so each view is a
    subset of the shape; ``meta["viewpoint"]`` records the camera position.
    """
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    if len(shape) < 10:
        raise ValueError("shape needs at least 10 points")
    rng = np.random.default_rng(seed)
    c = shape.centroid()
    d = 2.0 * shape.bounding_diagonal()
    views = []
    for direction in _view_directions(n_views, rng):
        eye = c + d * direction
        keep = render_visible(shape, eye, c, image_size, splat)
        view = shape.subset(keep).without_normals()
        view.meta["viewpoint"] = eye
        view.meta["indices"] = keep
        views.append(view)
    return views


def add_noise(shape: PointCloud, sigma: float, seed: int = 0) -> PointCloud:
    """I.i.d. Gaussian noise with standard deviation ``sigma`` per coordinate."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return shape
    rng = np.random.default_rng(seed)
    return PointCloud(shape.points + rng.normal(0.0, sigma, size=shape.points.shape))


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class DatasetConfig:
    n_views: int = 4
    image_size: int = 128
    noise_sigma: float = 0.01
    patches_per_view: int = 64
    radius_fraction: float = PATCH_RADIUS_FRACTION
    train_fraction: float = 0.75
    drop_rejected: bool = True


def split_shapes(n: int, seed: int, train_fraction: float = 0.75) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle, then the first round(train_fraction * n) go to training."""
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(train_fraction * n + 0.5))
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def observations_for(shape: PointCloud, cfg: DatasetConfig, seed: int) -> list[PointCloud]:
    """Noisy partial views of one shape (noise is added after rendering)."""
    views = make_partial_views(shape, cfg.n_views, cfg.image_size, seed)
    return [add_noise(v, cfg.noise_sigma, seed * 1000 + j) for j, v in enumerate(views)]


def training_patches(gp, shape: PointCloud, cfg: DatasetConfig, net_cfg: NetworkConfig, seed: int,
                     gfs_cfg: GfsConfig = GfsConfig()) -> list[tuple[Patch, PointCloud]]:
    """(patch, label) pairs from the noisy partial views of one training shape.

    Per view, ``patches_per_view`` patches are drawn (seeded) among GP points
    that see at least one observation point.
    """
    out = []
    for j, obs in enumerate(observations_for(shape, cfg, seed)):
        if len(obs) < 10:
            continue
        reg = register_gp(gp, obs)
        r = cfg.radius_fraction * reg.bounding_diagonal()
        cand = [p for p in extract_patches(reg, obs, r, net_cfg, seed) if p.has_template]
        rng = np.random.default_rng((seed, j, 7))
        pick = np.sort(rng.choice(len(cand), min(cfg.patches_per_view, len(cand)), replace=False))
        for k in pick:
            label = make_label(cand[k], gfs_cfg)
            if cfg.drop_rejected and label.meta.get("rejected"):
                continue
            out.append((cand[k], label))
    return out


def build_dataset(class_shapes: dict, gps: dict, out_dir, cfg: DatasetConfig = DatasetConfig(),
                  net_cfg: NetworkConfig = NetworkConfig(), seed: int = 0,
                  gfs_cfg: GfsConfig = GfsConfig()) -> DatasetManifest:
    """Write patch/label PLYs for training shapes and observation/ground-truth PLYs for test shapes.

    Training rows: (S, T, label) per patch. Test rows: (GP, observation,
    full shape) per view. Paths in the manifest are relative to ``out_dir``.
    """
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for cls in sorted(class_shapes):
        shapes = class_shapes[cls]
        if len(shapes) < 4:
            raise ValueError(f"class {cls} needs at least 4 shapes")
        gp: GenericPrimitive = gps[cls]
        gp_rel = f"{cls}_gp.ply"
        save_gp(gp, os.path.join(out_dir, gp_rel))
        train_idx, test_idx = split_shapes(len(shapes), seed, cfg.train_fraction)
        for si in train_idx:
            pairs = training_patches(gp, shapes[si], cfg, net_cfg, seed + 7919 * int(si), gfs_cfg)
            for k, (patch, label) in enumerate(pairs):
                sid = f"{cls}_{si:04d}_p{k:04d}"
                paths = [f"train/{sid}_{part}.ply" for part in ("s", "t", "l")]
                os.makedirs(os.path.join(out_dir, "train"), exist_ok=True)
                write_ply(patch.source, os.path.join(out_dir, paths[0]))
                write_ply(patch.template, os.path.join(out_dir, paths[1]))
                write_ply(label, os.path.join(out_dir, paths[2]))
                entries.append(ManifestEntry(sid, cls, paths[0], paths[1], paths[2], "train"))
        for si in test_idx:
            os.makedirs(os.path.join(out_dir, "test"), exist_ok=True)
            gt_rel = f"test/{cls}_{si:04d}_gt.ply"
            write_ply(shapes[si], os.path.join(out_dir, gt_rel))
            for j, obs in enumerate(observations_for(shapes[si], cfg, seed + 7919 * int(si))):
                sid = f"{cls}_{si:04d}_v{j}"
                obs_rel = f"test/{sid}_obs.ply"
                write_ply(obs, os.path.join(out_dir, obs_rel))
                entries.append(ManifestEntry(sid, cls, gp_rel, obs_rel, gt_rel, "test"))
    manifest = DatasetManifest(entries)
    save_manifest(manifest, os.path.join(out_dir, "manifest.tsv"))
    return manifest
