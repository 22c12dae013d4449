"""The sphere -> ellipsoid toy family used for training and benchmarking at desk scale."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .cloud import PointCloud
from .formats import DatasetManifest, ManifestEntry, save_manifest, write_ply
from .gfs import GfsConfig
from .gp import GenericPrimitive, GpConfig, build_gp, save_gp
from .net import NetworkConfig
from .pipeline import DatasetConfig, observations_for, training_patches
from .shapes import ellipsoid, sphere


@dataclass(frozen=True)
class ToyConfig:
    mean_axis: float = 0.5        # m
    axis_spread: float = 0.4      # each semi-axis is mean_axis * U(1 - spread, 1 + spread)
    shape_points: int = 4096
    gp_points: int = 2048
    n_train_shapes: int = 16
    n_test_shapes: int = 5
    n_patches: int = 1000


def toy_gp(seed: int = 0, cfg: ToyConfig = ToyConfig()) -> GenericPrimitive:
    """Sphere primitive averaged from three independently sampled spheres."""
    rng = np.random.default_rng((seed, 11))
    spheres = [sphere(cfg.shape_points, cfg.mean_axis, rng=rng) for _ in range(3)]
    return build_gp("ellipsoid", spheres, GpConfig(target_point_count=cfg.gp_points))


def toy_shapes(n: int, seed: int, cfg: ToyConfig = ToyConfig()) -> list[PointCloud]:
    """Randomly oriented and placed ellipsoids with densely sampled surfaces."""
    rng = np.random.default_rng((seed, 13))
    out = []
    for _ in range(n):
        axes = cfg.mean_axis * rng.uniform(1 - cfg.axis_spread, 1 + cfg.axis_spread, 3)
        rot = Rotation.random(random_state=rng).as_matrix()
        e = ellipsoid(axes, cfg.shape_points, rng=rng, rotation=rot)
        offset = rng.uniform(-0.2, 0.2, 3)
        out.append(PointCloud(e.points + offset, e.normals))
    return out


@dataclass
class ToyData:
    gp: GenericPrimitive
    sources: np.ndarray
    templates: np.ndarray
    labels: np.ndarray
    test_observations: list
    test_truths: list
    test_groups: list


def make_toy_data(seed: int = 0, cfg: ToyConfig = ToyConfig(), dcfg: DatasetConfig = DatasetConfig(),
                  net_cfg: NetworkConfig = NetworkConfig(), gfs_cfg: GfsConfig = GfsConfig()) -> ToyData:
    """Training patches with GFS labels plus held-out noisy single-view observations."""
    gp = toy_gp(seed, cfg)
    train = toy_shapes(cfg.n_train_shapes, seed, cfg)
    test = toy_shapes(cfg.n_test_shapes, seed + 1, cfg)
    pairs = []
    for k, shape in enumerate(train):
        pairs += training_patches(gp, shape, dcfg, net_cfg, seed * 1000 + k, gfs_cfg)
        if len(pairs) >= cfg.n_patches:
            break
    if len(pairs) < cfg.n_patches:
        raise RuntimeError(f"only {len(pairs)} training patches; raise n_train_shapes")
    pairs = pairs[:cfg.n_patches]
    src = np.stack([p.source.points for p, _ in pairs])
    tmpl = np.stack([p.template.points for p, _ in pairs])
    lab = np.stack([l.points for _, l in pairs])
    obs, truths, groups = [], [], []
    for k, shape in enumerate(test):
        for view in observations_for(shape, dcfg, seed * 1000 + 500 + k):
            obs.append(view)
            truths.append(shape)
            groups.append(k)
    return ToyData(gp, src, tmpl, lab, obs, truths, groups)


def write_toy_dataset(data: ToyData, out_dir) -> DatasetManifest:
    """Persist toy data in the manifest layout used by train / evaluate."""
    os.makedirs(os.path.join(out_dir, "train"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "test"), exist_ok=True)
    entries = []
    save_gp(data.gp, os.path.join(out_dir, "ellipsoid_gp.ply"))
    for k in range(len(data.sources)):
        sid = f"ellipsoid_p{k:05d}"
        paths = [f"train/{sid}_{part}.ply" for part in ("s", "t", "l")]
        for arr, p in zip((data.sources[k], data.templates[k], data.labels[k]), paths):
            write_ply(PointCloud(arr), os.path.join(out_dir, p))
        entries.append(ManifestEntry(sid, "ellipsoid", *paths, "train"))
    written = set()
    for k, (obs, gt, g) in enumerate(zip(data.test_observations, data.test_truths, data.test_groups)):
        gt_rel = f"test/ellipsoid_{g:04d}_gt.ply"
        if g not in written:
            write_ply(gt, os.path.join(out_dir, gt_rel))
            written.add(g)
        sid = f"ellipsoid_{g:04d}_v{k:03d}"
        obs_rel = f"test/{sid}_obs.ply"
        write_ply(obs, os.path.join(out_dir, obs_rel))
        entries.append(ManifestEntry(sid, "ellipsoid", "ellipsoid_gp.ply", obs_rel, gt_rel, "test"))
    m = DatasetManifest(entries)
    save_manifest(m, os.path.join(out_dir, "manifest.tsv"))
    return m
