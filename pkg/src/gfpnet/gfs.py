"""Analytic normal-direction deformation, used to label training patches."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud, SpatialIndex
from .gp import mls_smooth
from .net import Patch, chamfer

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GfsConfig:
    steps: int = 2
    step_size: float = 0.5
    blend: float = 0.3
    k: int = 8
    mls_radius: float = 0.5  # patch-local units (patch radius = 1)
    poly_order: int = 2
    quality_gate: bool = True


def gfs_deform(source: PointCloud, template: PointCloud, steps: int = 2, step_size: float = 0.5,
               cutoff: float = np.inf, blend: float = 0.3, k: int = 8) -> PointCloud:
    """Pull ``source`` toward ``template`` along the source normals.

    Each step computes, for every source point, ``step_size`` times the
    normal component of the offset to its nearest template point (zero when
    that point is farther than ``cutoff``). The displacement field is then
    smoothed: each displacement moves ``blend`` of the way toward the mean
    displacement of the point's ``k`` nearest source neighbours. Smoothing the
    displacements rather than the positions keeps an undeformed surface fixed.
    """
    if source.normals is None:
        raise ValueError("normals required")
    if len(template) == 0:
        raise ValueError("empty template")
    if not 0 < step_size <= 1:
        raise ValueError("step_size must be in (0, 1]")
    pts = source.points.copy()
    nrm = source.normals
    n = len(pts)
    tindex = SpatialIndex(template.points)
    k_eff = min(k, n - 1)
    nbr = SpatialIndex(pts).knn(pts, k_eff, exclude_self=True)[0] if k_eff > 0 else None
    for _ in range(steps):
        idx, dist = tindex.nearest_many(pts)
        off = template.points[idx] - pts
        along = np.einsum("ij,ij->i", off, nrm)
        disp = (step_size * np.where(dist <= cutoff, along, 0.0))[:, None] * nrm
        if nbr is not None and blend > 0:
            disp = (1 - blend) * disp + blend * disp[nbr].mean(axis=1)
        pts = pts + disp
    return PointCloud(pts, nrm)


def make_label(patch: Patch, cfg: GfsConfig = GfsConfig()) -> PointCloud:
    """GFS label for one patch in its local frame; S itself when T is empty."""
    src = patch.source
    if not patch.has_template:
        return PointCloud(src.points)
    deformed = gfs_deform(src, patch.template, cfg.steps, cfg.step_size, 1.0, cfg.blend, cfg.k)
    label = mls_smooth(deformed, cfg.mls_radius, cfg.poly_order)
    if cfg.quality_gate and chamfer(label.points, patch.template.points) > chamfer(src.points, patch.template.points):
        label.meta["rejected"] = True
    return label


def make_labels(patches: list[Patch], cfg: GfsConfig = GfsConfig()) -> list[PointCloud]:
    """Labels index-corresponding to each patch source.

    A label that ends up farther from T than S was is flagged with
    ``meta["rejected"]`` so dataset builders can drop it.
    """
    labels = [make_label(p, cfg) for p in patches]
    bad = sum(1 for l in labels if l.meta.get("rejected"))
    if bad:
        log.info("%d of %d labels failed the quality gate", bad, len(labels))
    return labels
