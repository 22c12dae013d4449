"""Completion metrics, the benchmark report and the layer/iteration sweep."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .cloud import PointCloud, SpatialIndex, estimate_normals
from .formats import DatasetManifest, read_ply, resolve
from .gfs import GfsConfig, gfs_deform
from .gp import load_gp, mls_smooth
from .net import (NetworkConfig, TrainConfig, _pts, chamfer, train)
from .pipeline import commit_centers, complete_patches, extract_patches, patch_radius
from .registration import register_gp

log = logging.getLogger(__name__)

METHODS = ("gfpnet", "gfs", "registration")


def fidelity(completed, ground_truth) -> float:
    """Mean distance from each completed point to its nearest ground-truth point."""
    c, g = _pts(completed), _pts(ground_truth)
    if len(c) == 0 or len(g) == 0:
        raise ValueError("empty cloud")
    return float(SpatialIndex(g).nearest_many(c)[1].mean())


def mmd(completed, library: list) -> float:
    """Chamfer distance to the closest shape of a reference library."""
    if not library:
        raise ValueError("empty library")
    return min(chamfer(completed, ref) for ref in library)


def consistency(completions: list) -> float:
    """Mean chamfer distance between consecutive completions."""
    if len(completions) < 2:
        raise ValueError("consistency needs at least 2 completions")
    return float(np.mean([chamfer(a, b) for a, b in zip(completions[:-1], completions[1:])]))


def gfs_baseline(registered: PointCloud, observation: PointCloud, radius: float,
                 cfg: GfsConfig = GfsConfig()) -> PointCloud:
    """The label generator applied to the whole registered GP (template cutoff = patch radius)."""
    src = registered if registered.has_normals else estimate_normals(registered)
    moved = gfs_deform(src, observation, cfg.steps, cfg.step_size, radius, cfg.blend, cfg.k)
    return mls_smooth(moved, cfg.mls_radius * radius, cfg.poly_order)


@dataclass
class SampleResult:
    sample_id: str
    class_label: str
    group: str
    cd: dict = field(default_factory=dict)        # method -> chamfer to ground truth
    fidelity: dict = field(default_factory=dict)
    mmd: dict = field(default_factory=dict)
    consistency: dict = field(default_factory=dict)


@dataclass
class BenchmarkReport:
    samples: list
    text: str

    def mean_cd(self, method: str = "gfpnet") -> float:
        return float(np.mean([s.cd[method] for s in self.samples]))

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.text)


def _fmt(v: float) -> str:
    return "nan" if not np.isfinite(v) else f"{v:.9g}"


def evaluate_samples(entries, base: str, params, cfg: NetworkConfig, m_iters: int = 5,
                     threads: int = 1, baselines: bool = True, seed: int = 0,
                     gfs_cfg: GfsConfig = GfsConfig()) -> list[SampleResult]:
    """Complete each test entry and score every method against its ground truth."""
    results, outputs, truths = [], [], {}
    gps = {}
    for e in entries:
        src_path = resolve(base, e.source_path)
        if src_path not in gps:
            gps[src_path] = load_gp(src_path)
        gp = gps[src_path]
        obs = read_ply(resolve(base, e.template_path))
        gt_path = resolve(base, e.label_path)
        if gt_path not in truths:
            truths[gt_path] = read_ply(gt_path).points
        gt = truths[gt_path]
        reg = register_gp(gp, obs)
        r = patch_radius(reg)
        patches = extract_patches(reg, obs, r, cfg, seed)
        modeled = complete_patches(params, cfg, patches, m_iters, threads)
        outs = {"gfpnet": commit_centers(reg, patches, modeled)}
        if baselines:
            outs["registration"] = reg.points
            outs["gfs"] = gfs_baseline(reg, obs, r, gfs_cfg).points
        res = SampleResult(e.sample_id, e.class_label, gt_path)
        for method, pts in outs.items():
            res.cd[method] = chamfer(pts, gt)
            res.fidelity[method] = fidelity(pts, gt)
        results.append(res)
        outputs.append(outs)
    library = [truths[k] for k in sorted(truths)]
    for res, outs in zip(results, outputs):
        for method, pts in outs.items():
            res.mmd[method] = mmd(pts, library)
    # consistency over the views of one instance, in manifest order
    groups: dict = {}
    for k, res in enumerate(results):
        groups.setdefault(res.group, []).append(k)
    for members in groups.values():
        for method in outputs[members[0]]:
            c = consistency([outputs[k][method] for k in members]) if len(members) > 1 else float("nan")
            for k in members:
                results[k].consistency[method] = c
    return results


def format_report(samples: list[SampleResult]) -> str:
    """Tab-separated rows for the completed shapes, then '#' summary lines per method and class."""
    lines = ["sample_id\tclass\tCD\tF\tMMD\tC"]
    for s in samples:
        lines.append("\t".join([s.sample_id, s.class_label, _fmt(s.cd["gfpnet"]), _fmt(s.fidelity["gfpnet"]),
                                _fmt(s.mmd["gfpnet"]), _fmt(s.consistency["gfpnet"])]))
    lines.append("# method\tclass\tCD\tF\tMMD\tC")
    classes = sorted({s.class_label for s in samples})
    for method in METHODS:
        if method not in samples[0].cd:
            continue
        for cls in classes + ["all"]:
            sel = [s for s in samples if cls == "all" or s.class_label == cls]
            vals = [np.mean([getattr(s, f)[method] for s in sel])
                    for f in ("cd", "fidelity", "mmd")]
            cons = [s.consistency[method] for s in sel if np.isfinite(s.consistency[method])]
            vals.append(float(np.mean(cons)) if cons else float("nan"))
            lines.append("# " + "\t".join([method, cls] + [_fmt(v) for v in vals]))
    return "\n".join(lines) + "\n"


def run_benchmark(manifest: DatasetManifest, base: str, params, cfg: NetworkConfig, m_iters: int = 5,
                  threads: int = 1, baselines: bool = True, seed: int = 0) -> BenchmarkReport:
    """Evaluate the test split; ``base`` is the directory manifest paths are relative to."""
    entries = manifest.split("test")
    if not entries:
        raise ValueError("test split is empty")
    samples = evaluate_samples(entries, base, params, cfg, m_iters, threads, baselines, seed)
    return BenchmarkReport(samples, format_report(samples))


def load_training_arrays(manifest: DatasetManifest, base: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack the train split's (S, T, label) PLYs into arrays."""
    rows = manifest.split("train")
    if not rows:
        raise ValueError("train split is empty")
    s = np.stack([read_ply(resolve(base, e.source_path)).points for e in rows])
    t = np.stack([read_ply(resolve(base, e.template_path)).points for e in rows])
    lab = np.stack([read_ply(resolve(base, e.label_path)).points for e in rows])
    return s, t, lab


def ablation_sweep(layer_configs: list, iteration_counts: list, manifest: DatasetManifest, base: str,
                   cfg: NetworkConfig = NetworkConfig(), hyper: TrainConfig = TrainConfig(),
                   threads: int = 1, trained: dict | None = None) -> tuple[np.ndarray, str]:
    """Mean CD grid: one row per encoder-width configuration, one column per iteration count.

    Each configuration is trained on the train split unless ``trained`` maps
    its width tuple to ready parameters.
    """
    if not layer_configs or not iteration_counts:
        raise ValueError("need at least one layer config and one iteration count")
    s, t, lab = load_training_arrays(manifest, base)
    grid = np.zeros((len(layer_configs), len(iteration_counts)))
    for i, widths in enumerate(layer_configs):
        widths = tuple(int(w) for w in widths)
        c = replace(cfg, iterative_encoder_widths=widths) if cfg.iterative else replace(cfg, encoder_widths=widths)
        params = (trained or {}).get(widths)
        if params is None:
            params = train(s, t, lab, c, hyper).params
        for j, m in enumerate(iteration_counts):
            res = evaluate_samples(manifest.split("test"), base, params, c, int(m), threads, baselines=False)
            grid[i, j] = np.mean([r.cd["gfpnet"] for r in res])
    lines = ["widths\t" + "\t".join(f"iters={m}" for m in iteration_counts)]
    for widths, row in zip(layer_configs, grid):
        lines.append(",".join(str(int(w)) for w in widths) + "\t" + "\t".join(_fmt(v) for v in row))
    return grid, "\n".join(lines) + "\n"
