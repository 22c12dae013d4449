"""Built-in checks behind ``gfpnet selftest``: indexed metrics vs brute force, and gradients."""

from __future__ import annotations

import numpy as np

from .gradcheck import gradient_check
from .metrics import fidelity
from .net import chamfer, laplacian_residual


def brute_chamfer(a: np.ndarray, b: np.ndarray) -> float:
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def brute_fidelity(a: np.ndarray, b: np.ndarray) -> float:
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return float(d.min(axis=1).mean())


def brute_laplacian(a: np.ndarray, k: int = 8) -> float:
    """Neighbours by full sort of all pairwise distances, ties to the lower index."""
    n = len(a)
    total = 0.0
    for i in range(n):
        d = np.sqrt(((a - a[i]) ** 2).sum(-1))
        d[i] = np.inf
        nbr = np.lexsort((np.arange(n), d))[:k]
        total += np.linalg.norm(a[i] - a[nbr].mean(axis=0))
    return total / n


def random_pair(rng: np.random.Generator, max_points: int = 500):
    na, nb = rng.integers(10, max_points + 1, size=2)
    return rng.normal(size=(na, 3)), rng.normal(size=(nb, 3)) + rng.normal(scale=0.5, size=3)


def oracle_suite(n_pairs: int = 50, seed: int = 0, tol: float = 1e-12) -> tuple[int, int, float]:
    """(passed, total, worst deviation) over chamfer, fidelity and laplacian_residual."""
    rng = np.random.default_rng(seed)
    passed, worst = 0, 0.0
    for _ in range(n_pairs):
        a, b = random_pair(rng)
        devs = [abs(chamfer(a, b) - brute_chamfer(a, b)),
                abs(fidelity(a, b) - brute_fidelity(a, b)),
                abs(laplacian_residual(a) - brute_laplacian(a))]
        worst = max(worst, *devs)
        passed += sum(d <= tol for d in devs)
    return passed, 3 * n_pairs, worst


def gradient_suite(seeds=range(5), tol: float = 1e-4) -> tuple[int, int, float]:
    worst, passed = 0.0, 0
    for s in seeds:
        r = gradient_check(s)
        worst = max(worst, r.max_rel_error)
        passed += r.max_rel_error < tol
    return passed, len(list(seeds)), worst


def run_all(echo=print) -> bool:
    ok = True
    for name, suite in (("oracle", oracle_suite), ("gradient", gradient_suite)):
        passed, total, worst = suite()
        echo(f"{name}: {passed}/{total} passed (worst deviation {worst:.3g})")
        ok &= passed == total
    return ok
