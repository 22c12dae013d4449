"""Finite-difference check of the network's analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .net import LossWeights, NetworkConfig, forward_tensor, init_params, loss_tensor

TINY = NetworkConfig(iterative_encoder_widths=(8, 16, 32), decoder_widths=(32, 16, 8),
                     source_count=16, template_count=16, zero_init_head=False)


@dataclass
class GradCheckResult:
    seed: int
    max_rel_error: float
    n_params: int
    redraws: int


def _same(a: list, b: list) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def gradient_check(seed: int, cfg: NetworkConfig = TINY, h: float = 1e-4, batch: int = 2,
                   weights: LossWeights = LossWeights(), max_redraws: int = 50,
                   floor: float = 1e-8) -> GradCheckResult:
    """Max relative error between backprop and central differences over every parameter.

    The loss is piecewise smooth (ReLU, max pooling, nearest neighbours). A
    stencil point that lands on another piece makes the difference quotient
    meaningless, so the inputs are redrawn (deterministically) until no
    stencil point changes any discrete choice.
    """
    params = init_params(cfg, seed)
    rng = np.random.default_rng((seed, 101))

    def loss(s, t):
        return loss_tensor(forward_tensor(params, cfg, s, t), t, cfg, weights)

    for redraw in range(max_redraws + 1):
        s = rng.normal(scale=0.5, size=(batch, cfg.source_count, 3))
        t = rng.normal(scale=0.5, size=(batch, cfg.template_count, 3))
        ad.zero_grads(params)
        with ad.branch_trace() as base:
            out = loss(s, t)
        out.backward()
        worst, crossed = 0.0, False
        for name in sorted(params):
            p = params[name]
            flat = p.data.reshape(-1)
            grad = p.grad.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                with ad.branch_trace() as tp:
                    lp = float(loss(s, t).data)
                flat[i] = old - h
                with ad.branch_trace() as tm:
                    lm = float(loss(s, t).data)
                flat[i] = old
                if not (_same(tp, base) and _same(tm, base)):
                    crossed = True
                    break
                num = (lp - lm) / (2 * h)
                rel = abs(grad[i] - num) / max(abs(grad[i]), abs(num), floor)
                worst = max(worst, rel)
            if crossed:
                break
        if not crossed:
            n = sum(p.data.size for p in params.values())
            ad.zero_grads(params)
            return GradCheckResult(seed, worst, n, redraw)
    raise RuntimeError(f"every draw crossed a kink for seed {seed}")
