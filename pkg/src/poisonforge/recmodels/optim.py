"""Full-batch truncated-Newton refinement of a trained model on its canonical samples.

SGD stops near, not at, a stationary point of the fixed-sample objective.
Influence estimates assume a minimizer, so simulator members are polished
with a few Newton-CG steps before any inverse-Hessian work.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class PolishResult:
    iterations: int
    grad_norm: float  # max-abs gradient of the summed objective at exit
    loss: float
    converged: bool


def _cg(hvp, b: np.ndarray, tol: float, max_iter: int) -> np.ndarray:
    """Conjugate gradients for ``H x = b``, stopping early on non-positive curvature."""
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    stop = tol * np.sqrt(rr)
    for k in range(max_iter):
        Hp = hvp(p)
        curv = float(p @ Hp)
        if curv <= 0.0:
            return x if k else b
        alpha = rr / curv
        x += alpha * p
        r -= alpha * Hp
        rr_new = float(r @ r)
        if np.sqrt(rr_new) <= stop:
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


def polish(model, max_iter: int = 50, gtol: float = 1e-6, cg_iters: int = 100):
    """Minimize the summed per-sample loss over ``model.samples`` by Newton-CG with backtracking.

    Returns ``(polished model, PolishResult)``; the input model is not modified.
    """
    n = max(model.n_samples, 1)
    theta = model.params()
    cur = model
    loss, g = cur.sum_loss_grad(cur.samples)
    it = 0
    for it in range(1, max_iter + 1):
        gmax = float(np.abs(g).max()) if g.size else 0.0
        if gmax <= gtol:
            it -= 1
            break
        forcing = min(0.5, np.sqrt(np.linalg.norm(g)))
        d = _cg(lambda v: cur.hvp(v) * n, -g, forcing, cg_iters)
        slope = float(g @ d)
        if slope >= 0.0:
            d, slope = -g, -float(g @ g)
        step = 1.0
        while step > 1e-10:
            trial = model.with_params(theta + step * d)
            new_loss, new_g = trial.sum_loss_grad(trial.samples)
            if np.isfinite(new_loss) and new_loss <= loss + 1e-4 * step * slope:
                break
            step *= 0.5
        else:
            logger.debug("polish: line search failed at iteration %d", it)
            break
        theta = theta + step * d
        cur, loss, g = trial, new_loss, new_g
    gmax = float(np.abs(g).max()) if g.size else 0.0
    return cur, PolishResult(it, gmax, float(loss), gmax <= gtol)
