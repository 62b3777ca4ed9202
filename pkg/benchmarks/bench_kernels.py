"""Time the compiled kernels against the numpy fallback.

Usage::

    python3 benchmarks/bench_kernels.py [--users 1000] [--items 400] [--samples 20000] [--repeat 3]

Each kernel runs on identical inputs under both backends; the table reports
the best-of-``repeat`` wall time and the speedup, and checks that the two
backends agree.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from poisonforge.kernels import backend_module


def make_inputs(n_users: int, n_items: int, n_samples: int, dim: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    u = rng.integers(0, n_users, n_samples)
    pos = rng.integers(0, n_items, n_samples)
    neg = (pos + rng.integers(1, n_items, n_samples)) % n_items
    last = rng.integers(0, n_items, n_samples)

    def mat(rows):
        return rng.normal(0, 0.1, (rows, dim))

    return {"u": u, "pos": pos, "neg": neg, "last": last,
            "bpr": [mat(n_users), mat(n_items), rng.normal(0, 0.1, n_items)],
            "fpmc": [mat(n_users), mat(n_items), mat(n_items), mat(n_items)]}


def cases(x: dict, reg: float = 0.01, lr: float = 0.05) -> dict:
    """Kernel name -> callable(mod) returning the arrays whose values must agree."""
    u, p, n, last = x["u"], x["pos"], x["neg"], x["last"]

    def bpr_sgd(mod):
        P, Q, b = (a.copy() for a in x["bpr"])
        mod.bpr_sgd_epoch(P, Q, b, u, p, n, lr, reg)
        return [P, Q, b]

    def fpmc_sgd(mod):
        blocks = [a.copy() for a in x["fpmc"]]
        mod.fpmc_sgd_epoch(*blocks, u, last, p, n, lr, reg)
        return blocks

    def bpr_grad(mod):
        g = [np.zeros_like(a) for a in x["bpr"]]
        loss = mod.bpr_loss_grad(*x["bpr"], u, p, n, reg, *g)
        return [np.array([loss]), *g]

    def fpmc_grad(mod):
        g = [np.zeros_like(a) for a in x["fpmc"]]
        loss = mod.fpmc_loss_grad(*x["fpmc"], u, last, p, n, reg, *g)
        return [np.array([loss]), *g]

    def bpr_hvp(mod):
        h = [np.zeros_like(a) for a in x["bpr"]]
        mod.bpr_hvp(*x["bpr"], u, p, n, reg, *x["bpr"], *h)
        return h

    def fpmc_hvp(mod):
        h = [np.zeros_like(a) for a in x["fpmc"]]
        mod.fpmc_hvp(*x["fpmc"], u, last, p, n, reg, *x["fpmc"], *h)
        return h

    return {"bpr_sgd_epoch": bpr_sgd, "fpmc_sgd_epoch": fpmc_sgd, "bpr_loss_grad": bpr_grad,
            "fpmc_loss_grad": fpmc_grad, "bpr_hvp": bpr_hvp, "fpmc_hvp": fpmc_hvp}


def best_time(fn, mod, repeat: int) -> tuple[float, list]:
    best, out = np.inf, None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(mod)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--users", type=int, default=1000)
    ap.add_argument("--items", type=int, default=400)
    ap.add_argument("--samples", type=int, default=20000)
    ap.add_argument("--dim", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    try:
        fast = backend_module("cython")
    except ImportError:
        print("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
        return 1
    slow = backend_module("python")
    x = make_inputs(args.users, args.items, args.samples, args.dim, args.seed)
    print(f"{'kernel':<16s} {'python (s)':>11s} {'cython (s)':>11s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, fn in cases(x).items():
        t_py, out_py = best_time(fn, slow, args.repeat)
        t_c, out_c = best_time(fn, fast, args.repeat)
        diff = max(float(np.max(np.abs(a - b))) for a, b in zip(out_py, out_c))
        print(f"{name:<16s} {t_py:11.4f} {t_c:11.4f} {t_py / t_c:8.1f} {diff:11.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
