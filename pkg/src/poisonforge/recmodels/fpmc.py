"""Factorized personalized Markov chain over single-item transitions."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .. import kernels
from .base import Hyper, RankingModel, Samples, _sigmoid, fit_sgd, init_uniform


class FPMC(RankingModel):
    """``score(u, hist, i) = VUI[u] . VIU[i] + VIL[i] . VLI[l]`` with ``l`` the last item of ``hist``.

    An empty history drops the transition term.  Flat layout: ``VUI``
    (users x d), then ``VIU``, ``VIL``, ``VLI`` (items x d each).
    """

    KIND = "fpmc"
    BLOCKS = ("VUI", "VIU", "VIL", "VLI")
    SAMPLE_KIND = "seq"

    def _loss_grad_kernel(self, s, out):
        return kernels.fpmc_loss_grad(self.VUI, self.VIU, self.VIL, self.VLI,
                                      s.users, s.last, s.pos, s.neg, self.hyper.l2_reg, *out)

    def _hvp_kernel(self, s, v, out):
        kernels.fpmc_hvp(self.VUI, self.VIU, self.VIL, self.VLI,
                         s.users, s.last, s.pos, s.neg, self.hyper.l2_reg, *v, *out)

    def _sgd_epoch(self, s: Samples, lr: float, reg: float) -> float:
        return kernels.fpmc_sgd_epoch(self.VUI, self.VIU, self.VIL, self.VLI,
                                      s.users, s.last, s.pos, s.neg, lr, reg)

    def scores(self, u: int, history: Sequence[int] = (), user_vec: np.ndarray | None = None) -> np.ndarray:
        p = self.VUI[u] if user_vec is None else user_vec
        out = self.VIU @ p
        if len(history):
            out = out + self.VIL @ self.VLI[int(history[-1])]
        return out

    def score_grad(self, u: int, history: Sequence[int], i: int) -> np.ndarray:
        gUI, gIU, gIL, gLI = self._zeros()
        gUI[u] = self.VIU[i]
        gIU[i] = self.VUI[u]
        if len(history):
            last = int(history[-1])
            gIL[i] += self.VLI[last]
            gLI[last] += self.VIL[i]
        return np.concatenate([gUI.ravel(), gIU.ravel(), gIL.ravel(), gLI.ravel()])

    def _controlled_terms(self, s):
        A = self.VIU[s.pos] - self.VIU[s.neg]
        c = np.zeros(len(s))
        has = s.last >= 0
        c[has] = np.einsum("nk,nk->n", self.VLI[s.last[has]], self.VIL[s.pos[has]] - self.VIL[s.neg[has]])
        return A, c

    def _controlled_grad_blocks(self, p, s, out):
        _, gIU, gIL, gLI = out
        reg = self.hyper.l2_reg
        A, c = self._controlled_terms(s)
        g = -_sigmoid(-(A @ p + c))
        np.add.at(gIU, s.pos, g[:, None] * p + reg * self.VIU[s.pos])
        np.add.at(gIU, s.neg, -g[:, None] * p + reg * self.VIU[s.neg])
        has = s.last >= 0
        gh = g[has][:, None]
        l, i, j = s.last[has], s.pos[has], s.neg[has]
        np.add.at(gIL, i, gh * self.VLI[l] + reg * self.VIL[i])
        np.add.at(gIL, j, -gh * self.VLI[l] + reg * self.VIL[j])
        np.add.at(gLI, l, gh * (self.VIL[i] - self.VIL[j]) + reg * self.VLI[l])

    @staticmethod
    def decompose(seq: Sequence[int], user: int) -> Samples:
        """Prefix samples ``([x1..x_{t-1}], x_t)`` for ``t >= 2``; only the last prefix item is stored."""
        seq = np.asarray(seq, dtype=np.int64)
        n = max(len(seq) - 1, 0)
        return Samples(np.full(n, user), seq[1:], np.full(n, -1), seq[:-1][:n])


def train_fpmc(ds, hyper: Hyper | None = None, seed: int = 0) -> FPMC:
    """Fit FPMC by seeded SGD over prefix samples with uniform negatives."""
    hyper = hyper or Hyper()
    if hyper.dim < 1:
        raise ValueError("dim must be >= 1")
    rng = np.random.default_rng(seed)
    d = hyper.dim
    model = FPMC(
        ds.n_users,
        ds.n_items,
        hyper,
        seed,
        {
            "VUI": init_uniform(rng, (ds.n_users, d)),
            "VIU": init_uniform(rng, (ds.n_items, d)),
            "VIL": init_uniform(rng, (ds.n_items, d)),
            "VLI": init_uniform(rng, (ds.n_items, d)),
        },
    )
    positives = Samples.concat([FPMC.decompose(seq, u) for u, seq in enumerate(ds.train)])
    return fit_sgd(model, ds, positives, rng)
