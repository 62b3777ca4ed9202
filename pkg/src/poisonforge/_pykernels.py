"""Pure-Python/numpy versions of the compiled kernels in ``_ckernels.pyx``.

Signatures and in-place semantics match the compiled module exactly.  SGD
epochs loop over samples in Python; gradient and Hessian-vector kernels are
vectorized with ``np.add.at``.
"""
from __future__ import annotations

import math

import numpy as np


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _softplus_neg(x: float) -> float:
    if x >= 0:
        return math.log1p(math.exp(-x))
    return -x + math.log1p(math.exp(x))


def _vsigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _vsoftplus_neg(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, -x)


def bpr_sgd_epoch(P, Q, b, users, pos, neg, lr, reg):
    total = 0.0
    for u, i, j in zip(users.tolist(), pos.tolist(), neg.tolist()):
        pu, qi, qj = P[u].copy(), Q[i].copy(), Q[j].copy()
        x = b[i] - b[j] + float(np.dot(pu, qi - qj))
        total += _softplus_neg(x)
        g = _sigmoid(-x)
        b[i] += lr * (g - reg * b[i])
        b[j] += lr * (-g - reg * b[j])
        P[u] = pu + lr * (g * (qi - qj) - reg * pu)
        Q[i] = qi + lr * (g * pu - reg * qi)
        Q[j] = qj + lr * (-g * pu - reg * qj)
    return total


def fpmc_sgd_epoch(VUI, VIU, VIL, VLI, users, last, nxt, neg, lr, reg):
    total = 0.0
    for u, l, i, j in zip(users.tolist(), last.tolist(), nxt.tolist(), neg.tolist()):
        a, qi, qj = VUI[u].copy(), VIU[i].copy(), VIU[j].copy()
        x = float(np.dot(a, qi - qj))
        if l >= 0:
            ll, li, lj = VLI[l].copy(), VIL[i].copy(), VIL[j].copy()
            x += float(np.dot(ll, li - lj))
        total += _softplus_neg(x)
        g = _sigmoid(-x)
        VUI[u] = a + lr * (g * (qi - qj) - reg * a)
        VIU[i] = qi + lr * (g * a - reg * qi)
        VIU[j] = qj + lr * (-g * a - reg * qj)
        if l >= 0:
            VLI[l] = ll + lr * (g * (li - lj) - reg * ll)
            VIL[i] = li + lr * (g * ll - reg * li)
            VIL[j] = lj + lr * (-g * ll - reg * lj)
    return total


def bpr_loss_grad(P, Q, b, users, pos, neg, reg, gP, gQ, gb):
    pu, qi, qj = P[users], Q[pos], Q[neg]
    x = b[pos] - b[neg] + np.einsum("nk,nk->n", pu, qi - qj)
    sq = b[pos] ** 2 + b[neg] ** 2 + (pu**2).sum(1) + (qi**2).sum(1) + (qj**2).sum(1)
    g = -_vsigmoid(-x)
    np.add.at(gb, pos, g + reg * b[pos])
    np.add.at(gb, neg, -g + reg * b[neg])
    np.add.at(gP, users, g[:, None] * (qi - qj) + reg * pu)
    np.add.at(gQ, pos, g[:, None] * pu + reg * qi)
    np.add.at(gQ, neg, -g[:, None] * pu + reg * qj)
    return float((_vsoftplus_neg(x) + 0.5 * reg * sq).sum())


def fpmc_loss_grad(VUI, VIU, VIL, VLI, users, last, nxt, neg, reg, gUI, gIU, gIL, gLI):
    a, qi, qj = VUI[users], VIU[nxt], VIU[neg]
    x = np.einsum("nk,nk->n", a, qi - qj)
    sq = (a**2).sum(1) + (qi**2).sum(1) + (qj**2).sum(1)
    has = last >= 0
    lr_, li, lj = VLI[last[has]], VIL[nxt[has]], VIL[neg[has]]
    x[has] += np.einsum("nk,nk->n", lr_, li - lj)
    sq[has] += (lr_**2).sum(1) + (li**2).sum(1) + (lj**2).sum(1)
    g = -_vsigmoid(-x)
    np.add.at(gUI, users, g[:, None] * (qi - qj) + reg * a)
    np.add.at(gIU, nxt, g[:, None] * a + reg * qi)
    np.add.at(gIU, neg, -g[:, None] * a + reg * qj)
    gh = g[has][:, None]
    np.add.at(gLI, last[has], gh * (li - lj) + reg * lr_)
    np.add.at(gIL, nxt[has], gh * lr_ + reg * li)
    np.add.at(gIL, neg[has], -gh * lr_ + reg * lj)
    return float((_vsoftplus_neg(x) + 0.5 * reg * sq).sum())


def bpr_hvp(P, Q, b, users, pos, neg, reg, vP, vQ, vb, hP, hQ, hb):
    pu, dq = P[users], Q[pos] - Q[neg]
    x = b[pos] - b[neg] + np.einsum("nk,nk->n", pu, dq)
    wp, dv = vP[users], vQ[pos] - vQ[neg]
    a = vb[pos] - vb[neg] + np.einsum("nk,nk->n", dq, wp) + np.einsum("nk,nk->n", pu, dv)
    sp, sn = _vsigmoid(x), _vsigmoid(-x)
    c1 = (sp * sn * a)[:, None]
    c2 = -sn[:, None]
    np.add.at(hb, pos, c1[:, 0] + reg * vb[pos])
    np.add.at(hb, neg, -c1[:, 0] + reg * vb[neg])
    np.add.at(hP, users, c1 * dq + c2 * dv + reg * wp)
    np.add.at(hQ, pos, c1 * pu + c2 * wp + reg * vQ[pos])
    np.add.at(hQ, neg, -c1 * pu - c2 * wp + reg * vQ[neg])


def fpmc_hvp(VUI, VIU, VIL, VLI, users, last, nxt, neg, reg, vUI, vIU, vIL, vLI, hUI, hIU, hIL, hLI):
    a_u, dq = VUI[users], VIU[nxt] - VIU[neg]
    wu, dvq = vUI[users], vIU[nxt] - vIU[neg]
    x = np.einsum("nk,nk->n", a_u, dq)
    a = np.einsum("nk,nk->n", dq, wu) + np.einsum("nk,nk->n", a_u, dvq)
    has = last >= 0
    lh, nh, jh = last[has], nxt[has], neg[has]
    a_l, dl = VLI[lh], VIL[nh] - VIL[jh]
    wl, dvl = vLI[lh], vIL[nh] - vIL[jh]
    x[has] += np.einsum("nk,nk->n", a_l, dl)
    a[has] += np.einsum("nk,nk->n", dl, wl) + np.einsum("nk,nk->n", a_l, dvl)
    sp, sn = _vsigmoid(x), _vsigmoid(-x)
    c1 = (sp * sn * a)[:, None]
    c2 = -sn[:, None]
    np.add.at(hUI, users, c1 * dq + c2 * dvq + reg * wu)
    np.add.at(hIU, nxt, c1 * a_u + c2 * wu + reg * vIU[nxt])
    np.add.at(hIU, neg, -c1 * a_u - c2 * wu + reg * vIU[neg])
    c1h, c2h = c1[has], c2[has]
    np.add.at(hLI, lh, c1h * dl + c2h * dvl + reg * wl)
    np.add.at(hIL, nh, c1h * a_l + c2h * wl + reg * vIL[nh])
    np.add.at(hIL, jh, -c1h * a_l - c2h * wl + reg * vIL[jh])
