# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-sample kernels for the BPR and FPMC ranking losses.

Each function mirrors the one of the same name in ``_pykernels`` (same
algorithm, same in-place semantics) with the inner loops unrolled in C.
"""
from libc.math cimport exp, log1p
from libc.stdint cimport int64_t


cdef inline double _sigmoid(double x) nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef inline double _softplus_neg(double x) nogil:
    # log(1 + exp(-x))
    if x >= 0:
        return log1p(exp(-x))
    return -x + log1p(exp(x))


def bpr_sgd_epoch(double[:, ::1] P, double[:, ::1] Q, double[::1] b,
                  const int64_t[::1] users, const int64_t[::1] pos, const int64_t[::1] neg,
                  double lr, double reg):
    cdef Py_ssize_t n = users.shape[0], d = P.shape[1], s, k
    cdef int64_t u, i, j
    cdef double x, g, pu, qi, qj, total = 0.0
    with nogil:
        for s in range(n):
            u = users[s]; i = pos[s]; j = neg[s]
            x = b[i] - b[j]
            for k in range(d):
                x = x + P[u, k] * (Q[i, k] - Q[j, k])
            total = total + _softplus_neg(x)
            g = _sigmoid(-x)
            b[i] = b[i] + lr * (g - reg * b[i])
            b[j] = b[j] + lr * (-g - reg * b[j])
            for k in range(d):
                pu = P[u, k]; qi = Q[i, k]; qj = Q[j, k]
                P[u, k] = pu + lr * (g * (qi - qj) - reg * pu)
                Q[i, k] = qi + lr * (g * pu - reg * qi)
                Q[j, k] = qj + lr * (-g * pu - reg * qj)
    return total


def fpmc_sgd_epoch(double[:, ::1] VUI, double[:, ::1] VIU, double[:, ::1] VIL, double[:, ::1] VLI,
                   const int64_t[::1] users, const int64_t[::1] last, const int64_t[::1] nxt, const int64_t[::1] neg,
                   double lr, double reg):
    cdef Py_ssize_t n = users.shape[0], d = VUI.shape[1], s, k
    cdef int64_t u, l, i, j
    cdef double x, g, a, qi, qj, li, lj, ll, total = 0.0
    with nogil:
        for s in range(n):
            u = users[s]; l = last[s]; i = nxt[s]; j = neg[s]
            x = 0.0
            for k in range(d):
                x = x + VUI[u, k] * (VIU[i, k] - VIU[j, k])
            if l >= 0:
                for k in range(d):
                    x = x + VLI[l, k] * (VIL[i, k] - VIL[j, k])
            total = total + _softplus_neg(x)
            g = _sigmoid(-x)
            for k in range(d):
                a = VUI[u, k]; qi = VIU[i, k]; qj = VIU[j, k]
                VUI[u, k] = a + lr * (g * (qi - qj) - reg * a)
                VIU[i, k] = qi + lr * (g * a - reg * qi)
                VIU[j, k] = qj + lr * (-g * a - reg * qj)
            if l >= 0:
                for k in range(d):
                    ll = VLI[l, k]; li = VIL[i, k]; lj = VIL[j, k]
                    VLI[l, k] = ll + lr * (g * (li - lj) - reg * ll)
                    VIL[i, k] = li + lr * (g * ll - reg * li)
                    VIL[j, k] = lj + lr * (-g * ll - reg * lj)
    return total


def bpr_loss_grad(const double[:, ::1] P, const double[:, ::1] Q, const double[::1] b,
                  const int64_t[::1] users, const int64_t[::1] pos, const int64_t[::1] neg, double reg,
                  double[:, ::1] gP, double[:, ::1] gQ, double[::1] gb):
    """Accumulate the summed per-sample loss gradient into gP, gQ, gb; return the summed loss."""
    cdef Py_ssize_t n = users.shape[0], d = P.shape[1], s, k
    cdef int64_t u, i, j
    cdef double x, g, sq, total = 0.0
    with nogil:
        for s in range(n):
            u = users[s]; i = pos[s]; j = neg[s]
            x = b[i] - b[j]
            sq = b[i] * b[i] + b[j] * b[j]
            for k in range(d):
                x = x + P[u, k] * (Q[i, k] - Q[j, k])
                sq = sq + P[u, k] * P[u, k] + Q[i, k] * Q[i, k] + Q[j, k] * Q[j, k]
            total = total + _softplus_neg(x) + 0.5 * reg * sq
            g = -_sigmoid(-x)
            gb[i] = gb[i] + g + reg * b[i]
            gb[j] = gb[j] - g + reg * b[j]
            for k in range(d):
                gP[u, k] = gP[u, k] + g * (Q[i, k] - Q[j, k]) + reg * P[u, k]
                gQ[i, k] = gQ[i, k] + g * P[u, k] + reg * Q[i, k]
                gQ[j, k] = gQ[j, k] - g * P[u, k] + reg * Q[j, k]
    return total


def fpmc_loss_grad(const double[:, ::1] VUI, const double[:, ::1] VIU, const double[:, ::1] VIL,
                   const double[:, ::1] VLI,
                   const int64_t[::1] users, const int64_t[::1] last, const int64_t[::1] nxt, const int64_t[::1] neg,
                   double reg,
                   double[:, ::1] gUI, double[:, ::1] gIU, double[:, ::1] gIL, double[:, ::1] gLI):
    cdef Py_ssize_t n = users.shape[0], d = VUI.shape[1], s, k
    cdef int64_t u, l, i, j
    cdef double x, g, sq, total = 0.0
    with nogil:
        for s in range(n):
            u = users[s]; l = last[s]; i = nxt[s]; j = neg[s]
            x = 0.0
            sq = 0.0
            for k in range(d):
                x = x + VUI[u, k] * (VIU[i, k] - VIU[j, k])
                sq = sq + VUI[u, k] * VUI[u, k] + VIU[i, k] * VIU[i, k] + VIU[j, k] * VIU[j, k]
            if l >= 0:
                for k in range(d):
                    x = x + VLI[l, k] * (VIL[i, k] - VIL[j, k])
                    sq = sq + VLI[l, k] * VLI[l, k] + VIL[i, k] * VIL[i, k] + VIL[j, k] * VIL[j, k]
            total = total + _softplus_neg(x) + 0.5 * reg * sq
            g = -_sigmoid(-x)
            for k in range(d):
                gUI[u, k] = gUI[u, k] + g * (VIU[i, k] - VIU[j, k]) + reg * VUI[u, k]
                gIU[i, k] = gIU[i, k] + g * VUI[u, k] + reg * VIU[i, k]
                gIU[j, k] = gIU[j, k] - g * VUI[u, k] + reg * VIU[j, k]
            if l >= 0:
                for k in range(d):
                    gLI[l, k] = gLI[l, k] + g * (VIL[i, k] - VIL[j, k]) + reg * VLI[l, k]
                    gIL[i, k] = gIL[i, k] + g * VLI[l, k] + reg * VIL[i, k]
                    gIL[j, k] = gIL[j, k] - g * VLI[l, k] + reg * VIL[j, k]
    return total


def bpr_hvp(const double[:, ::1] P, const double[:, ::1] Q, const double[::1] b,
            const int64_t[::1] users, const int64_t[::1] pos, const int64_t[::1] neg, double reg,
            const double[:, ::1] vP, const double[:, ::1] vQ, const double[::1] vb,
            double[:, ::1] hP, double[:, ::1] hQ, double[::1] hb):
    """Accumulate the summed per-sample Hessian applied to (vP, vQ, vb)."""
    cdef Py_ssize_t n = users.shape[0], d = P.shape[1], s, k
    cdef int64_t u, i, j
    cdef double x, sp, sn, c1, c2, a
    with nogil:
        for s in range(n):
            u = users[s]; i = pos[s]; j = neg[s]
            x = b[i] - b[j]
            a = vb[i] - vb[j]
            for k in range(d):
                x = x + P[u, k] * (Q[i, k] - Q[j, k])
                a = a + (Q[i, k] - Q[j, k]) * vP[u, k] + P[u, k] * (vQ[i, k] - vQ[j, k])
            sp = _sigmoid(x)
            sn = _sigmoid(-x)
            c1 = sp * sn * a
            c2 = -sn
            hb[i] = hb[i] + c1 + reg * vb[i]
            hb[j] = hb[j] - c1 + reg * vb[j]
            for k in range(d):
                hP[u, k] = hP[u, k] + c1 * (Q[i, k] - Q[j, k]) + c2 * (vQ[i, k] - vQ[j, k]) + reg * vP[u, k]
                hQ[i, k] = hQ[i, k] + c1 * P[u, k] + c2 * vP[u, k] + reg * vQ[i, k]
                hQ[j, k] = hQ[j, k] - c1 * P[u, k] - c2 * vP[u, k] + reg * vQ[j, k]


def fpmc_hvp(const double[:, ::1] VUI, const double[:, ::1] VIU, const double[:, ::1] VIL,
             const double[:, ::1] VLI,
             const int64_t[::1] users, const int64_t[::1] last, const int64_t[::1] nxt, const int64_t[::1] neg,
             double reg,
             const double[:, ::1] vUI, const double[:, ::1] vIU, const double[:, ::1] vIL,
             const double[:, ::1] vLI,
             double[:, ::1] hUI, double[:, ::1] hIU, double[:, ::1] hIL, double[:, ::1] hLI):
    cdef Py_ssize_t n = users.shape[0], d = VUI.shape[1], s, k
    cdef int64_t u, l, i, j
    cdef double x, sp, sn, c1, c2, a
    with nogil:
        for s in range(n):
            u = users[s]; l = last[s]; i = nxt[s]; j = neg[s]
            x = 0.0
            a = 0.0
            for k in range(d):
                x = x + VUI[u, k] * (VIU[i, k] - VIU[j, k])
                a = a + (VIU[i, k] - VIU[j, k]) * vUI[u, k] + VUI[u, k] * (vIU[i, k] - vIU[j, k])
            if l >= 0:
                for k in range(d):
                    x = x + VLI[l, k] * (VIL[i, k] - VIL[j, k])
                    a = a + (VIL[i, k] - VIL[j, k]) * vLI[l, k] + VLI[l, k] * (vIL[i, k] - vIL[j, k])
            sp = _sigmoid(x)
            sn = _sigmoid(-x)
            c1 = sp * sn * a
            c2 = -sn
            for k in range(d):
                hUI[u, k] = hUI[u, k] + c1 * (VIU[i, k] - VIU[j, k]) + c2 * (vIU[i, k] - vIU[j, k]) + reg * vUI[u, k]
                hIU[i, k] = hIU[i, k] + c1 * VUI[u, k] + c2 * vUI[u, k] + reg * vIU[i, k]
                hIU[j, k] = hIU[j, k] - c1 * VUI[u, k] - c2 * vUI[u, k] + reg * vIU[j, k]
            if l >= 0:
                for k in range(d):
                    hLI[l, k] = hLI[l, k] + c1 * (VIL[i, k] - VIL[j, k]) + c2 * (vIL[i, k] - vIL[j, k]) + reg * vLI[l, k]
                    hIL[i, k] = hIL[i, k] + c1 * VLI[l, k] + c2 * vLI[l, k] + reg * vIL[i, k]
                    hIL[j, k] = hIL[j, k] - c1 * VLI[l, k] - c2 * vLI[l, k] + reg * vIL[j, k]
