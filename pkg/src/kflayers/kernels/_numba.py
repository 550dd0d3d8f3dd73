"""numba-compiled diagonal Kalman filter kernels.

All per-step arrays are laid out ``(K, C)``: time major, with batch and latent
channels flattened into ``C``.  ``mask[t, c]`` is True on padding.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def kf_forward_sequential(a, b, q, u, w, r, mask, x0, p0, update):
    K, C = u.shape
    X = np.empty_like(u)
    P = np.empty_like(u)
    x = x0.copy()
    p = p0.copy()
    for t in range(K):
        for c in range(C):
            if not mask[t, c]:
                ac = a[c]
                pm = ac * ac * p[c] + q[t, c]
                xm = ac * x[c] + b[c] * u[t, c]
                if update:
                    s = pm + r[t, c]
                    k = pm / s
                    x[c] = xm + k * (w[t, c] - xm)
                    p[c] = pm * r[t, c] / s
                else:
                    x[c] = xm
                    p[c] = pm
            X[t, c] = x[c]
            P[t, c] = p[c]
    return X, P


@njit(cache=True)
def _mobius_pair(m11, m12, m21, m22, mask, j, i, C):
    # x[i] <- x[j] then x[i]; pass-through where x[i] is padding
    for c in range(C):
        if mask[i, c]:
            m11[i, c] = m11[j, c]
            m12[i, c] = m12[j, c]
            m21[i, c] = m21[j, c]
            m22[i, c] = m22[j, c]
        else:
            c11 = m11[i, c] * m11[j, c] + m12[i, c] * m21[j, c]
            c12 = m11[i, c] * m12[j, c] + m12[i, c] * m22[j, c]
            c21 = m21[i, c] * m11[j, c] + m22[i, c] * m21[j, c]
            c22 = m21[i, c] * m12[j, c] + m22[i, c] * m22[j, c]
            sc = max(max(abs(c11), abs(c12)), max(abs(c21), abs(c22)))
            if sc == 0:
                sc = 1.0
            m11[i, c] = c11 / sc
            m12[i, c] = c12 / sc
            m21[i, c] = c21 / sc
            m22[i, c] = c22 / sc
        mask[i, c] = mask[j, c]


@njit(cache=True)
def _affine_pair(al, be, mask, j, i, C):
    for c in range(C):
        if mask[i, c]:
            al[i, c] = al[j, c]
            be[i, c] = be[j, c]
        else:
            be[i, c] = al[i, c] * be[j, c] + be[i, c]
            al[i, c] = al[i, c] * al[j, c]
        mask[i, c] = mask[j, c]


@njit(cache=True)
def mobius_tree(m11, m12, m21, m22, mask):
    """In-place inclusive masked scan of 2x2 fractional-linear maps."""
    K, C = m11.shape
    s = 1
    while 2 * s <= K:
        for i in range(2 * s - 1, K, 2 * s):
            _mobius_pair(m11, m12, m21, m22, mask, i - s, i, C)
        s *= 2
    s //= 2
    while s >= 1:
        for i in range(3 * s - 1, K, 2 * s):
            _mobius_pair(m11, m12, m21, m22, mask, i - s, i, C)
        s //= 2


@njit(cache=True)
def affine_tree(al, be, mask):
    """In-place inclusive masked scan of scalar affine maps."""
    K, C = al.shape
    s = 1
    while 2 * s <= K:
        for i in range(2 * s - 1, K, 2 * s):
            _affine_pair(al, be, mask, i - s, i, C)
        s *= 2
    s //= 2
    while s >= 1:
        for i in range(3 * s - 1, K, 2 * s):
            _affine_pair(al, be, mask, i - s, i, C)
        s //= 2


@njit(cache=True)
def kf_forward_parallel(a, b, q, u, w, r, mask, x0, p0, update):
    K, C = u.shape
    one = u.dtype.type(1.0)
    m11 = np.empty_like(u)
    m12 = np.empty_like(u)
    m21 = np.empty_like(u)
    m22 = np.empty_like(u)
    for t in range(K):
        for c in range(C):
            a2 = a[c] * a[c]
            if mask[t, c]:
                m11[t, c] = one
                m12[t, c] = 0
                m21[t, c] = 0
                m22[t, c] = one
            elif update:
                rr = r[t, c]
                m11[t, c] = rr * a2
                m12[t, c] = rr * q[t, c]
                m21[t, c] = a2
                m22[t, c] = q[t, c] + rr
            else:
                m11[t, c] = a2
                m12[t, c] = q[t, c]
                m21[t, c] = 0
                m22[t, c] = one
    mk = mask.copy()
    mobius_tree(m11, m12, m21, m22, mk)
    P = np.empty_like(u)
    for t in range(K):
        for c in range(C):
            P[t, c] = (m11[t, c] * p0[c] + m12[t, c]) / (m21[t, c] * p0[c] + m22[t, c])

    al = np.empty_like(u)
    be = np.empty_like(u)
    for t in range(K):
        for c in range(C):
            if mask[t, c]:
                al[t, c] = one
                be[t, c] = 0
                continue
            pprev = P[t - 1, c] if t > 0 else p0[c]
            if update:
                pm = a[c] * a[c] * pprev + q[t, c]
                k = pm / (pm + r[t, c])
                al[t, c] = (one - k) * a[c]
                be[t, c] = (one - k) * b[c] * u[t, c] + k * w[t, c]
            else:
                al[t, c] = a[c]
                be[t, c] = b[c] * u[t, c]
    mk = mask.copy()
    affine_tree(al, be, mk)
    X = np.empty_like(u)
    for t in range(K):
        for c in range(C):
            X[t, c] = al[t, c] * x0[c] + be[t, c]
    return X, P


@njit(cache=True)
def kf_backward(a, b, q, u, w, r, mask, X, P, gX, gP, x0, p0, update):
    """Reverse-mode sweep over the sequential recurrence.

    Returns gradients for ``a, b, q, u, w, r``; the initial belief is a constant.
    """
    K, C = u.shape
    one = u.dtype.type(1.0)
    ga = np.zeros_like(a)
    gb = np.zeros_like(b)
    gq = np.zeros_like(u)
    gu = np.zeros_like(u)
    gw = np.zeros_like(u)
    gr = np.zeros_like(u)
    lx = np.zeros_like(x0)
    lp = np.zeros_like(p0)
    for t in range(K - 1, -1, -1):
        for c in range(C):
            lx[c] += gX[t, c]
            lp[c] += gP[t, c]
            if mask[t, c]:
                continue
            if t > 0:
                xprev = X[t - 1, c]
                pprev = P[t - 1, c]
            else:
                xprev = x0[c]
                pprev = p0[c]
            ac = a[c]
            pm = ac * ac * pprev + q[t, c]
            xm = ac * xprev + b[c] * u[t, c]
            if update:
                rr = r[t, c]
                s = pm + rr
                k = pm / s
                inv_s2 = one / (s * s)
                dk = lx[c] * (w[t, c] - xm)
                dpm = (dk * rr + lp[c] * rr * rr) * inv_s2
                gr[t, c] = (lp[c] * pm * pm - dk * pm) * inv_s2
                gw[t, c] = lx[c] * k
                dxm = lx[c] * (one - k)
            else:
                dpm = lp[c]
                dxm = lx[c]
            gu[t, c] = dxm * b[c]
            gb[c] += dxm * u[t, c]
            ga[c] += dxm * xprev + 2 * dpm * ac * pprev
            gq[t, c] = dpm
            lx[c] = dxm * ac
            lp[c] = dpm * ac * ac
    return ga, gb, gq, gu, gw, gr
