"""Pure-numpy fallbacks for the kernels in ``_numba``.

Same signatures and ``(K, C)`` layout.  Loops run over time (or tree levels);
channels are vectorised.
"""
import numpy as np


def kf_forward_sequential(a, b, q, u, w, r, mask, x0, p0, update):
    K, _ = u.shape
    X = np.empty_like(u)
    P = np.empty_like(u)
    x = x0.copy()
    p = p0.copy()
    a2 = a * a
    for t in range(K):
        live = ~mask[t]
        pm = a2 * p + q[t]
        xm = a * x + b * u[t]
        if update:
            s = pm + r[t]
            k = pm / s
            xn = xm + k * (w[t] - xm)
            pn = pm * r[t] / s
        else:
            xn, pn = xm, pm
        x = np.where(live, xn, x)
        p = np.where(live, pn, p)
        X[t] = x
        P[t] = p
    return X, P


def _levels(K):
    s = 1
    while 2 * s <= K:
        yield slice(s - 1, None, 2 * s), slice(2 * s - 1, K, 2 * s), len(range(2 * s - 1, K, 2 * s))
        s *= 2
    s //= 2
    while s >= 1:
        n = len(range(3 * s - 1, K, 2 * s))
        if n:
            yield slice(2 * s - 1, None, 2 * s), slice(3 * s - 1, K, 2 * s), n
        s //= 2


def mobius_tree(m11, m12, m21, m22, mask):
    K = m11.shape[0]
    for src, tgt, n in _levels(K):
        j11, j12, j21, j22 = (m[src][:n] for m in (m11, m12, m21, m22))
        i11, i12, i21, i22 = m11[tgt], m12[tgt], m21[tgt], m22[tgt]
        c11 = i11 * j11 + i12 * j21
        c12 = i11 * j12 + i12 * j22
        c21 = i21 * j11 + i22 * j21
        c22 = i21 * j12 + i22 * j22
        sc = np.maximum(np.maximum(np.abs(c11), np.abs(c12)), np.maximum(np.abs(c21), np.abs(c22)))
        sc = np.where(sc == 0, 1, sc)
        pad = mask[tgt]
        m11[tgt] = np.where(pad, j11, c11 / sc)
        m12[tgt] = np.where(pad, j12, c12 / sc)
        m21[tgt] = np.where(pad, j21, c21 / sc)
        m22[tgt] = np.where(pad, j22, c22 / sc)
        mask[tgt] = mask[src][:n]


def affine_tree(al, be, mask):
    K = al.shape[0]
    for src, tgt, n in _levels(K):
        ja, jb = al[src][:n], be[src][:n]
        ia, ib = al[tgt], be[tgt]
        pad = mask[tgt]
        be[tgt] = np.where(pad, jb, ia * jb + ib)
        al[tgt] = np.where(pad, ja, ia * ja)
        mask[tgt] = mask[src][:n]


def kf_forward_parallel(a, b, q, u, w, r, mask, x0, p0, update):
    one = np.ones_like(u)
    zero = np.zeros_like(u)
    a2 = np.broadcast_to(a * a, u.shape)
    if update:
        m11, m12, m21, m22 = r * a2, r * q, a2 + zero, q + r
    else:
        m11, m12, m21, m22 = a2 + zero, q + zero, zero.copy(), one.copy()
    m11 = np.where(mask, one, m11)
    m12 = np.where(mask, zero, m12)
    m21 = np.where(mask, zero, m21)
    m22 = np.where(mask, one, m22)
    mobius_tree(m11, m12, m21, m22, mask.copy())
    P = (m11 * p0 + m12) / (m21 * p0 + m22)

    pprev = np.concatenate([p0[None], P[:-1]], axis=0)
    if update:
        pm = a * a * pprev + q
        k = pm / (pm + r)
        al = (1 - k) * a
        be = (1 - k) * b * u + k * w
    else:
        al = a + zero
        be = b * u
    al = np.where(mask, one, al)
    be = np.where(mask, zero, be)
    affine_tree(al, be, mask.copy())
    X = al * x0 + be
    return X, P


def kf_backward(a, b, q, u, w, r, mask, X, P, gX, gP, x0, p0, update):
    K, _ = u.shape
    ga = np.zeros_like(a)
    gb = np.zeros_like(b)
    gq = np.zeros_like(u)
    gu = np.zeros_like(u)
    gw = np.zeros_like(u)
    gr = np.zeros_like(u)
    lx = np.zeros_like(x0)
    lp = np.zeros_like(p0)
    for t in range(K - 1, -1, -1):
        lx = lx + gX[t]
        lp = lp + gP[t]
        live = ~mask[t]
        xprev = X[t - 1] if t > 0 else x0
        pprev = P[t - 1] if t > 0 else p0
        pm = a * a * pprev + q[t]
        xm = a * xprev + b * u[t]
        if update:
            s = pm + r[t]
            k = pm / s
            inv_s2 = 1 / (s * s)
            dk = lx * (w[t] - xm)
            dpm = (dk * r[t] + lp * r[t] * r[t]) * inv_s2
            gr[t] = np.where(live, (lp * pm * pm - dk * pm) * inv_s2, 0)
            gw[t] = np.where(live, lx * k, 0)
            dxm = lx * (1 - k)
        else:
            dpm = lp
            dxm = lx
        dxm = np.where(live, dxm, 0)
        dpm = np.where(live, dpm, 0)
        gu[t] = dxm * b
        gb += dxm * u[t]
        ga += dxm * xprev + 2 * dpm * a * pprev
        gq[t] = dpm
        lx = np.where(live, dxm * a, lx)
        lp = np.where(live, dpm * a * a, lp)
    return ga, gb, gq, gu, gw, gr
