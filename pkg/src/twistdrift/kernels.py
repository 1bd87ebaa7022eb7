"""Compiled kernels for the kick-twist map family.

A map is kick (area-preserving, split into generating-function substeps) followed by a
twist theta' = theta + w(r').  Parameters are packed in a float64 vector:

    [k, lo, hi, beta, twist_kind, twist_coef, omega0, nsub, nharm, (amp, freq, phase)*]

The kick has amplitude k/(2 pi) * b(r) * g(theta) with b a smooth bump supported on
[lo, hi] and equal to 1 on [lo + beta, hi - beta]; g is a sum of sine harmonics.
"""
import numpy as np
from numba import njit

TWO_PI = 2.0 * np.pi
HEAD = 9


@njit(cache=True)
def smooth_step(x):
    # exp(-1/x) underflows below 1e-3, which also avoids inf * 0 in the derivatives
    if x <= 1e-3:
        return 0.0, 0.0, 0.0
    if x >= 1.0 - 1e-3:
        return 1.0, 0.0, 0.0
    p = np.exp(-1.0 / x)
    q = np.exp(-1.0 / (1.0 - x))
    s = p / (p + q)
    a = 1.0 / (x * x) + 1.0 / ((1.0 - x) * (1.0 - x))
    da = -2.0 / (x * x * x) + 2.0 / ((1.0 - x) ** 3)
    s1 = s * (1.0 - s) * a
    s2 = s1 * (1.0 - 2.0 * s) * a + s * (1.0 - s) * da
    return s, s1, s2


@njit(cache=True)
def bump(r, lo, hi, beta):
    if beta <= 0.0:
        return 1.0, 0.0, 0.0
    if r <= lo or r >= hi:
        return 0.0, 0.0, 0.0
    su, su1, su2 = smooth_step((r - lo) / beta)
    sv, sv1, sv2 = smooth_step((hi - r) / beta)
    b = su * sv
    b1 = (su1 * sv - su * sv1) / beta
    b2 = (su2 * sv - 2.0 * su1 * sv1 + su * sv2) / (beta * beta)
    return b, b1, b2


@njit(cache=True)
def profile(theta, p):
    """Kick profile g, its derivative, and its zero-mean primitive."""
    nh = int(p[8])
    g = 0.0
    dg = 0.0
    prim = 0.0
    for j in range(nh):
        amp = p[HEAD + 3 * j]
        fr = p[HEAD + 3 * j + 1]
        ph = p[HEAD + 3 * j + 2]
        arg = TWO_PI * fr * theta + ph
        s = np.sin(arg)
        c = np.cos(arg)
        g += amp * s
        dg += amp * TWO_PI * fr * c
        prim -= amp * c / (TWO_PI * fr)
    return g, dg, prim


@njit(cache=True)
def twist_shift(r, p):
    kind = int(p[4])
    if kind == 0:
        return p[5] * r + p[6], p[5]
    e2 = 2.0 * p[5]
    d = e2 - r * r
    sq = np.sqrt(d)
    return r / sq + p[6], e2 / (d * sq)


@njit(cache=True)
def _flat(r, p):
    beta = p[3]
    if beta <= 0.0:
        return True
    return p[1] + beta <= r <= p[2] - beta


@njit(cache=True)
def _outside(r, p):
    return p[3] > 0.0 and (r <= p[1] or r >= p[2])


@njit(cache=True)
def kick(theta, r, p):
    k = p[0]
    if k == 0.0 or _outside(r, p):
        return theta, r
    K = k / TWO_PI
    g, dg, prim = profile(theta, p)
    r_full = r - K * g
    if _flat(r, p) and _flat(r_full, p):
        return theta, r_full
    lo, hi, beta = p[1], p[2], p[3]
    n = int(p[7])
    eps = K / n
    for _ in range(n):
        g, dg, prim = profile(theta, p)
        b, b1, b2 = bump(r, lo, hi, beta)
        r1 = r - eps * b * g
        for _it in range(50):
            b, b1, b2 = bump(r1, lo, hi, beta)
            f = r1 + eps * b * g - r
            step = f / (1.0 + eps * b1 * g)
            r1 -= step
            if abs(step) < 1e-16:
                break
        b, b1, b2 = bump(r1, lo, hi, beta)
        theta = theta + eps * b1 * prim
        r = r1
    return theta, r


@njit(cache=True)
def kick_inverse(theta1, r1, p):
    k = p[0]
    if k == 0.0 or _outside(r1, p):
        return theta1, r1
    K = k / TWO_PI
    g, dg, prim = profile(theta1, p)
    r_full = r1 + K * g
    if _flat(r1, p) and _flat(r_full, p):
        return theta1, r_full
    lo, hi, beta = p[1], p[2], p[3]
    n = int(p[7])
    eps = K / n
    for _ in range(n):
        b, b1, b2 = bump(r1, lo, hi, beta)
        th = theta1
        for _it in range(50):
            g, dg, prim = profile(th, p)
            f = th + eps * b1 * prim - theta1
            step = f / (1.0 + eps * b1 * g)
            th -= step
            if abs(step) < 1e-16:
                break
        g, dg, prim = profile(th, p)
        r1 = r1 + eps * b * g
        theta1 = th
    return theta1, r1


@njit(cache=True)
def kick_jac(theta, r, p):
    """Returns the image and the Jacobian entries (a, b, c, d) of the kick."""
    k = p[0]
    if k == 0.0 or _outside(r, p):
        return theta, r, 1.0, 0.0, 0.0, 1.0
    K = k / TWO_PI
    g, dg, prim = profile(theta, p)
    r_full = r - K * g
    if _flat(r, p) and _flat(r_full, p):
        return theta, r_full, 1.0, 0.0, -K * dg, 1.0
    lo, hi, beta = p[1], p[2], p[3]
    n = int(p[7])
    eps = K / n
    ja, jb, jc, jd = 1.0, 0.0, 0.0, 1.0
    for _ in range(n):
        g, dg, prim = profile(theta, p)
        b, b1, b2 = bump(r, lo, hi, beta)
        r1 = r - eps * b * g
        for _it in range(50):
            b, b1, b2 = bump(r1, lo, hi, beta)
            f = r1 + eps * b * g - r
            step = f / (1.0 + eps * b1 * g)
            r1 -= step
            if abs(step) < 1e-16:
                break
        b, b1, b2 = bump(r1, lo, hi, beta)
        D = 1.0 + eps * b1 * g
        sa = D - eps * eps * b2 * prim * b * dg / D
        sb = eps * b2 * prim / D
        sc = -eps * b * dg / D
        sd = 1.0 / D
        na = sa * ja + sb * jc
        nb = sa * jb + sb * jd
        nc = sc * ja + sd * jc
        nd = sc * jb + sd * jd
        ja, jb, jc, jd = na, nb, nc, nd
        theta = theta + eps * b1 * prim
        r = r1
    return theta, r, ja, jb, jc, jd


@njit(cache=True)
def step(theta, r, p):
    theta, r = kick(theta, r, p)
    w, _ = twist_shift(r, p)
    return theta + w, r


@njit(cache=True)
def step_inverse(theta, r, p):
    w, _ = twist_shift(r, p)
    return kick_inverse(theta - w, r, p)


@njit(cache=True)
def step_power(theta, r, n, p):
    if n >= 0:
        for _ in range(n):
            theta, r = step(theta, r, p)
    else:
        for _ in range(-n):
            theta, r = step_inverse(theta, r, p)
    return theta, r


@njit(cache=True)
def apply_many(theta, r, n, p):
    """Apply the n-th power (negative for inverse) to arrays of points."""
    m = theta.shape[0]
    out_t = np.empty(m)
    out_r = np.empty(m)
    for i in range(m):
        out_t[i], out_r[i] = step_power(theta[i], r[i], n, p)
    return out_t, out_r


@njit(cache=True)
def jac_many(theta, r, p):
    m = theta.shape[0]
    out = np.empty((m, 2, 2))
    for i in range(m):
        t1, r1, a, b, c, d = kick_jac(theta[i], r[i], p)
        _, wp = twist_shift(r1, p)
        # twist matrix [[1, wp], [0, 1]] times kick Jacobian
        out[i, 0, 0] = a + wp * c
        out[i, 0, 1] = b + wp * d
        out[i, 1, 0] = c
        out[i, 1, 1] = d
    return out


@njit(cache=True)
def orbit(theta, r, n, p):
    th = np.empty(n + 1)
    rr = np.empty(n + 1)
    th[0] = theta
    rr[0] = r
    for i in range(n):
        theta, r = step(theta, r, p)
        th[i + 1] = theta
        rr[i + 1] = r
    return th, rr


@njit(cache=True)
def first_hits(theta, r, nmax, nmin, p, box, r_lo, r_hi):
    """First n in [nmin, nmax] with the orbit inside box = (theta_c, theta_hw, r_lo, r_hi).

    Orbits leaving [r_lo, r_hi] are abandoned.  Returns -1 where no hit occurs.
    """
    m = theta.shape[0]
    hit = np.full(m, -1, dtype=np.int64)
    tc, thw, blo, bhi = box[0], box[1], box[2], box[3]
    for i in range(m):
        t = theta[i]
        x = r[i]
        for n in range(nmax + 1):
            if n >= nmin and blo < x < bhi:
                d = (t - tc + 0.5) % 1.0 - 0.5
                if abs(d) < thw:
                    hit[i] = n
                    break
            if n == nmax:
                break
            t, x = step(t, x, p)
            t = wrap1(t)
            if x < r_lo or x > r_hi:
                break
    return hit


@njit(cache=True)
def earliest_hits(theta, r, nmax, nmin, p, box, r_lo, r_hi):
    """Like first_hits, but all orbits advance in lockstep and stop at the first n with any hit."""
    m = theta.shape[0]
    t = theta.copy()
    x = r.copy()
    alive = np.ones(m, dtype=np.bool_)
    hit = np.full(m, -1, dtype=np.int64)
    tc, thw, blo, bhi = box[0], box[1], box[2], box[3]
    for n in range(nmax + 1):
        found = False
        if n >= nmin:
            for i in range(m):
                if alive[i] and blo < x[i] < bhi:
                    d = (t[i] - tc + 0.5) % 1.0 - 0.5
                    if abs(d) < thw:
                        hit[i] = n
                        found = True
        if found or n == nmax:
            break
        for i in range(m):
            if alive[i]:
                t[i], x[i] = step(t[i], x[i], p)
                t[i] = wrap1(t[i])
                if x[i] < r_lo or x[i] > r_hi:
                    alive[i] = False
    return hit


@njit(cache=True)
def wrap1(t):
    t = t % 1.0
    if t >= 1.0:
        t = 0.0
    return t


@njit(cache=True)
def iterate_many(theta, r, n, p):
    """Canonical per-step wrapped iteration; pseudo-orbit replay uses exactly this arithmetic."""
    m = theta.shape[0]
    out_t = np.empty(m)
    out_r = np.empty(m)
    for i in range(m):
        t = theta[i]
        x = r[i]
        for _ in range(n):
            t, x = step(t, x, p)
            t = wrap1(t)
        out_t[i] = t
        out_r[i] = x
    return out_t, out_r


@njit(cache=True)
def orbit_wrapped(theta, r, n, p):
    th = np.empty(n + 1)
    rr = np.empty(n + 1)
    th[0] = theta
    rr[0] = r
    for i in range(n):
        theta, r = step(theta, r, p)
        theta = wrap1(theta)
        th[i + 1] = theta
        rr[i + 1] = r
    return th, rr


@njit(cache=True)
def orbits_wrapped(theta, r, n, p):
    """(n+1, m) per-step wrapped orbits of m points (canonical arithmetic)."""
    m = theta.shape[0]
    th = np.empty((n + 1, m))
    rr = np.empty((n + 1, m))
    th[0] = theta
    rr[0] = r
    for k in range(n):
        for i in range(m):
            t, x = step(th[k, i], rr[k, i], p)
            th[k + 1, i] = wrap1(t)
            rr[k + 1, i] = x
    return th, rr
