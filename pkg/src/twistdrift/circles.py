"""Certified essential invariant circles, their order, Sup, and Birkhoff zones."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import cho_factor, cho_solve
from scipy.linalg import lstsq as qr_lstsq
from scipy.spatial import cKDTree

from .annulus import Point, rotation_number, weighted_rotation
from .errors import EmptyFamily, RecertificationFailed

N_GRID = 2048
GAP_MIN = 1e-4
GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(eq=False)
class CertifiedCircle:
    samples: np.ndarray
    nu: float
    residual: float
    rotation: float
    rotation_error: float
    tol: float
    label: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def n_grid(self):
        return len(self.samples)

    @property
    def theta(self):
        return np.arange(self.n_grid) / self.n_grid

    @cached_property
    def _spline(self):
        th = np.append(self.theta, 1.0)
        return CubicSpline(th, np.append(self.samples, self.samples[0]), bc_type="periodic")

    def ell(self, theta):
        return self._spline(np.mod(theta, 1.0))

    def dell(self, theta):
        return self._spline(np.mod(theta, 1.0), 1)

    def above(self, theta, r, tol=0.0):
        """Strictly above the graph (the region Gamma+)."""
        return np.asarray(r) > self.ell(theta) + tol

    def below(self, theta, r, tol=0.0):
        return np.asarray(r) < self.ell(theta) - tol

    def vertical_distance(self, theta, r):
        return np.abs(np.asarray(r) - self.ell(theta))

    @cached_property
    def _tree(self):
        th = self.theta
        pts = np.concatenate([np.column_stack([th - 1, self.samples]), np.column_stack([th, self.samples]),
                              np.column_stack([th + 1, self.samples])])
        return cKDTree(pts), pts

    def distance(self, theta, r):
        """Euclidean distance to the sampled polyline graph."""
        theta = np.mod(np.atleast_1d(np.asarray(theta, float)), 1.0)
        r = np.atleast_1d(np.asarray(r, float))
        tree, pts = self._tree
        _, idx = tree.query(np.column_stack([theta, r]))
        q = np.column_stack([theta, r])
        best = np.hypot(*(q - pts[idx]).T)
        for nb in (idx - 1, idx + 1):
            nb = np.clip(nb, 0, len(pts) - 1)
            a = pts[idx]
            d = pts[nb] - a
            t = np.clip(np.einsum("ij,ij->i", q - a, d) / np.einsum("ij,ij->i", d, d), 0.0, 1.0)
            proj = a + t[:, None] * d
            best = np.minimum(best, np.hypot(*(q - proj).T))
        return best

    def sup_distance(self, other: "CertifiedCircle"):
        """Hausdorff distance proxy: sup over the grid of |l1 - l2|."""
        if other.n_grid == self.n_grid:
            return float(np.max(np.abs(self.samples - other.samples)))
        return float(np.max(np.abs(self.samples - other.ell(self.theta))))

    def point_at(self, theta) -> Point:
        return Point(theta, float(self.ell(theta)))

    def mean_height(self):
        return float(np.mean(self.samples))

    def __le__(self, other):
        return bool(np.all(self.samples <= other.ell(self.theta) + 1e-12))

    def __lt__(self, other):
        d = other.ell(self.theta) - self.samples
        return bool(np.all(d >= -1e-12) and np.any(d > 1e-12))

    def to_record(self, samples_ref=None):
        return {"rotation_number": self.rotation, "rotation_error": self.rotation_error,
                "residual": self.residual, "nu": self.nu, "tol": self.tol, "label": self.label,
                "samples_ref": samples_ref}


@dataclass(frozen=True)
class CertificationFailure:
    seed_rotation: float
    best_residual: float
    reason: str

    def __bool__(self):
        return False


def graph_residual(fmap, samples):
    """Max vertical distance of the image of the sampled graph to the graph itself."""
    n = len(samples)
    th = np.arange(n) / n
    spline = CubicSpline(np.append(th, 1.0), np.append(samples, samples[0]), bc_type="periodic")
    T, R = fmap(th, samples)
    return float(np.max(np.abs(R - spline(np.mod(T, 1.0)))))


def lipschitz(samples):
    n = len(samples)
    d = np.abs(np.diff(np.append(samples, samples[0])))
    return float(np.max(d) * n)


def make_circle(fmap, samples, tol, rotation=None, label="", iterates=20_000, meta=None):
    samples = np.asarray(samples, float)
    res = graph_residual(fmap, samples)
    if rotation is None or iterates:
        est = rotation_number(fmap, Point(0.0, samples[0]), max(iterates, 1000), tol=np.inf)
        rot_err = est.error
        if rotation is None:
            rotation = est.value
        else:
            rot_err = max(rot_err, abs(est.value - rotation))
    else:
        rot_err = 0.0
    return CertifiedCircle(samples, lipschitz(samples), res, float(rotation), float(rot_err), tol, label,
                           meta or {})


def horizontal_circle(fmap, r, label="", tol=1e-12):
    """Constant graph r, e.g. a boundary circle; the residual is measured, not assumed."""
    return make_circle(fmap, np.full(N_GRID, float(r)), tol, label=label)


def boundary_circles(fmap):
    a, b = fmap.annulus.a, fmap.annulus.b
    return horizontal_circle(fmap, a, "lower"), horizontal_circle(fmap, b, "upper")


def _short_rotation(fmap, theta0, r, n):
    th, rr = fmap.orbit_lift(theta0, r, n)
    if not np.all(np.isfinite(rr)):
        return np.nan
    return weighted_rotation(np.diff(th))[0]


def seed_height(fmap, omega, theta0=0.0, n=3000, r_range=None, iters=48):
    """Bisection on the vertical theta0 for an orbit with rotation number omega."""
    lo, hi = r_range or (fmap.annulus.a, fmap.annulus.b)
    sign = -1.0 if fmap.twist == "left" else 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        rho = _short_rotation(fmap, theta0, mid, n)
        if sign * (rho - omega) < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-14:
            break
    return 0.5 * (lo + hi)


def _fourier_fit(phi, values, n):
    """Least-squares real trig fit of degree < n/2, evaluated on the n-point grid."""
    m = np.arange(-(n // 2) + 1, n // 2)
    A = np.exp(2j * np.pi * np.outer(phi, m))
    coef, *_ = np.linalg.lstsq(A, values.astype(complex), rcond=None)
    grid = np.arange(n) / n
    return np.real(np.exp(2j * np.pi * np.outer(grid, m)) @ coef)


def shift_matrix(n, omega):
    """Matrix of the trig-interpolation shift x(phi) -> x(phi + omega) on the n-grid."""
    m = np.fft.fftfreq(n, 1.0 / n)
    mult = np.exp(2j * np.pi * m * omega)
    if n % 2 == 0:
        # Nyquist mode: keep the real part of the multiplier so the shift is real
        mult[n // 2] = np.cos(np.pi * n * omega)
    F = np.fft.fft(np.eye(n), axis=0)
    return np.real(np.fft.ifft(mult[:, None] * F, axis=0))


def _prolong(x, n):
    """Trig interpolation of a periodic sample onto a finer n-grid."""
    c = np.fft.rfft(x)
    m = len(x)
    if m % 2 == 0:
        c[-1] *= 0.5
    out = np.zeros(n // 2 + 1, complex)
    out[:len(c)] = c
    return np.fft.irfft(out, n) * (n / m)


def _tail(x):
    c = np.abs(np.fft.rfft(x)) / len(x)
    k = len(c)
    return float(np.max(c[3 * k // 4:])) if k > 4 else 0.0


def _invariance_error(fmap, phi, u, v, omega, S):
    T, R = fmap.lift(phi + u, v)
    return np.concatenate([T - phi - omega - S @ u, R - S @ v])


def _lstsq(A, rhs):
    # normal equations are several times faster; QR when the Gram matrix is not positive definite
    try:
        return cho_solve(cho_factor(A.T @ A, check_finite=False), A.T @ rhs, check_finite=False)
    except np.linalg.LinAlgError:
        return qr_lstsq(A, rhs, lapack_driver="gelsy", check_finite=False)[0]


def _newton(fmap, phi, u, v, omega, S, max_iter=30, tol=1e-13):
    n = len(phi)
    best = (np.inf, u, v)
    history = []
    for _ in range(max_iter):
        E = _invariance_error(fmap, phi, u, v, omega, S)
        if not np.all(np.isfinite(E)):
            break
        err = float(np.max(np.abs(E)))
        if err < best[0]:
            best = (err, u, v)
        if err < tol:
            break
        history.append(err)
        # stagnation: three steps without halving the error
        if len(history) > 3 and history[-1] > 0.5 * history[-4]:
            break
        J = fmap.jac(phi + u, v)
        A = np.zeros((2 * n + 1, 2 * n))
        A[:n, :n] = np.diag(J[:, 0, 0]) - S
        A[:n, n:] = np.diag(J[:, 0, 1])
        A[n:2 * n, :n] = np.diag(J[:, 1, 0])
        A[n:2 * n, n:] = np.diag(J[:, 1, 1]) - S
        A[2 * n, :n] = 1.0 / np.sqrt(n)
        rhs = -np.concatenate([E, [np.mean(u) * np.sqrt(n)]])
        dx = _lstsq(A, rhs)
        step = 1.0
        for _ls in range(12):
            un, vn = u + step * dx[:n], v + step * dx[n:]
            En = _invariance_error(fmap, phi, un, vn, omega, S)
            if np.all(np.isfinite(En)) and np.max(np.abs(En)) < err * (1 - 1e-4 * step) + 1e-15:
                break
            step *= 0.5
        else:
            break
        u, v = un, vn
        if np.max(np.abs(dx)) * step > 0.5:
            break
    return best


def _to_graph(u, v, n_grid):
    """Resample the parameterization phi -> (phi + u, v) as a graph over the theta grid."""
    n = len(u)
    cu = np.fft.fft(u) / n
    cv = np.fft.fft(v) / n
    m = np.fft.fftfreq(n, 1.0 / n)

    def ev(c, x, deriv=False):
        e = np.exp(2j * np.pi * np.outer(x, m))
        if deriv:
            return np.real(e @ (2j * np.pi * m * c))
        return np.real(e @ c)

    theta = np.arange(n_grid) / n_grid
    # spline inverse of phi -> phi + u(phi) on a prolonged grid, then exact Newton corrections
    nf = 8 * max(n_grid, n)
    pf = np.arange(nf) / nf
    tf = pf + _prolong(u, nf)
    tf = np.concatenate([tf - 1.0, tf, tf + 1.0])
    pf = np.concatenate([pf - 1.0, pf, pf + 1.0])
    if np.all(np.diff(tf) > 0):
        phi = CubicSpline(tf, pf)(theta)
    else:
        phi = theta - ev(cu, theta)
    for _ in range(30):
        f = phi + ev(cu, phi) - theta
        phi = phi - f / (1.0 + ev(cu, phi, True))
        if np.max(np.abs(f)) < 1e-15:
            break
    return ev(cv, phi)


def certify_circle(fmap, seed_rotation, tol=1e-8, n_modes=128, n_grid=N_GRID, theta0=0.0, r_range=None,
                   max_modes=512, initial=None):
    """Parameterization-method certification of an invariant graph with the given rotation number.

    Returns a CertifiedCircle or a CertificationFailure carrying the best graph residual.
    """
    omega = float(seed_rotation)
    if initial is None:
        r0 = seed_height(fmap, omega, theta0, r_range=r_range)
    best_res = np.inf
    n = n_modes
    u = v = None
    while n <= max_modes:
        phi = np.arange(n) / n
        if u is None:
            if initial is not None:
                u = np.zeros(n)
                v = np.asarray(initial.ell(phi), float)
            else:
                th, rr = fmap.orbit_lift(theta0, r0, 4 * n)
                ph = theta0 + omega * np.arange(4 * n + 1)
                u = _fourier_fit(np.mod(ph, 1.0), th - ph, n)
                v = _fourier_fit(np.mod(ph, 1.0), rr, n)
                # a flat guess wins when the orbit is periodic and the fit is underdetermined
                S0 = shift_matrix(n, omega)
                flat = (np.zeros(n), np.full(n, r0))
                e_fit = np.max(np.abs(_invariance_error(fmap, phi, u, v, omega, S0)))
                e_flat = np.max(np.abs(_invariance_error(fmap, phi, *flat, omega, S0)))
                if not e_fit <= e_flat:
                    u, v = flat
        else:
            # spectral prolongation of the previous solution
            u, v = _prolong(u, n), _prolong(v, n)
        S = shift_matrix(n, omega)
        err, u, v = _newton(fmap, phi, u, v, omega, S)
        du = np.real(np.fft.ifft(2j * np.pi * np.fft.fftfreq(n, 1.0 / n) * np.fft.fft(u)))
        if np.isfinite(err) and np.min(1 + du) > 0:
            graph = _to_graph(u, v, n_grid)
            if np.all(np.isfinite(graph)):
                res = graph_residual(fmap, graph)
                best_res = min(best_res, res)
                inside = np.all((graph >= fmap.annulus.a - 1e-12) & (graph <= fmap.annulus.b + 1e-12))
                if res < tol and inside and _tail(u) < 1e3 * tol + 1e-12:
                    graph = np.clip(graph, fmap.annulus.a, fmap.annulus.b)
                    return make_circle(fmap, graph, tol, rotation=omega, label=f"rho={omega:.10g}",
                                       meta={"modes": n})
        elif not np.isfinite(err):
            break
        if np.isfinite(err) and err > 1e-3:
            break
        n *= 2
    if not np.isfinite(best_res):
        # no admissible graph: fall back to the residual of the orbit's own graph
        th, rr = fmap.orbit_lift(theta0, r0 if initial is None else float(initial.samples[0]), 4096)
        order = np.argsort(np.mod(th, 1.0))
        t = np.mod(th, 1.0)[order]
        r = rr[order]
        grid = np.arange(n_grid) / n_grid
        best_res = graph_residual(fmap, np.interp(grid, t, r, period=1.0))
    return CertificationFailure(omega, float(best_res), "no invariant graph at this tolerance")


def order_key(c: CertifiedCircle):
    return (c.mean_height(), c.rotation)


def crossing(c1: CertifiedCircle, c2: CertifiedCircle, tol):
    d = c2.samples - c1.ell(c2.theta) if c1.n_grid != c2.n_grid else c2.samples - c1.samples
    return bool(np.any(d > tol) and np.any(d < -tol))


def sweep_catalog(fmap, rotation_grid, tol=1e-8, workers=1, **kw):
    rotation_grid = list(rotation_grid)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(lambda w: certify_circle(fmap, w, tol, **kw), rotation_grid))
    else:
        results = [certify_circle(fmap, w, tol, **kw) for w in rotation_grid]
    cat = sorted((c for c in results if c), key=order_key)
    # drop crossing pairs: retry tighter, keep the smaller residual
    changed = True
    while changed:
        changed = False
        for i in range(len(cat) - 1):
            c1, c2 = cat[i], cat[i + 1]
            if crossing(c1, c2, 10 * max(c1.tol, c2.tol)) or abs(c1.rotation - c2.rotation) < 1e-14:
                r1 = certify_circle(fmap, c1.rotation, tol / 100, **kw)
                r2 = certify_circle(fmap, c2.rotation, tol / 100, **kw)
                keep = [c for c in (r1, r2) if c]
                if not keep:
                    keep = [min((c1, c2), key=lambda c: c.residual)]
                else:
                    keep = [min(keep, key=lambda c: c.residual)]
                cat = cat[:i] + keep + cat[i + 2:]
                changed = True
                break
    return cat


def is_ordered(catalog, tol=1e-10):
    return all(catalog[i].samples.max() <= catalog[i + 1].samples.max() + tol and
               not crossing(catalog[i], catalog[i + 1], tol) for i in range(len(catalog) - 1))


def sup_circles(family, fmap, tol=None):
    family = list(family)
    if not family:
        raise EmptyFamily("sup of an empty family")
    if len(family) == 1:
        return family[0]
    n = max(c.n_grid for c in family)
    th = np.arange(n) / n
    stack = np.array([c.ell(th) if c.n_grid != n else c.samples for c in family])
    samples = stack.max(axis=0)
    top = family[int(np.argmax(stack.mean(axis=1)))]
    if np.array_equal(samples, stack[int(np.argmax(stack.mean(axis=1)))]):
        return top
    tol = tol or max(c.tol for c in family)
    res = graph_residual(fmap, samples)
    if res >= tol:
        raise RecertificationFailed(res)
    return CertifiedCircle(samples, lipschitz(samples), res, top.rotation, top.rotation_error, tol, "sup")


def inf_circles(family, fmap, tol=None):
    family = list(family)
    if not family:
        raise EmptyFamily("inf of an empty family")
    if len(family) == 1:
        return family[0]
    n = max(c.n_grid for c in family)
    th = np.arange(n) / n
    stack = np.array([c.ell(th) for c in family])
    samples = stack.min(axis=0)
    low = family[int(np.argmin(stack.mean(axis=1)))]
    tol = tol or max(c.tol for c in family)
    res = graph_residual(fmap, samples)
    if res >= tol:
        raise RecertificationFailed(res)
    return CertifiedCircle(samples, lipschitz(samples), res, low.rotation, low.rotation_error, tol, "inf")


@dataclass(eq=False)
class BirkhoffZone:
    lower: CertifiedCircle
    upper: CertifiedCircle
    evidence: list
    heuristic: bool = True

    @property
    def gap(self):
        return float(np.max(self.upper.ell(self.lower.theta) - self.lower.samples))

    def contains(self, theta, r):
        return self.lower.above(theta, r) & self.upper.below(theta, r)

    def to_record(self):
        return {"lower_rotation": self.lower.rotation, "upper_rotation": self.upper.rotation,
                "gap": self.gap, "failed_attempts": len(self.evidence), "heuristic": self.heuristic}


def _interior_rotations(r1, r2, count):
    # golden-jittered offsets keep the attempts away from low-order rationals
    j = (np.arange(count) + 0.5 + 0.3 * (np.mod(np.arange(1, count + 1) * GOLDEN, 1.0) - 0.5)) / count
    return r1 + (r2 - r1) * j


def detect_zones(catalog, fmap, refinement=20, gap_min=GAP_MIN, tol=1e-8, max_depth=6, **kw):
    """Refine every gap wider than gap_min; gaps where every attempt fails become zones."""
    cat = sorted(catalog, key=order_key)
    zones = []

    def gap(c1, c2):
        return float(np.max(c2.ell(c1.theta) - c1.samples))

    def refine(c1, c2, depth):
        if gap(c1, c2) <= gap_min:
            return [], []
        rots = _interior_rotations(c1.rotation, c2.rotation, refinement)
        found, record = [], []
        for w in rots:
            res = certify_circle(fmap, w, tol, **kw)
            if res and c1 < res and res < c2:
                found.append(res)
            else:
                record.append({"rotation": float(w),
                               "best_residual": float(res.residual if res else res.best_residual)})
        if not found:
            return [], [BirkhoffZone(c1, c2, record)]
        found = sorted(found, key=order_key)
        chain = [c1] + found + [c2]
        new, zs = list(found), []
        if depth >= max_depth:
            return new, zs
        failed = np.array([r["rotation"] for r in record])
        for a, b in zip(chain[:-1], chain[1:]):
            if failed.size and np.any((failed > a.rotation) & (failed < b.rotation)):
                n2, z2 = refine(a, b, depth + 1)
                new += n2
                zs += z2
        return new, zs

    for c1, c2 in zip(cat[:-1], cat[1:]):
        _, zs = refine(c1, c2, 0)
        zones += zs
    return zones


def export_catalog(catalog, records_path, samples_path):
    """Line-delimited records plus a columnar (index, theta, r) samples file."""
    with open(records_path, "w") as fh:
        for i, c in enumerate(catalog):
            fh.write(json.dumps(c.to_record(samples_ref=i)) + "\n")
    with open(samples_path, "w") as fh:
        fh.write("circle,theta,r\n")
        for i, c in enumerate(catalog):
            for t, r in zip(c.theta, c.samples):
                fh.write(f"{i},{t:.17g},{r:.17g}\n")
