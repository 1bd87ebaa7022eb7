"""Area-preserving twist maps of the annulus and the model zoo."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import kernels
from .annulus import Annulus, Point, angle_diff, wrap
from .errors import InvalidParameter

MODELS = ("rigid", "integrable", "bump_standard", "engineered_zone", "shear_pendulum_section")


class AnnulusMap:
    """Base class: subclasses provide vectorized lift / inverse_lift / jac."""

    twist: str | None = "right"

    def __init__(self, annulus: Annulus, continuation: Annulus | None = None, twist="right", name="map"):
        self.annulus = annulus
        self.continuation = continuation or annulus
        self.twist = twist
        self.name = name
        self.twist_band = (annulus.a, annulus.b)

    def lift(self, theta, r):
        raise NotImplementedError

    def inverse_lift(self, theta, r):
        raise NotImplementedError

    def jac(self, theta, r):
        raise NotImplementedError

    def __call__(self, theta, r):
        t, x = self.lift(theta, r)
        return wrap(t), x

    def inverse(self, theta, r):
        t, x = self.inverse_lift(theta, r)
        return wrap(t), x

    def power_lift(self, theta, r, n):
        theta = np.asarray(theta, float)
        r = np.asarray(r, float)
        step = self.lift if n >= 0 else self.inverse_lift
        for _ in range(abs(n)):
            theta, r = step(theta, r)
        return theta, r

    def power(self, theta, r, n):
        t, x = self.power_lift(theta, r, n)
        return wrap(t), x

    def orbit_lift(self, theta, r, n):
        th = np.empty(n + 1)
        rr = np.empty(n + 1)
        th[0], rr[0] = theta, r
        t, x = np.array([theta], float), np.array([r], float)
        for i in range(n):
            t, x = self.lift(t, x)
            th[i + 1], rr[i + 1] = t[0], x[0]
        return th, rr

    def iterate(self, theta, r, n):
        """n forward steps, wrapping theta after each one (the canonical replay arithmetic)."""
        theta = np.asarray(theta, float)
        r = np.asarray(r, float)
        for _ in range(n):
            theta, r = self(theta, r)
        return theta, r

    def orbit(self, theta, r, n):
        """Per-step wrapped orbit of one point, matching `iterate`."""
        th = np.empty(n + 1)
        rr = np.empty(n + 1)
        th[0], rr[0] = theta, r
        t, x = np.array([theta], float), np.array([r], float)
        for i in range(n):
            t, x = self(t, x)
            th[i + 1], rr[i + 1] = t[0], x[0]
        return th, rr

    def orbits(self, theta, r, n):
        """(n+1, m) per-step wrapped orbits of m points."""
        t = np.atleast_1d(np.asarray(theta, float))
        x = np.atleast_1d(np.asarray(r, float))
        th = np.empty((n + 1, t.size))
        rr = np.empty((n + 1, t.size))
        th[0], rr[0] = t, x
        for i in range(n):
            t, x = self(t, x)
            th[i + 1], rr[i + 1] = t, x
        return th, rr

    def apply(self, p: Point, n=1) -> Point:
        t, x = self.power_lift(np.array([p.theta]), np.array([p.r]), n)
        return Point(t[0], x[0])

    def first_hits(self, theta, r, nmax, nmin, box, r_lo, r_hi, earliest=False):
        """Generic version of the compiled first-hit search; `earliest` stops at the first n with any hit."""
        theta = np.array(theta, float)
        r = np.array(r, float)
        hit = np.full(theta.shape, -1, dtype=np.int64)
        alive = np.ones(theta.shape, bool)
        tc, thw, blo, bhi = box
        for n in range(nmax + 1):
            if n >= nmin:
                inside = alive & (hit < 0) & (r > blo) & (r < bhi) & (np.abs(angle_diff(theta, tc)) < thw)
                hit[inside] = n
                if earliest and inside.any():
                    break
            alive &= hit < 0
            if n == nmax or not alive.any():
                break
            theta, r = self(theta, r)
            alive &= (r >= r_lo) & (r <= r_hi)
        return hit


class FunctionMap(AnnulusMap):
    """Map given by vectorized Python callables (used for custom models)."""

    def __init__(self, forward, inverse, jacobian, annulus, continuation=None, twist="right", name="custom"):
        super().__init__(annulus, continuation, twist, name)
        self._f = forward
        self._g = inverse
        self._j = jacobian

    def lift(self, theta, r):
        return self._f(np.asarray(theta, float), np.asarray(r, float))

    def inverse_lift(self, theta, r):
        return self._g(np.asarray(theta, float), np.asarray(r, float))

    def jac(self, theta, r):
        return self._j(np.asarray(theta, float), np.asarray(r, float))


class KickTwistMap(AnnulusMap):
    """Kick-twist family evaluated by compiled kernels (see kernels.py)."""

    def __init__(self, params, annulus, continuation=None, twist="right", name="kick_twist",
                 flat_band=None):
        super().__init__(annulus, continuation, twist, name)
        self.params = np.ascontiguousarray(params, dtype=float)
        if flat_band is not None:
            self.twist_band = flat_band

    @staticmethod
    def pack(k=0.0, lo=0.0, hi=1.0, beta=0.0, twist_kind=0, twist_coef=1.0, omega0=0.0,
             harmonics=((1.0, 1, 0.0),), nsub=None):
        harmonics = [tuple(map(float, h)) for h in harmonics]
        if nsub is None:
            gmax = sum(abs(a) for a, _, _ in harmonics)
            # max |b'| of the smooth-step bump is 2 / beta
            bmax = 2.0 / beta if beta > 0 else 0.0
            nsub = max(1, int(np.ceil(k * bmax * gmax / np.pi)))
        p = [k, lo, hi, beta, twist_kind, twist_coef, omega0, nsub, len(harmonics)]
        for h in harmonics:
            p.extend(h)
        return np.array(p, float)

    @staticmethod
    def _vec(theta, r):
        t = np.ascontiguousarray(np.atleast_1d(np.asarray(theta, float)))
        x = np.ascontiguousarray(np.atleast_1d(np.asarray(r, float)))
        t, x = np.broadcast_arrays(t, x)
        return np.ascontiguousarray(t).ravel(), np.ascontiguousarray(x).ravel(), np.shape(t)

    def power_lift(self, theta, r, n):
        scalar = np.ndim(theta) == 0 and np.ndim(r) == 0
        t, x, shape = self._vec(theta, r)
        ot, orr = kernels.apply_many(t, x, int(n), self.params)
        if scalar:
            return float(ot[0]), float(orr[0])
        return ot.reshape(shape), orr.reshape(shape)

    def lift(self, theta, r):
        return self.power_lift(theta, r, 1)

    def inverse_lift(self, theta, r):
        return self.power_lift(theta, r, -1)

    def jac(self, theta, r):
        t, x, shape = self._vec(theta, r)
        return kernels.jac_many(t, x, self.params).reshape(shape + (2, 2))

    def orbit_lift(self, theta, r, n):
        return kernels.orbit(float(theta), float(r), int(n), self.params)

    def iterate(self, theta, r, n):
        scalar = np.ndim(theta) == 0 and np.ndim(r) == 0
        t, x, shape = self._vec(theta, r)
        ot, orr = kernels.iterate_many(t, x, int(n), self.params)
        if scalar:
            return float(ot[0]), float(orr[0])
        return ot.reshape(shape), orr.reshape(shape)

    def orbit(self, theta, r, n):
        return kernels.orbit_wrapped(float(theta), float(r), int(n), self.params)

    def orbits(self, theta, r, n):
        t = np.ascontiguousarray(np.atleast_1d(np.asarray(theta, float)))
        x = np.ascontiguousarray(np.atleast_1d(np.asarray(r, float)))
        return kernels.orbits_wrapped(t, x, int(n), self.params)

    def first_hits(self, theta, r, nmax, nmin, box, r_lo, r_hi, earliest=False):
        t, x, _ = self._vec(theta, r)
        fn = kernels.earliest_hits if earliest else kernels.first_hits
        return fn(t, x, int(nmax), int(nmin), self.params, np.asarray(box, float), float(r_lo), float(r_hi))


@dataclass
class ModelConfig:
    model: str
    params: dict = field(default_factory=dict)
    annulus: tuple = (0.0, 1.0)
    continuation: tuple | None = None

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        model = d.pop("model")
        ann = tuple(d.pop("annulus", (0.0, 1.0)))
        cont = d.pop("continuation", None)
        params = dict(d.pop("params", {}))
        params.update(d)
        return cls(model, params, ann, tuple(cont) if cont is not None else None)


def _check(cond, msg):
    if not cond:
        raise InvalidParameter(msg)


def _kick_reach(k, harmonics):
    """Largest r-displacement of the kick; the band this far inside the flat part sees an exact kick."""
    return k / (2 * np.pi) * sum(abs(h[0]) for h in harmonics)


def instantiate_model(config: ModelConfig) -> AnnulusMap:
    name = config.model
    p = dict(config.params)
    _check(name in MODELS, f"unknown model {name!r}; expected one of {MODELS}")
    a, b = map(float, config.annulus)
    ann = Annulus(a, b)
    if config.continuation is not None:
        cont = Annulus(*map(float, config.continuation))
    else:
        pad = 0.1 * (b - a)
        cont = Annulus(a - pad, b + pad)
    _check(cont.encloses(ann), "continuation must enclose the annulus")

    if name == "rigid":
        omega = float(p.get("omega", 0.0))
        params = KickTwistMap.pack(twist_coef=0.0, omega0=omega)
        return KickTwistMap(params, ann, cont, twist=None, name="rigid")
    if name == "integrable":
        return KickTwistMap(KickTwistMap.pack(), ann, cont, twist="right", name="integrable")

    k = float(p.get("k", 0.0))
    _check(0.0 <= k <= 50.0, f"k={k} outside [0, 50]")
    harmonics = p.get("harmonics", ((1.0, 1, 0.0),))
    for h in harmonics:
        _check(len(h) == 3 and int(h[1]) == h[1] and h[1] >= 1, "harmonics are (amp, freq>=1, phase)")

    if name == "bump_standard":
        beta = float(p.get("beta", 0.05))
        _check(0.0 < beta < 0.5 * (b - a), f"beta={beta} must lie in (0, (b-a)/2)")
        params = KickTwistMap.pack(k, a, b, beta, harmonics=harmonics)
        reach = _kick_reach(k, harmonics)
        return KickTwistMap(params, ann, cont, name="bump_standard",
                            flat_band=(a + beta + reach, b - beta - reach))

    if name == "engineered_zone":
        lo, hi = map(float, p.get("band", (0.45, 0.55)))
        _check(a < lo < hi < b, "band must lie inside the annulus")
        beta = float(p.get("beta", 0.2 * (hi - lo)))
        _check(0.0 < beta < 0.5 * (hi - lo), "beta must lie in (0, band width / 2)")
        params = KickTwistMap.pack(k, lo, hi, beta, harmonics=harmonics)
        # the twist only holds uniformly off the steep band ramps
        m = KickTwistMap(params, ann, cont, name="engineered_zone", flat_band=(a, lo))
        m.band = (lo, hi)
        return m

    # shear_pendulum_section: return map of the rotor 1/2 (r0^2 + r1^2) = e on the section theta0 = 0
    energy = float(p.get("energy", 1.0))
    _check(energy > 0, "energy must be positive")
    _check(0.0 < a and cont.b < np.sqrt(2 * energy), "annulus must lie in (0, sqrt(2 e))")
    beta = float(p.get("beta", 0.05))
    _check(0.0 < beta < 0.5 * (b - a), "beta must lie in (0, (b-a)/2)")
    params = KickTwistMap.pack(k, a, b, beta, twist_kind=1, twist_coef=energy, harmonics=harmonics)
    reach = _kick_reach(k, harmonics)
    return KickTwistMap(params, ann, cont, name="shear_pendulum_section",
                        flat_band=(a + beta + reach, b - beta - reach))


@dataclass(frozen=True)
class TwistReport:
    area_residual: float
    twist_margin: float
    boundary_residual: float
    passed: bool
    band: tuple
    samples: int


def verify_twist(fmap: AnnulusMap, samples: int = 1000, band=None, tol_area=1e-9, tol_twist=1e-9,
                 tol_boundary=1e-12, seed=0) -> TwistReport:
    if samples < 1000:
        raise InvalidParameter("verify_twist needs at least 1000 samples")
    rng = np.random.default_rng(seed)
    lo, hi = band if band is not None else (fmap.annulus.a, fmap.annulus.b)
    if hi <= lo:
        raise InvalidParameter(f"empty verification band [{lo}, {hi}]")
    th = rng.random(samples)
    r = lo + (hi - lo) * rng.random(samples)
    J = fmap.jac(th, r)
    area = float(np.max(np.abs(np.linalg.det(J) - 1.0)))
    sign = {"right": 1.0, "left": -1.0}.get(fmap.twist, 0.0)
    dth_dr = J[:, 0, 1]
    margin = float(np.min(sign * dth_dr)) if sign else float(np.min(np.abs(dth_dr)))
    tb = rng.random(samples)
    bres = 0.0
    for edge in (fmap.annulus.a, fmap.annulus.b):
        _, rr = fmap(tb, np.full(samples, edge))
        bres = max(bres, float(np.max(np.abs(rr - edge))))
    passed = bool(sign != 0 and area <= tol_area and margin > tol_twist and bres <= tol_boundary)
    return TwistReport(area, margin, bres, passed, (lo, hi), samples)


def rational_approximant(x, q_max):
    """Closest p/q with q <= q_max."""
    f = Fraction(float(x)).limit_denominator(q_max)
    return f.numerator, f.denominator, abs(float(x) - f.numerator / f.denominator)


def continued_fraction(x, depth=20, tol=1e-12):
    out = []
    for _ in range(depth):
        a = int(np.floor(x))
        out.append(a)
        frac = x - a
        if frac < tol:
            break
        x = 1.0 / frac
    return out


def density_gap(theta):
    """Largest gap between sorted angles on the circle."""
    t = np.sort(np.mod(theta, 1.0))
    gaps = np.diff(np.concatenate([t, [t[0] + 1.0]]))
    return float(gaps.max())


@dataclass(frozen=True)
class SpecialReport:
    rational_flags: list
    boundary_density: dict
    boundary_accumulation: dict
    heuristic: bool = True

    @property
    def passed(self):
        return (not self.rational_flags and all(v["dense"] for v in self.boundary_density.values())
                and all(v["accumulated"] for v in self.boundary_accumulation.values()))


def check_special(fmap: AnnulusMap, catalog, q_max=50, tol_rat=1e-6, eps_density=1e-2,
                  iterates=1_000_000, delta_acc=0.05) -> SpecialReport:
    """Heuristic proxies for specialness: irrational catalog, dense boundary orbits, accumulation."""
    flags = []
    for idx, c in enumerate(catalog):
        p, q, err = rational_approximant(c.rotation, q_max)
        if err < tol_rat:
            flags.append({"index": idx, "rotation": c.rotation, "p": p, "q": q})
    dens = {}
    acc = {}
    for label, edge in (("lower", fmap.annulus.a), ("upper", fmap.annulus.b)):
        th, _ = fmap.orbit(0.0, edge, iterates)
        gap = density_gap(th)
        dens[label] = {"max_gap": gap, "dense": bool(gap < eps_density)}
        if catalog:
            d = min(float(np.max(np.abs(c.samples - edge))) for c in catalog)
        else:
            d = np.inf
        acc[label] = {"nearest": d, "accumulated": bool(d < delta_acc)}
    return SpecialReport(flags, dens, acc)
