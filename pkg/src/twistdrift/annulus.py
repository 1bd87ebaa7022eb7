"""Annulus geometry: points, lifts, arcs, tilt classes, nu-balls and rotation numbers."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import BallExitsAnnulus, DegenerateDerivative, InvalidParameter

H_ARC = 1e-3


def wrap(theta):
    """Reduce angles to [0, 1)."""
    t = np.mod(theta, 1.0)
    # np.mod can return 1.0 for tiny negative inputs
    return np.where(t >= 1.0, 0.0, t) if isinstance(t, np.ndarray) else (0.0 if t >= 1.0 else float(t))


def angle_diff(t1, t0):
    """Signed angular difference t1 - t0 reduced to [-1/2, 1/2)."""
    return np.mod(np.asarray(t1) - t0 + 0.5, 1.0) - 0.5


@dataclass(frozen=True)
class Annulus:
    a: float
    b: float

    def __post_init__(self):
        if not (np.isfinite(self.a) and np.isfinite(self.b)) or not self.a < self.b:
            raise InvalidParameter(f"annulus needs a < b, got [{self.a}, {self.b}]")

    @property
    def height(self):
        return self.b - self.a

    def contains(self, theta, r, tol=0.0):
        r = np.asarray(r)
        return (r >= self.a - tol) & (r <= self.b + tol)

    def validate(self, p: "Point", tol=1e-12) -> "Point":
        if not self.a - tol <= p.r <= self.b + tol:
            raise InvalidParameter(f"r={p.r} outside [{self.a}, {self.b}]")
        return p

    def encloses(self, other: "Annulus") -> bool:
        return self.a <= other.a and other.b <= self.b


@dataclass(frozen=True)
class Point:
    theta: float
    r: float

    def __post_init__(self):
        if not (np.isfinite(self.theta) and np.isfinite(self.r)):
            raise InvalidParameter("point coordinates must be finite")
        object.__setattr__(self, "theta", wrap(float(self.theta)))
        object.__setattr__(self, "r", float(self.r))

    def as_array(self):
        return np.array([self.theta, self.r])


@dataclass(frozen=True)
class Lift:
    theta: float
    r: float

    def project(self) -> Point:
        return Point(self.theta, self.r)


def lift(p: Point, turns: int = 0) -> Lift:
    return Lift(p.theta + turns, p.r)


def project(l: Lift) -> Point:
    return l.project()


class Tilt(enum.Enum):
    POSITIVE = "Positive"
    NEGATIVE = "Negative"
    NEITHER = "Neither"


@dataclass(frozen=True, eq=False)
class Arc:
    """Polyline arc in lifted coordinates with derivative estimates per sample."""

    s: np.ndarray
    theta: np.ndarray
    r: np.ndarray
    dtheta: np.ndarray
    dr: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s, float)
        if s.size < 2 or s[0] != 0.0 or s[-1] != 1.0 or np.any(np.diff(s) <= 0):
            raise InvalidParameter("arc parameters must increase strictly from 0 to 1")

    @classmethod
    def from_polyline(cls, theta, r, s=None):
        theta = np.asarray(theta, float)
        r = np.asarray(r, float)
        if s is None:
            seg = np.hypot(np.diff(theta), np.diff(r))
            s = np.concatenate([[0.0], np.cumsum(seg)])
            if s[-1] <= 0:
                raise DegenerateDerivative("arc has zero length")
            s = s / s[-1]
        s = np.asarray(s, float)
        dtheta = np.gradient(theta, s, edge_order=1)
        dr = np.gradient(r, s, edge_order=1)
        return cls(s, theta, r, dtheta, dr)

    @classmethod
    def from_function(cls, fn, dfn=None, h_arc=H_ARC, n_min=16):
        """Sample s -> (theta, r) so consecutive samples are within h_arc."""
        n = n_min
        while True:
            s = np.linspace(0.0, 1.0, n)
            theta, r = fn(s)
            gap = np.max(np.hypot(np.diff(theta), np.diff(r)))
            if gap <= h_arc or n > 2**22:
                break
            n = int(n * max(2.0, 1.1 * gap / h_arc))
        theta = np.asarray(theta, float)
        r = np.asarray(r, float)
        if dfn is not None:
            dtheta, dr = dfn(s)
            return cls(s, theta, r, np.asarray(dtheta, float), np.asarray(dr, float))
        return cls.from_polyline(theta, r, s)

    @classmethod
    def segment(cls, p0, p1, h_arc=H_ARC):
        p0 = np.asarray(p0, float)
        d = np.asarray(p1, float) - p0
        return cls.from_function(lambda s: (p0[0] + d[0] * s, p0[1] + d[1] * s),
                                 lambda s: (np.full_like(s, d[0]), np.full_like(s, d[1])), h_arc)

    @property
    def start(self):
        return Lift(float(self.theta[0]), float(self.r[0]))

    @property
    def end(self):
        return Lift(float(self.theta[-1]), float(self.r[-1]))

    def max_gap(self):
        return float(np.max(np.hypot(np.diff(self.theta), np.diff(self.r))))

    def reflect(self, theta0=0.0):
        """Mirror through the vertical theta = theta0."""
        return Arc(self.s, 2 * theta0 - self.theta, self.r, -self.dtheta, self.dr)

    def restrict(self, s0, s1):
        """Sub-arc on [s0, s1], reparameterized to [0, 1]."""
        keep = (self.s > s0) & (self.s < s1)
        s = np.concatenate([[s0], self.s[keep], [s1]])
        th = np.interp(s, self.s, self.theta)
        r = np.interp(s, self.s, self.r)
        dth = np.interp(s, self.s, self.dtheta)
        dr = np.interp(s, self.s, self.dr)
        return Arc((s - s0) / (s1 - s0), th, r, dth * (s1 - s0), dr * (s1 - s0))


def tilt_angle(arc: Arc, tol=1e-6):
    """Continuous lift of the oriented angle from (0,1) to the derivative."""
    mag = np.hypot(arc.dtheta, arc.dr)
    if np.any(mag < tol):
        raise DegenerateDerivative(f"derivative below {tol} at some sample")
    # counterclockwise angle from the upward vertical
    ang = np.arctan2(-arc.dtheta, arc.dr)
    return np.unwrap(ang)


def classify_tilt(arc: Arc, tol=1e-6) -> Tilt:
    """Tilt class using the counterclockwise oriented angle from (0,1).

    Up-left derivatives start in ]0, pi[ and are Positive; up-right ones are Negative.
    Arcs within `tol` of the vertical or horizontal are Neither.
    """
    ang = tilt_angle(arc, tol)
    a0 = ang[0]
    if tol < a0 < np.pi - tol and np.all(ang > tol):
        return Tilt.POSITIVE
    if -np.pi + tol < a0 < -tol and np.all(ang < -tol):
        return Tilt.NEGATIVE
    return Tilt.NEITHER


@dataclass(frozen=True)
class NuBall:
    theta_lo: float
    theta_hi: float
    r_lo: float
    r_hi: float
    nu: float
    center: Point = field(compare=False)

    @property
    def theta_halfwidth(self):
        return 0.5 * (self.theta_hi - self.theta_lo)

    @property
    def r_halfwidth(self):
        return 0.5 * (self.r_hi - self.r_lo)

    @property
    def diameter(self):
        return float(np.hypot(self.theta_hi - self.theta_lo, self.r_hi - self.r_lo))

    def contains(self, theta, r, shrink=1.0):
        """Open-ball membership; theta is compared modulo 1 around the center."""
        dth = angle_diff(theta, self.center.theta)
        dr = np.asarray(r) - self.center.r
        return (np.abs(dth) < shrink * self.theta_halfwidth) & (np.abs(dr) < shrink * self.r_halfwidth)

    def corners(self, shrink=1.0):
        """Corners, edge midpoints and center as lifted (theta, r) arrays."""
        u = np.array([-1, 1, 1, -1, 0, 1, 0, -1, 0], float) * shrink
        v = np.array([-1, -1, 1, 1, -1, 0, 1, 0, 0], float) * shrink
        return self.center.theta + u * self.theta_halfwidth, self.center.r + v * self.r_halfwidth

    def grid(self, n=8, shrink=1.0):
        u = np.linspace(-1, 1, n) * shrink
        U, W = np.meshgrid(u, u, indexing="ij")
        return (self.center.theta + U.ravel() * self.theta_halfwidth,
                self.center.r + W.ravel() * self.r_halfwidth)

    def scaled(self, factor):
        return NuBall(self.center.theta - factor * self.theta_halfwidth,
                      self.center.theta + factor * self.theta_halfwidth,
                      self.center.r - factor * self.r_halfwidth,
                      self.center.r + factor * self.r_halfwidth, self.nu, self.center)


def make_nu_ball(center: Point, nu: float, theta_halfwidth: float, margin: float,
                 annulus: Annulus | None = None) -> NuBall:
    if not nu > 0:
        raise InvalidParameter("nu must be positive")
    if not 0 < theta_halfwidth < 0.25:
        raise InvalidParameter("theta_halfwidth must lie in (0, 1/4)")
    if not margin > 0:
        raise InvalidParameter("margin must be positive")
    rh = nu * theta_halfwidth * (1 + margin)
    r_lo, r_hi = center.r - rh, center.r + rh
    if annulus is not None and (r_lo < annulus.a or r_hi > annulus.b):
        raise BallExitsAnnulus(f"r-interval [{r_lo:.4g}, {r_hi:.4g}] leaves [{annulus.a}, {annulus.b}]")
    return NuBall(center.theta - theta_halfwidth, center.theta + theta_halfwidth, r_lo, r_hi, nu, center)


def box_ball(center: Point, theta_halfwidth: float, r_halfwidth: float) -> NuBall:
    """Rectangle centered at `center`, with nu set just below its aspect ratio."""
    nu = r_halfwidth / theta_halfwidth / (1 + 1e-9)
    return NuBall(center.theta - theta_halfwidth, center.theta + theta_halfwidth,
                  center.r - r_halfwidth, center.r + r_halfwidth, nu, center)


@dataclass(frozen=True)
class RotationEstimate:
    value: float
    error: float
    converged: bool
    iterates: int

    def __float__(self):
        return self.value


def bump_weights(n):
    t = (np.arange(n) + 0.5) / n
    w = np.exp(-1.0 / (t * (1.0 - t)))
    return w / w.sum()


def weighted_average(x):
    x = np.asarray(x, float)
    return float(bump_weights(len(x)) @ x)


def weighted_rotation(increments) -> tuple[float, float]:
    """Weighted Birkhoff average of lifted displacements and its half-window spread."""
    inc = np.asarray(increments, float)
    full = weighted_average(inc)
    half = weighted_average(inc[: len(inc) // 2])
    return full, abs(full - half)


def rotation_number(fmap, seed: Point, iterates: int = 100_000, tol: float = 1e-8) -> RotationEstimate:
    """Rotation number of the orbit of `seed`; NonConvergent is reported via converged=False."""
    if iterates < 1000:
        raise InvalidParameter("rotation_number needs at least 1000 iterates")
    # per-step lift displacements from the wrapped orbit; a long unwrapped lift loses precision
    th, r = fmap.orbit(seed.theta, seed.r, iterates)
    lt, _ = fmap.lift(th[:-1], r[:-1])
    value, err = weighted_rotation(lt - th[:-1])
    return RotationEstimate(value, err, bool(err <= tol), iterates)
