"""Birkhoff procedure, transfer search, splitting arcs, crux step, coherent sequences, zone crossing."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .annulus import Arc, NuBall, Point, angle_diff, classify_tilt, Tilt, wrap
from .circles import CertifiedCircle, certify_circle, lipschitz, GOLDEN
from .errors import (DriftError, FrontierNotInvariant, InvalidParameter, NoSplittingArc, NotFound, Stalled,
                     TouchesTop)
from .polysystem import (Corr, Correspondence, OrbitWord, PHI, Polysystem, Rect, equivariant_extension, masked,
                         reachable_set)

TOL_SPLIT = 1e-8


def _rect(region) -> Rect:
    if isinstance(region, Rect):
        return region
    if isinstance(region, NuBall):
        return Rect.from_ball(region)
    raise InvalidParameter(f"unsupported region {type(region).__name__}")


def ball_on(circle: CertifiedCircle, theta, theta_hw, nu, margin=0.1) -> NuBall:
    """nu-ball centered on the circle at angle theta."""
    c = Point(theta, float(circle.ell(theta)))
    rh = nu * theta_hw * (1 + margin)
    return NuBall(c.theta - theta_hw, c.theta + theta_hw, c.r - rh, c.r + rh, nu, c)


# ---------------------------------------------------------------- Birkhoff procedure

@dataclass(eq=False)
class ProcedureResult:
    circle: CertifiedCircle
    staircase: np.ndarray      # per-column frontier heights of the filled set
    filled: np.ndarray         # boolean grid of the filled set
    occupied: np.ndarray       # flood occupancy (forward orbit of V)
    r_edges: np.ndarray
    max_point: float           # highest flood point above the frontier columns
    flood_points: np.ndarray = field(repr=False, default=None)


def _label_periodic(mask, structure):
    """Connected components with theta (axis 0) periodic, by tiling three copies."""
    n = mask.shape[0]
    tiled = np.concatenate([mask, mask, mask], axis=0)
    lab, _ = ndimage.label(tiled, structure=structure)
    # merge labels identified across copies
    mid = lab[n:2 * n]
    left = lab[:n]
    right = lab[2 * n:]
    parent = {}

    def find(x):
        while parent.get(x, x) != x:
            x = parent[x]
        return x

    for a, b in ((mid, left), (mid, right)):
        pairs = np.unique(np.stack([a[a > 0], b[a > 0]], axis=1), axis=0) if np.any(a > 0) else []
        for u, v in pairs:
            ru, rv = find(int(u)), find(int(v))
            if ru != rv:
                parent[max(ru, rv)] = min(ru, rv)
    out = np.vectorize(lambda x: find(int(x)) if x > 0 else 0, otypes=[int])(mid) if mid.size else mid
    return out


def fill_and_frontier(occupied, below):
    """Connected-component surgery and per-column supremum of the filled set.

    `occupied` marks U (forward orbit cells and cells below the circle); `below` marks Gamma-.
    Returns (filled mask, column index of the topmost filled cell per theta column).
    """
    U = occupied | below
    if U[:, -1].any():
        raise TouchesTop("the forward orbit reaches the top boundary")
    eight = np.ones((3, 3), int)
    four = ndimage.generate_binary_structure(2, 1)
    comp = _label_periodic(~U, eight)
    top = set(np.unique(comp[:, -1])) - {0}
    outer = np.isin(comp, list(top))
    filled = ~outer
    lab = _label_periodic(filled, four)
    bottom = set(np.unique(lab[:, 0])) - {0}
    filled = np.isin(lab, list(bottom))
    col_top = np.array([np.nonzero(col)[0].max() if col.any() else -1 for col in filled])
    return filled, col_top


def _rotation_at(fmap, theta, r, n=4000):
    th, rr = fmap.orbit_lift(theta, r, n)
    from .annulus import weighted_rotation
    return weighted_rotation(np.diff(th))[0]


def birkhoff_procedure(fmap, circle: CertifiedCircle, V, grid=(256, 256), budget=5 * 10**6, tol=1e-6,
                       window=None, catalog=None, candidates=12, max_repeat=64) -> ProcedureResult:
    """Frontier of the filled forward-invariant set generated by Gamma- and V, certified as a circle.

    `window` optionally limits the grid to r in [window[0], window[1]]; touching its top raises TouchesTop.
    """
    if fmap.twist is None:
        raise InvalidParameter("the Birkhoff procedure needs a twist map")
    a, b = window or (fmap.annulus.a, fmap.annulus.b)
    nt, nr = grid
    poly = Polysystem(fmap, {}, type(fmap.annulus)(a, b))
    rect = _rect(V)
    rs = reachable_set(poly, rect, budget, shape=grid, slots=4, max_repeat=max_repeat)
    edges = a + (b - a) * np.arange(nr + 1) / nr
    centers = 0.5 * (edges[:-1] + edges[1:])
    th_c = (np.arange(nt) + 0.5) / nt
    below = centers[None, :] < circle.ell(th_c)[:, None]
    occ = rs.occupied
    filled, col_top = fill_and_frontier(occ, below)
    stair = edges[col_top + 1]
    pts = rs.points[rs.count > 0]
    cnt = rs.count[rs.count > 0]
    flood = np.concatenate([p[:c] for p, c in zip(pts, cnt)]) if len(pts) else np.zeros((0, 2))
    if len(flood):
        excess = flood[:, 1] - circle.ell(flood[:, 0])
        top_idx = int(np.argmax(flood[:, 1] - np.interp(flood[:, 0], th_c, stair, period=1.0)))
        max_point = float(flood[top_idx, 1])
    else:
        excess = np.zeros(0)
        max_point = float(circle.samples.max())
    # candidate circles: catalog members and fresh certifications in a rotation bracket
    dr = (b - a) / nr
    cands = []
    if catalog:
        for c in catalog:
            cands.append(c)
    if len(flood):
        j = int(np.argmax(excess))
        lo_rot = _rotation_at(fmap, flood[j, 0], flood[j, 1])
    else:
        lo_rot = circle.rotation
    hi_rot = _rotation_at(fmap, 0.0, min(float(stair.max()) + 2 * dr, fmap.annulus.b))
    lo_rot, hi_rot = min(lo_rot, hi_rot), max(lo_rot, hi_rot)
    offs = np.mod(np.arange(1, candidates + 1) * GOLDEN, 1.0)
    r_range = (max(fmap.annulus.a, float(stair.min()) - 4 * dr), min(fmap.annulus.b, float(stair.max()) + 4 * dr))

    def admissible(c):
        if len(flood) and np.any(flood[:, 1] > c.ell(flood[:, 0]) + 1e-12):
            return False
        if np.any(c.samples < circle.samples - 1e-12):
            return False
        return np.max(np.abs(c.ell(th_c) - stair)) <= 2 * dr + 2 * c.nu / nt

    best = None
    for c in cands:
        if admissible(c) and (best is None or c.mean_height() < best.mean_height()):
            best = c
    # rotation increases with height, so the first admissible fresh circle is the lowest one
    for w in np.sort(lo_rot + (hi_rot - lo_rot) * offs):
        if best is not None and w >= best.rotation:
            break
        c = certify_circle(fmap, w, tol, r_range=r_range)
        if c and admissible(c):
            best = c
            break
    if best is None:
        from .circles import graph_residual
        s = np.interp(np.arange(2048) / 2048, th_c, stair, period=1.0)
        raise FrontierNotInvariant(graph_residual(fmap, s))
    return ProcedureResult(best, stair, filled, occ, edges, max_point, flood)


# ---------------------------------------------------------------- transfer search

@dataclass
class Transfer:
    n: int
    witness: Point
    image: Point


def _sample(rect: Rect, n_side):
    u = (np.arange(n_side) + 0.5) / n_side * 2 - 1
    U, W = np.meshgrid(u, u, indexing="ij")
    th = rect.theta_c + U.ravel() * min(rect.theta_hw, 0.5) * 0.999
    r = 0.5 * (rect.r_lo + rect.r_hi) + W.ravel() * 0.5 * (rect.r_hi - rect.r_lo) * 0.999
    return wrap(th), r


def transfer_search(fmap, circle, V, circle2, V2, budget=10**5, n_side=16, n_min=0) -> Transfer:
    """Least n <= budget with a sample of phi^n(V) inside V2 and strictly below circle2."""
    rect, target = _rect(V), _rect(V2)
    th, r = _sample(rect, n_side)
    th0, r0 = th.copy(), r.copy()
    cont = fmap.continuation
    for n in range(budget + 1):
        if n >= n_min:
            hit = target.contains(th, r) & circle2.below(th, r)
            if hit.any():
                k = int(np.argmax(hit))
                return Transfer(n, Point(th0[k], r0[k]), Point(th[k], r[k]))
        if n == budget:
            break
        th, r = fmap(th, r)
        alive = (r >= cont.a) & (r <= cont.b)
        th, r = th[alive], r[alive]
        th0, r0 = th0[alive], r0[alive]
        if th.size == 0:
            break
    raise NotFound(budget, "transfer")


# ---------------------------------------------------------------- splitting arcs

@dataclass(eq=False)
class SplittingArc:
    arc: Arc
    base: Point
    orientation: str          # "Right", "Left" or "Unoriented"
    corr: object
    residual: float
    theta0: float
    tau: float
    derivative: tuple
    correspondence: Correspondence = field(repr=False, default=None)

    def point(self, s):
        return Point(float(np.interp(s, self.arc.s, self.arc.theta)), float(np.interp(s, self.arc.s, self.arc.r)))


@dataclass(eq=False)
class ArcDomain:
    arc: SplittingArc
    theta: np.ndarray
    lower: np.ndarray   # beta(theta): topmost crossing of the arc
    upper: np.ndarray   # alpha(theta): the circle

    def contains(self, theta, r):
        d = angle_diff(theta, self.arc.theta0)
        lo = np.interp(d, self.theta - self.arc.theta0, self.lower, left=np.nan, right=np.nan)
        hi = np.interp(d, self.theta - self.arc.theta0, self.upper, left=np.nan, right=np.nan)
        return (np.asarray(r) > lo) & (np.asarray(r) < hi)


def arc_domain(sa: SplittingArc, circle: CertifiedCircle, n=256) -> ArcDomain:
    sign = 1.0 if sa.orientation != "Left" else -1.0
    th = sa.theta0 + sign * sa.tau * (np.arange(1, n) / n)
    ath = sa.arc.theta
    lower = np.full(th.shape, np.nan)
    for k, t in enumerate(th):
        # crossings of the arc polyline with the vertical through t
        d = angle_diff(ath, t)
        sgn = np.sign(d)
        idx = np.nonzero(sgn[:-1] * sgn[1:] <= 0)[0]
        if idx.size:
            w = d[idx] / np.where(d[idx] - d[idx + 1] == 0, 1, d[idx] - d[idx + 1])
            rr = sa.arc.r[idx] + w * (sa.arc.r[idx + 1] - sa.arc.r[idx])
            lower[k] = rr.max()
    order = np.argsort(th - sa.theta0)
    return ArcDomain(sa, th[order], lower[order], circle.ell(th)[order])


def _runs(mask):
    """Maximal runs of True in a periodic boolean array, as (start, length)."""
    n = len(mask)
    if mask.all():
        return [(0, n)]
    if not mask.any():
        return []
    start = int(np.argmin(mask))  # a False index
    runs, cur = [], None
    for k in range(1, n + 1):
        j = (start + k) % n
        if mask[j] and cur is None:
            cur = k
        elif not mask[j] and cur is not None:
            runs.append(((start + cur) % n, k - cur))
            cur = None
    if cur is not None:
        runs.append(((start + cur) % n, n + 1 - cur))
    return runs


def _arcs_for(circle: CertifiedCircle, c: Correspondence, n=4096, tau_max=0.5 - 1e-3):
    th = np.arange(n) / n
    ell = circle.ell(th)
    qt, qr = c.inverse(th, ell)
    qt = wrap(qt)
    ok = np.asarray(c.in_domain(qt, qr), bool) & circle.below(qt, qr, 1e-12)
    arcs = []
    for start, length in _runs(ok):
        if length < 3:
            continue
        idx = (start + np.arange(length)) % n
        for end, direction in ((start - 1) % n, 1), (((start + length) % n), -1):
            seq = idx if direction == 1 else idx[::-1]
            base_t, base_r = _boundary_point(circle, c, th[end], th[seq[0]])
            # the closure must touch the circle at the base point
            if abs(base_r - float(circle.ell(base_t))) > 1e-7:
                continue
            at = np.concatenate([[base_t], qt[seq]])
            ar = np.concatenate([[base_r], qr[seq]])
            lift_t = base_t + np.concatenate([[0.0], np.cumsum(angle_diff(at[1:], at[:-1]))])
            span = np.abs(lift_t - base_t)
            keep = span < tau_max
            keep[0] = True
            lift_t, ar = lift_t[keep], ar[keep]
            if len(lift_t) < 3:
                continue
            tau = float(np.abs(lift_t[-1] - base_t))
            d0 = (lift_t[1] - lift_t[0], ar[1] - ar[0])
            if d0[0] > 0:
                orient = "Right"
            elif d0[0] < 0:
                orient = "Left"
            else:
                orient = "Unoriented"
            arc = Arc.from_polyline(lift_t, ar)
            img_t, img_r = c(wrap(lift_t[1:]), ar[1:])
            res = float(np.max(np.abs(img_r - circle.ell(wrap(img_t)))))
            h = float(np.hypot(*d0))
            arcs.append(SplittingArc(arc, Point(base_t, base_r), orient, c.ident, res, float(base_t), tau,
                                     (d0[0] / h, d0[1] / h), c))
    return arcs


def _boundary_point(circle, c, t_out, t_in, iters=60):
    """Bisect the circle parameter between an outside and inside sample for the base point of the arc."""
    lo, hi = t_out, t_out + angle_diff(t_in, t_out)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        qt, qr = c.inverse(np.array([wrap(mid)]), circle.ell(np.array([wrap(mid)])))
        inside = bool(c.in_domain(wrap(qt), qr)[0]) and bool(circle.below(wrap(qt), qr, 1e-14)[0])
        if inside:
            hi = mid
        else:
            lo = mid
    qt, qr = c.inverse(np.array([wrap(lo)]), circle.ell(np.array([wrap(lo)])))
    return float(wrap(qt[0])), float(qr[0])


def find_splitting_arcs(circle: CertifiedCircle, poly: Polysystem, orientation="Any", tol_split=TOL_SPLIT):
    out = []
    for c in poly.correspondences.values():
        for sa in _arcs_for(circle, c):
            if sa.residual >= tol_split + 10 * circle.residual:
                continue
            if orientation != "Any" and sa.orientation != orientation:
                continue
            out.append(sa)
    order = {"Right": 0, "Left": 1, "Unoriented": 2}
    out.sort(key=lambda s: order[s.orientation])
    return out


def find_splitting_arc(circle: CertifiedCircle, poly: Polysystem, orientation="Any", tol_split=TOL_SPLIT):
    arcs = find_splitting_arcs(circle, poly, orientation, tol_split)
    if not arcs:
        raise NoSplittingArc(f"no {orientation} splitting arc on the circle rho={circle.rotation:.6g}")
    return arcs[0]


# ---------------------------------------------------------------- crux step

@dataclass(eq=False)
class CruxResult:
    n: int
    corr: object
    ball: NuBall
    circle: CertifiedCircle
    witness: Point          # z in V with psi(phi^n z) in the new ball
    landing: Point
    contained: bool         # whole-ball containment verified at corners and center
    procedure: ProcedureResult = field(repr=False, default=None)
    arc: SplittingArc = field(repr=False, default=None)
    method: str = "direct"
    inscribed: NuBall | None = None   # ball certified inside psi_i(phi^n(V)), possibly much smaller than `ball`


def _contained(fmap, corr, n, V: Rect, ball: NuBall):
    th, r = ball.corners()
    t0, r0 = corr.inverse(wrap(th), r)
    if not np.all(corr.in_domain(wrap(t0), r0)):
        return False
    t1, r1 = fmap.power(wrap(t0), r0, -n) if n else (wrap(t0), r0)
    return bool(np.all(V.contains(t1, r1)))


def _inscribe(fmap, corr, n, V: Rect, circle, landing: Point, theta_hw, nu, margin, iters=20):
    """Largest scaled nu-ball centered on the circle at the landing angle and contained in psi(phi^n(V))."""
    full = ball_on(circle, landing.theta, theta_hw, nu, margin)
    if _contained(fmap, corr, n, V, full):
        return full
    lo, hi, best = 0.0, 1.0, None
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        ball = ball_on(circle, landing.theta, theta_hw * mid, nu, margin)
        if _contained(fmap, corr, n, V, ball):
            best, lo = ball, mid
        else:
            hi = mid
    return best


def _onto_circle(fmap, corr, n, V: Rect, circle, z: Point, samples=64):
    """Slide the witness vertically inside V so that psi(phi^n(z)) lies on the circle; None if no sign change."""
    from scipy.optimize import brentq

    def gap(r):
        t1, r1 = fmap.iterate(np.array([z.theta]), np.array([r]), n) if n else (np.array([z.theta]), np.array([r]))
        if not corr.in_domain(t1, r1)[0]:
            return np.nan
        t2, r2 = corr(t1, r1)
        return float(r2[0] - circle.ell(wrap(t2))[0])

    grid = np.linspace(V.r_lo, V.r_hi, samples + 2)[1:-1]
    vals = np.array([gap(r) for r in grid])
    flips = np.nonzero(np.isfinite(vals[:-1]) & np.isfinite(vals[1:]) & (vals[:-1] * vals[1:] <= 0))[0]
    if flips.size == 0:
        return None
    k = flips[np.argmin(np.abs(grid[flips] - z.r))]
    zr = brentq(gap, grid[k], grid[k + 1], xtol=1e-15) if vals[k] != 0 else grid[k]
    return Point(z.theta, float(zr))


def _targets_on_arc(sa: SplittingArc, count=9):
    s = np.concatenate([[0.5], np.linspace(0.1, 0.95, count - 1)])
    return [sa.point(x) for x in s]


def crux_step(fmap, circle: CertifiedCircle, V, poly: Polysystem, budget=10**5, theta_hw=None, nu=None,
              margin=0.1, orientation="Any", method=None, m_max=4, procedure_kw=None, n_side=16,
              proc: ProcedureResult | None = None, avoid=None, prefer_theta=None) -> CruxResult:
    """One step V -> V' with V' a nu-ball on B(Gamma, V) and V' meeting psi_i(phi^n(V)).

    `orientation` filters splitting arcs ("Right" realizes the strict compatibility condition).
    `method="equivariant"` retries with psi_{i(m)}, 0 < |m| <= m_max, when no arc passes the filter.
    """
    rect = _rect(V)
    if proc is None:
        proc = birkhoff_procedure(fmap, circle, rect, **(procedure_kw or {}))
    new = proc.circle
    theta_hw = theta_hw or rect.theta_hw
    nu = nu or (rect.r_hi - rect.r_lo) / (2 * rect.theta_hw * (1 + margin))
    arcs = find_splitting_arcs(new, poly, orientation)
    used = "direct"
    if not arcs and method == "equivariant":
        for m in [k for j in range(1, m_max + 1) for k in (-j, j)]:
            ext = {}
            for i in poly.correspondences:
                try:
                    ext[f"{i}({m})"] = equivariant_extension(poly, i, m)
                except DriftError:
                    continue
            arcs = find_splitting_arcs(new, Polysystem(fmap, ext, poly.annulus), orientation)
            if arcs:
                used = f"equivariant m={m}"
                break
    if not arcs:
        raise NoSplittingArc(f"no usable splitting arc on B(Gamma, V) at rho={new.rotation:.6g}")
    best = None
    for sa in arcs:
        corr = sa.correspondence
        for q in _targets_on_arc(sa):
            hw = max(min(theta_hw, 0.25 * sa.tau), 1e-6)
            box = Rect(q.theta, 0.5 * hw, q.r - 0.5 * nu * hw, q.r + 0.5 * nu * hw)
            box = Rect(box.theta_c, box.theta_hw, max(box.r_lo, -np.inf), min(box.r_hi, float(new.ell(q.theta))))
            th, r = _sample(rect, n_side)
            cont = fmap.continuation
            hits = fmap.first_hits(th, r, budget, 0, (box.theta_c, box.theta_hw, box.r_lo, box.r_hi), cont.a, cont.b,
                                   earliest=True)
            good = np.nonzero(hits >= 0)[0]
            if good.size == 0:
                continue
            # among the earliest hits, take the one landing closest to the arc point
            nmin = hits[good].min()
            cand = good[hits[good] == nmin]
            zt, zr = th[cand], r[cand]
            pt, pr = fmap.iterate(zt, zr, int(nmin))
            ok = np.asarray(corr.in_domain(pt, pr), bool) & new.below(pt, pr)
            if not ok.any():
                continue
            k = int(np.argmin(np.where(ok, np.hypot(angle_diff(pt, q.theta), pr - q.r), np.inf)))
            lt, lr = corr(np.array([pt[k]]), np.array([pr[k]]))
            landing = Point(float(lt[0]), float(lr[0]))
            if avoid is not None and (avoid(np.array([landing.theta]), np.array([landing.r]))[0]):
                continue
            score = (int(nmin), float(abs(landing.r - new.ell(landing.theta))))
            if best is None or score < best[0]:
                best = (score, sa, corr, int(nmin), Point(float(zt[k]), float(zr[k])), landing)
            break
        if best is not None and best[0][0] == 0:
            break
    if best is None:
        raise NotFound(budget, "crux transfer")
    _, sa, corr, n, z, landing = best
    ball = _inscribe(fmap, corr, n, rect, new, landing, theta_hw, nu, margin)
    contained = ball is not None and bool(ball.contains(landing.theta, landing.r))
    inscribed = ball if contained else None
    if not contained:
        # the image of V is a thin strip for large n: certify a small ball where the strip meets the circle
        z2 = _onto_circle(fmap, corr, n, rect, new, z)
        if z2 is not None:
            pt, pr = fmap.iterate(np.array([z2.theta]), np.array([z2.r]), n) if n else ([z2.theta], [z2.r])
            lt, lr = corr(np.asarray(pt, float), np.asarray(pr, float))
            inscribed = _inscribe(fmap, corr, n, rect, new, Point(float(wrap(lt[0])), float(lr[0])), theta_hw, nu,
                                  margin, iters=40)
    if ball is None or not ball.contains(landing.theta, landing.r):
        # pointwise witness: a ball of the nominal size centered on the circle above the landing point
        ball = ball_on(new, landing.theta, theta_hw, nu, margin)
        contained = False
        if not ball.contains(landing.theta, landing.r):
            raise NotFound(budget, "landing outside the nominal ball")
    return CruxResult(n, sa.corr, ball, new, z, landing, contained, proc, sa, used, inscribed)


# ---------------------------------------------------------------- coherent sequences

@dataclass(eq=False)
class CoherentStep:
    circle: CertifiedCircle
    ball: NuBall
    m: int
    corr: object
    witness: Point
    landing: Point
    contained: bool
    gap: float
    gap_kind: str    # "delta", "zone" or "wide"
    correspondence: Correspondence = field(repr=False, default=None)

    def to_record(self):
        b = self.ball
        return {"rotation_number": self.circle.rotation, "hausdorff_gap": self.gap, "gap_kind": self.gap_kind,
                "witness": {"corr": str(self.corr), "m": self.m,
                            "z": [self.witness.theta, self.witness.r],
                            "landing": [self.landing.theta, self.landing.r]},
                "contained": self.contained,
                "ball": {"center": [b.center.theta, b.center.r], "theta_halfwidth": b.theta_halfwidth,
                         "r_halfwidth": b.r_halfwidth, "nu": b.nu}}


@dataclass(eq=False)
class CoherentSequence:
    circles: list
    balls: list
    steps: list
    reached: bool = True

    def __len__(self):
        return len(self.steps)

    def to_records(self):
        return [s.to_record() for s in self.steps]


def reached_target(circle: CertifiedCircle, target: CertifiedCircle, tol=1e-9):
    return bool(np.all(circle.samples >= target.ell(circle.theta) - tol))


def _zone_between(zones, lower, upper, tol):
    for z in zones or []:
        if (np.max(np.abs(z.upper.ell(upper.theta) - upper.samples)) < tol and
                np.all(z.lower.ell(lower.theta) <= lower.samples + tol)):
            return True
    return False


def coherent_sequence(fmap, poly: Polysystem, circle0: CertifiedCircle, V0, target: CertifiedCircle, delta,
                      zones=None, avoid=None, max_steps=400, budget=10**5, procedure_kw=None, strict=False,
                      **crux_kw) -> CoherentSequence:
    """Iterate crux steps from (circle0, V0) until the circles reach `target`.

    `avoid(theta, r)` marks a forbidden compact set: correspondences touching it are masked and landings
    inside it are rejected.  Gaps wider than delta are accepted only when they bound a recorded zone
    (when `strict`), otherwise they are flagged in the step record.
    """
    circles, balls, steps = [circle0], [V0], []
    if reached_target(circle0, target):
        return CoherentSequence(circles, balls, steps)
    if avoid is not None:
        poly = Polysystem(poly.fmap, {i: masked(c, avoid) for i, c in poly.correspondences.items()},
                          poly.annulus, poly.symmetrized, poly.restriction)
    circle, V = circle0, V0
    # nominal ball size for pointwise-witness steps is the seed ball's
    r0 = _rect(V0)
    crux_kw.setdefault("theta_hw", r0.theta_hw)
    crux_kw.setdefault("nu", (r0.r_hi - r0.r_lo) / (2 * r0.theta_hw * 1.1))
    touched = False
    for _ in range(max_steps):
        try:
            res = crux_step(fmap, circle, V, poly, budget, procedure_kw=procedure_kw, avoid=avoid, **crux_kw)
        except TouchesTop:
            touched = True
            break
        except (NoSplittingArc, NotFound, FrontierNotInvariant) as exc:
            raise Stalled(poly.annulus, circle.rotation, str(exc)) from exc
        gap = circle.sup_distance(res.circle)
        kind = "delta" if gap < delta else ("zone" if _zone_between(zones, circle, res.circle, 1e-3) else "wide")
        if strict and kind == "wide":
            raise Stalled(poly.annulus, circle.rotation, f"gap {gap:.4g} >= delta without a recorded zone")
        steps.append(CoherentStep(res.circle, res.ball, res.n, res.corr, res.witness, res.landing, res.contained,
                                  gap, kind, res.arc.correspondence))
        circles.append(res.circle)
        balls.append(res.ball)
        circle, V = res.circle, res.ball
        if reached_target(circle, target):
            return CoherentSequence(circles, balls, steps)
    # a flood touching the top means B(Gamma, V) is the top boundary itself
    reached = touched or reached_target(circle, target) or (isinstance(V, NuBall) and V.r_hi >= target.samples.min())
    if not reached:
        raise Stalled(poly.annulus, circle.rotation, "step budget exhausted before reaching the target")
    return CoherentSequence(circles, balls, steps, reached)


# ---------------------------------------------------------------- zone crossing and torsion

@dataclass
class Crossing:
    z: Point
    n: int
    image: Point
    evaluations: int


def cross_zone(fmap, zone, V_low, V_high, n_min=0, budget=10**8, n_side=32) -> Crossing:
    """z in V_low and n >= n_min with phi^n(z) in V_high, refining the sample lattice near hits."""
    low, high = _rect(V_low), _rect(V_high)
    cont = fmap.continuation
    used = 0
    side = n_side
    box = (high.theta_c, high.theta_hw, high.r_lo, high.r_hi)
    while used < budget:
        th, r = _sample(low, side)
        nmax = int(min(max(10 * (n_min + 1000), 10**4), (budget - used) // max(th.size, 1)))
        if nmax < n_min:
            break
        hits = fmap.first_hits(th, r, nmax, n_min, box, cont.a, cont.b, earliest=True)
        found = np.nonzero(hits >= 0)[0]
        used += th.size * nmax
        if found.size:
            k = found[np.argmin(hits[found])]
            n = int(hits[k])
            it, ir = fmap.iterate(np.array([th[k]]), np.array([r[k]]), n)
            return Crossing(Point(th[k], r[k]), n, Point(float(it[0]), float(ir[0])), used)
        side *= 2
    raise NotFound(budget, "zone crossing")


def torsion_vertical_search(fmap, circle_low, circle_high, C: Arc, U_low, budget=10**4, n_vertical=200,
                            n_candidates=8):
    """z in U_low and m with phi^m(V-(z) within U_low) crossing the arc C."""
    if np.all(np.abs(circle_low.samples - circle_high.ell(circle_low.theta)) < 1e-12) or \
            not np.all(circle_low.samples <= circle_high.ell(circle_low.theta) + 1e-12):
        raise InvalidParameter("circles must be disjoint and ordered")
    if fmap.twist is None:
        raise NotFound(budget, "torsion search without twist")
    rect = _rect(U_low)
    ct = np.asarray(C.theta, float)
    cr = np.asarray(C.r, float)
    stride = max(1, len(ct) // 64)
    ct, cr = ct[::stride], cr[::stride]
    for k in range(n_candidates):
        zt = rect.theta_c + (2 * ((k + 0.5) / n_candidates) - 1) * min(rect.theta_hw, 0.5) * 0.9
        zr = rect.r_hi - 1e-9 * (rect.r_hi - rect.r_lo)
        vt = np.full(n_vertical, zt)
        vr = np.linspace(rect.r_lo, zr, n_vertical)
        for m in range(1, budget + 1):
            vt, vr = fmap.lift(vt, vr)
            if _polylines_cross(vt, vr, ct, cr):
                return Point(zt, zr), m
    raise NotFound(budget, "torsion vertical")


def _polylines_cross(at, ar, bt, br):
    """Segment intersection test between two polylines on the cylinder (theta mod 1)."""
    # align each segment of `a` to the lift of b near it
    p = np.stack([at[:-1], ar[:-1]], 1)
    q = np.stack([at[1:], ar[1:]], 1)
    shift = np.round(np.mean(bt) - p[:, 0])
    p[:, 0] += shift
    q[:, 0] += shift
    r1 = np.stack([bt[:-1], br[:-1]], 1)
    r2 = np.stack([bt[1:], br[1:]], 1)

    def orient(a, b, c):
        return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])

    P, Q = p[:, None, :], q[:, None, :]
    R1, R2 = r1[None, :, :], r2[None, :, :]
    d1 = orient(P, Q, R1)
    d2 = orient(P, Q, R2)
    d3 = orient(R1, R2, P)
    d4 = orient(R1, R2, Q)
    return bool(np.any((d1 * d2 < 0) & (d3 * d4 < 0)))


# ---------------------------------------------------------------- tilt helpers

def image_arc(fmap, arc: Arc, n=1) -> Arc:
    """Image of an arc under the lift of phi^n, with exact tangent propagation through the Jacobian."""
    th, r = arc.theta, arc.r
    dth, dr = arc.dtheta, arc.dr
    step = fmap.lift if n >= 0 else fmap.inverse_lift
    for _ in range(abs(n)):
        if n >= 0:
            J = fmap.jac(th, r)
            dth, dr = J[:, 0, 0] * dth + J[:, 0, 1] * dr, J[:, 1, 0] * dth + J[:, 1, 1] * dr
            th, r = step(th, r)
        else:
            th, r = step(th, r)
            J = fmap.jac(th, r)
            det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
            dth, dr = (J[:, 1, 1] * dth - J[:, 0, 1] * dr) / det, (-J[:, 1, 0] * dth + J[:, 0, 0] * dr) / det
    return Arc(arc.s, th, r, dth, dr)


def image_tilt(fmap, arc: Arc, n=1, tol=1e-6) -> Tilt:
    return classify_tilt(image_arc(fmap, arc, n), tol)
