"""Polysystems of a twist map and correspondences: words, grid reachability, symmetrization."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .annulus import Annulus, NuBall, Point, angle_diff, wrap
from .errors import (BudgetExhausted, DomainEscapesAnnulus, InvalidParameter, OutsideDomain,
                     OutsideRestriction, RecurrenceNotFound)


# ---------------------------------------------------------------- symbols and words

@dataclass(frozen=True)
class Symbol:
    kind: str  # "Phi", "PhiInv" or "Corr"
    index: object = None

    def __post_init__(self):
        if self.kind not in ("Phi", "PhiInv", "Corr"):
            raise InvalidParameter(f"unknown symbol kind {self.kind}")

    def __str__(self):
        return {"Phi": "P", "PhiInv": "Pi"}.get(self.kind) or f"C{self.index}"

    @classmethod
    def parse(cls, token: str) -> "Symbol":
        if token == "P":
            return PHI
        if token == "Pi":
            return PHI_INV
        if token.startswith("C") and len(token) > 1:
            idx = token[1:]
            return cls("Corr", int(idx) if idx.lstrip("-").isdigit() else idx)
        raise InvalidParameter(f"cannot parse symbol {token!r}")


PHI = Symbol("Phi")
PHI_INV = Symbol("PhiInv")


def Corr(i):
    return Symbol("Corr", i)


@dataclass(frozen=True)
class OrbitWord:
    symbols: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "symbols", tuple(self.symbols))

    def __len__(self):
        return len(self.symbols)

    def __iter__(self):
        return iter(self.symbols)

    def __getitem__(self, i):
        return self.symbols[i]

    def __add__(self, other):
        return OrbitWord(self.symbols + tuple(other))

    def __str__(self):
        return " ".join(str(s) for s in self.symbols)

    @classmethod
    def parse(cls, text: str) -> "OrbitWord":
        return cls(tuple(Symbol.parse(t) for t in text.split()))

    def has_inverse(self):
        return PHI_INV in self.symbols

    def isolated_corr_form(self):
        """Every non-Phi symbol is isolated, i.e. surrounded by Phi symbols."""
        s = self.symbols
        return all(not (s[i] != PHI and s[i + 1] != PHI) for i in range(len(s) - 1))

    def compressed(self):
        """Run-length form such as 'P^12 C3 P^4'."""
        out, i = [], 0
        while i < len(self.symbols):
            j = i
            while j < len(self.symbols) and self.symbols[j] == self.symbols[i]:
                j += 1
            out.append(str(self.symbols[i]) + (f"^{j - i}" if j - i > 1 else ""))
            i = j
        return " ".join(out)


# ---------------------------------------------------------------- regions

@dataclass(frozen=True)
class Rect:
    """Axis-aligned box in (theta, r); theta is compared modulo 1 around the center."""
    theta_c: float
    theta_hw: float
    r_lo: float
    r_hi: float

    def contains(self, theta, r):
        r = np.asarray(r)
        inside_r = (r > self.r_lo) & (r < self.r_hi)
        if self.theta_hw >= 0.5:
            return inside_r & np.ones(np.shape(theta), bool)
        return inside_r & (np.abs(angle_diff(theta, self.theta_c)) < self.theta_hw)

    @property
    def center(self):
        return Point(self.theta_c, 0.5 * (self.r_lo + self.r_hi))

    def sample(self, n, rng):
        th = self.theta_c + (2 * rng.random(n) - 1) * min(self.theta_hw, 0.5)
        return wrap(th), self.r_lo + (self.r_hi - self.r_lo) * rng.random(n)

    def distance(self, theta, r):
        dth = np.maximum(np.abs(angle_diff(theta, self.theta_c)) - min(self.theta_hw, 0.5), 0.0)
        r = np.asarray(r)
        dr = np.maximum(np.maximum(self.r_lo - r, r - self.r_hi), 0.0)
        return np.hypot(dth, dr)

    @classmethod
    def from_ball(cls, ball: NuBall):
        return cls(ball.center.theta, ball.theta_halfwidth, ball.r_lo, ball.r_hi)

    @classmethod
    def around(cls, p: Point, hw_theta, hw_r):
        return cls(p.theta, hw_theta, p.r - hw_r, p.r + hw_r)

    @property
    def diameter(self):
        return float(np.hypot(2 * min(self.theta_hw, 0.5), self.r_hi - self.r_lo))


@dataclass(frozen=True)
class Region:
    """Union of rectangles; an empty list with `whole=True` is the full band [r_lo, r_hi]."""
    rects: tuple = ()
    whole: bool = False
    r_lo: float = -np.inf
    r_hi: float = np.inf

    def contains(self, theta, r):
        theta = np.asarray(theta, float)
        r = np.asarray(r, float)
        if self.whole:
            return (r >= self.r_lo) & (r <= self.r_hi)
        out = np.zeros(np.broadcast(theta, r).shape, bool)
        for rc in self.rects:
            out |= rc.contains(theta, r)
        return out

    def sample(self, n, rng):
        if self.whole:
            lo, hi = max(self.r_lo, -1e6), min(self.r_hi, 1e6)
            return rng.random(n), lo + (hi - lo) * rng.random(n)
        k = len(self.rects)
        pick = rng.integers(0, k, n)
        th = np.empty(n)
        r = np.empty(n)
        for j, rc in enumerate(self.rects):
            m = pick == j
            th[m], r[m] = rc.sample(int(m.sum()), rng)
        return th, r

    @property
    def diameter(self):
        return np.inf if self.whole else max(rc.diameter for rc in self.rects)


def whole_band(a=-np.inf, b=np.inf):
    return Region((), True, a, b)


# ---------------------------------------------------------------- correspondences

@dataclass(eq=False)
class Correspondence:
    ident: object
    domain: Region
    forward: Callable
    inverse: Callable
    transit_time: Callable = None
    area_preserving: bool = True
    meta: dict = field(default_factory=dict)

    def in_domain(self, theta, r):
        return self.domain.contains(theta, r)

    def in_image(self, theta, r):
        th, rr = self.inverse(np.asarray(theta, float), np.asarray(r, float))
        return self.domain.contains(th, rr)

    def tau(self, theta, r):
        if self.transit_time is None:
            return np.zeros_like(np.asarray(theta, float))
        return self.transit_time(theta, r)

    def __call__(self, theta, r):
        return self.forward(np.asarray(theta, float), np.asarray(r, float))


def _sine(theta, freq, phase):
    return np.sin(2 * np.pi * freq * theta + phase)


def global_shear(ident, eps, freq=1, phase=0.0, a=-np.inf, b=np.inf):
    """psi(theta, r) = (theta, r + eps sin(2 pi freq theta + phase)) on the whole band."""
    def fwd(th, r):
        return th, r + eps * _sine(th, freq, phase)

    def inv(th, r):
        return th, r - eps * _sine(th, freq, phase)
    return Correspondence(ident, whole_band(a, b), fwd, inv, meta={"type": "global_shear", "eps": eps})


def ball_shear(ident, rect: Rect, eps):
    """Vertical shear supported on one box, vanishing at the left and right edges and peaking at the center.

    The displacement is eps * sin(pi (u + 1) / 2) with u the normalized angle in (-1, 1).
    """
    def g(th):
        u = angle_diff(th, rect.theta_c) / rect.theta_hw
        return np.where(np.abs(u) < 1, np.sin(0.5 * np.pi * (u + 1)), 0.0)

    def fwd(th, r):
        return th, r + eps * g(th)

    def inv(th, r):
        return th, r - eps * g(th)
    return Correspondence(ident, Region((rect,)), fwd, inv, meta={"type": "ball_shear", "eps": eps, "rect": rect})


def identity_correspondence(ident, region: Region):
    return Correspondence(ident, region, lambda th, r: (th, r), lambda th, r: (th, r), meta={"type": "identity"})


def masked(corr: Correspondence, forbidden: Callable):
    """Restrict a correspondence so that neither the domain point nor its image meets `forbidden`."""
    def contains(theta, r):
        th2, r2 = corr.forward(np.asarray(theta, float), np.asarray(r, float))
        return corr.domain.contains(theta, r) & ~forbidden(theta, r) & ~forbidden(th2, r2)

    dom = _MaskRegion(corr.domain, contains)
    return Correspondence(corr.ident, dom, corr.forward, corr.inverse, corr.transit_time, corr.area_preserving,
                          {**corr.meta, "masked": True})


@dataclass(frozen=True)
class _MaskRegion:
    base: Region
    test: Callable

    def contains(self, theta, r):
        return self.test(theta, r)

    def sample(self, n, rng):
        th, r = self.base.sample(4 * n, rng)
        keep = self.test(th, r)
        return th[keep][:n], r[keep][:n]

    @property
    def diameter(self):
        return self.base.diameter

    @property
    def rects(self):
        return self.base.rects

    @property
    def whole(self):
        return self.base.whole


# ---------------------------------------------------------------- polysystem

@dataclass(eq=False)
class Polysystem:
    fmap: object
    correspondences: dict
    annulus: Annulus
    symmetrized: bool = False
    restriction: Annulus | None = None

    @property
    def band(self):
        return self.restriction or self.annulus

    def symbols(self):
        out = [PHI] + ([PHI_INV] if self.symmetrized else [])
        return out + [Corr(i) for i in self.correspondences]

    def with_inverse(self, flag=True):
        return Polysystem(self.fmap, self.correspondences, self.annulus, flag, self.restriction)

    def apply_symbol(self, sym: Symbol, theta, r):
        """Vectorized symbol application; returns (theta, r, valid mask)."""
        theta = np.asarray(theta, float)
        r = np.asarray(r, float)
        if sym.kind == "Phi":
            th, rr = self.fmap(theta, r)
            ok = np.ones(theta.shape, bool)
        elif sym.kind == "PhiInv":
            if not self.symmetrized:
                raise InvalidParameter("PhiInv is not available in a non-symmetrized polysystem")
            th, rr = self.fmap.inverse(theta, r)
            ok = np.ones(theta.shape, bool)
        else:
            c = self.correspondences[sym.index]
            ok = np.asarray(c.in_domain(theta, r), bool)
            th, rr = c(theta, r)
        band = self.band
        ok = ok & (rr >= band.a) & (rr <= band.b)
        return wrap(th), rr, ok


@dataclass
class WordRun:
    endpoint: Point
    trajectory: list


def apply_word(poly: Polysystem, word: OrbitWord, x: Point, trajectory=True) -> WordRun:
    """Run a word from x, failing fast at the first symbol whose domain excludes the point.

    With trajectory=False, runs of Phi are evaluated as one compiled power and only the endpoint is kept.
    """
    band = poly.band
    if not band.a <= x.r <= band.b:
        raise OutsideRestriction(0)
    traj = [x]
    th, r = x.theta, x.r
    syms = word.symbols
    n = 0
    while n < len(syms):
        sym = syms[n]
        if sym.kind == "Phi" and not trajectory:
            m = n
            while m < len(syms) and syms[m] == PHI:
                m += 1
            th, r = poly.fmap.iterate(th, r, m - n)
            n = m - 1
        elif sym.kind == "Phi":
            th, r = poly.fmap(th, r)
        elif sym.kind == "PhiInv":
            if not poly.symmetrized:
                raise OutsideDomain(n, str(sym))
            th, r = poly.fmap.inverse(th, r)
        else:
            c = poly.correspondences[sym.index]
            if not bool(c.in_domain(th, r)):
                raise OutsideDomain(n, str(sym))
            th, r = c(th, r)
            th = wrap(th)
        th, r = float(th), float(r)
        if not band.a <= r <= band.b:
            raise OutsideRestriction(n)
        if trajectory:
            traj.append(Point(th, r))
        n += 1
    end = Point(th, r)
    return WordRun(end, traj if trajectory else [x, end])


# ---------------------------------------------------------------- grid reachability

@dataclass(eq=False)
class ReachSet:
    shape: tuple
    r_range: tuple
    points: np.ndarray      # (n_theta, n_r, slots, 2)
    count: np.ndarray       # (n_theta, n_r)
    parent: np.ndarray      # (n_theta, n_r, slots, 3) parent cell and slot, -1 for seeds
    moves: np.ndarray       # (n_theta, n_r, slots) index into `alphabet`
    alphabet: list
    reps: np.ndarray = None  # (n_theta, n_r, slots) repeat count of the move
    exhausted: bool = False
    expansions: int = 0
    hit: tuple | None = None   # (i, j, slot) of the first stored point inside the target
    pre: np.ndarray = None   # (n_theta, n_r, slots) Phi steps taken before the move (flow-to moves)

    @property
    def occupied(self):
        return self.count > 0

    def cell_of(self, theta, r):
        nt, nr = self.shape
        i = np.floor(wrap(np.asarray(theta, float)) * nt).astype(int) % nt
        j = np.floor((np.asarray(r, float) - self.r_range[0]) / (self.r_range[1] - self.r_range[0]) * nr).astype(int)
        return i, np.clip(j, 0, nr - 1)

    def word_for(self, i, j, slot=0):
        """Seed point and word reaching the stored point of cell (i, j)."""
        if slot >= self.count[i, j]:
            raise InvalidParameter("cell slot not occupied")
        syms = []
        ci, cj, cs = i, j, slot
        while self.parent[ci, cj, cs, 0] >= 0:
            move = self.alphabet[self.moves[ci, cj, cs]]
            syms.extend(reversed(move * int(self.reps[ci, cj, cs])))
            if self.pre is not None:
                syms.extend([PHI] * int(self.pre[ci, cj, cs]))
            ci, cj, cs = self.parent[ci, cj, cs]
        seed = Point(*self.points[ci, cj, cs])
        return seed, OrbitWord(tuple(reversed(syms)))

    def max_r(self):
        occ = np.nonzero(self.occupied.any(axis=0))[0]
        return None if occ.size == 0 else int(occ.max())

    def rle(self):
        flat = self.occupied.ravel().astype(np.int8)
        runs = []
        if flat.size:
            start = 0
            for k in range(1, flat.size + 1):
                if k == flat.size or flat[k] != flat[start]:
                    runs.append((int(flat[start]), k - start))
                    start = k
        return runs

    def export(self):
        prov = []
        for i, j in zip(*np.nonzero(self.occupied)):
            for s in range(self.count[i, j]):
                pi, pj, ps = (int(v) for v in self.parent[i, j, s])
                prov.append({"cell": [int(i), int(j)], "slot": s, "point": self.points[i, j, s].tolist(),
                             "parent": None if pi < 0 else [pi, pj, ps],
                             "symbol": None if pi < 0 else " ".join(map(str, self.alphabet[self.moves[i, j, s]])),
                             "repeat": int(self.reps[i, j, s]),
                             "pre": 0 if self.pre is None else int(self.pre[i, j, s])})
        return {"shape": list(self.shape), "r_range": list(self.r_range), "occupancy_rle": self.rle(),
                "provenance": prov, "exhausted": self.exhausted}


def reachable_set(poly: Polysystem, seed, budget=10**7, shape=(64, 64), slots=4, alphabet=None,
                  seed_points=None, max_repeat=256, target=None, avoid=None, flow_to=0) -> ReachSet:
    """Breadth-first flood over grid cells; each cell keeps up to `slots` true orbit points.

    `seed` is a Region/Rect (sampled on the cell grid) or None with explicit `seed_points`.
    `alphabet` lists moves, each a tuple of symbols applied in order (macros allowed). A move that leaves
    a point in its own cell or in a full cell is repeated, up to `max_repeat` times, until the point reaches
    a cell with a free slot.
    Budget counts symbol evaluations; on exhaustion the partial set is returned with `exhausted=True`.
    `target(theta, r)` stops the flood at the first stored point inside it (recorded in `hit`);
    `avoid(theta, r)` discards moves whose intermediate or final points meet a forbidden set.
    `flow_to > 0` adds one move per correspondence C: flow under Phi to the first n in [1, flow_to] with
    Phi^n(x) in the domain of some C, then apply that C (word Phi^n C).
    """
    band = poly.band
    nt, nr = shape
    alphabet = alphabet or [(s,) for s in poly.symbols()]
    rs = ReachSet(shape, (band.a, band.b), np.zeros((nt, nr, slots, 2)), np.zeros((nt, nr), int),
                  -np.ones((nt, nr, slots, 3), int), np.zeros((nt, nr, slots), int), list(alphabet),
                  np.ones((nt, nr, slots), int), pre=np.zeros((nt, nr, slots), int))
    corr_ids = list(poly.correspondences) if flow_to else []
    flow_base = len(rs.alphabet)
    rs.alphabet.extend((PHI, Corr(c)) for c in corr_ids)
    if seed_points is None:
        if seed is None:
            return rs
        # sub-cell lattice points of the seed region
        m = 2 * int(np.ceil(np.sqrt(slots)))
        ti = (np.arange(nt * m) + 0.5) / (nt * m)
        rj = band.a + (np.arange(nr * m) + 0.5) / (nr * m) * (band.b - band.a)
        T, R = np.meshgrid(ti, rj, indexing="ij")
        keep = seed.contains(T.ravel(), R.ravel())
        seed_points = np.column_stack([T.ravel()[keep], R.ravel()[keep]])
    seed_points = np.asarray(seed_points, float).reshape(-1, 2)
    if avoid is not None and len(seed_points):
        seed_points = seed_points[~np.asarray(avoid(seed_points[:, 0], seed_points[:, 1]), bool)]
    frontier = []
    ci, cj = rs.cell_of(seed_points[:, 0], seed_points[:, 1])
    for (th, r), i, j in zip(seed_points, ci, cj):
        if rs.count[i, j] < slots:
            s = rs.count[i, j]
            rs.points[i, j, s] = (th, r)
            rs.count[i, j] += 1
            frontier.append((i, j, s))
            if target is not None and rs.hit is None and bool(np.asarray(target(th, r))):
                rs.hit = (int(i), int(j), int(s))
    if rs.hit is not None:
        return rs
    used = 0
    while frontier:
        idx = np.array(frontier)
        pts = rs.points[idx[:, 0], idx[:, 1], idx[:, 2]]
        new = []
        for a, move in enumerate(alphabet):
            if used >= budget:
                rs.exhausted = True
                break
            th, r = pts[:, 0].copy(), pts[:, 1].copy()
            ok = np.ones(len(th), bool)
            reps = np.zeros(len(th), int)
            active = np.ones(len(th), bool)
            for _rep in range(max_repeat):
                sel = np.nonzero(active)[0]
                t2, r2 = th[sel], r[sel]
                valid = np.ones(len(sel), bool)
                for sym in move:
                    t2, r2, v = poly.apply_symbol(sym, t2, r2)
                    valid &= v
                    if avoid is not None:
                        valid &= ~np.asarray(avoid(t2, r2), bool)
                    r2 = np.where(valid, r2, band.a)
                used += len(sel) * len(move)
                th[sel], r[sel] = t2, r2
                ok[sel] &= valid
                reps[sel] += 1
                li, lj = rs.cell_of(th, r)
                active = ok & (((li == idx[:, 0]) & (lj == idx[:, 1])) | (rs.count[li, lj] >= slots))
                if not active.any():
                    break
            ok &= ~active
            if avoid is not None:
                ok &= ~np.asarray(avoid(th, r), bool)
            li, lj = rs.cell_of(th, r)
            tgt = np.asarray(target(th, r), bool) if target is not None else np.zeros(len(th), bool)
            for k in np.nonzero(ok)[0]:
                i, j = li[k], lj[k]
                if rs.count[i, j] < slots and not _duplicate(rs, i, j, th[k], r[k]):
                    s = rs.count[i, j]
                    rs.points[i, j, s] = (th[k], r[k])
                    rs.parent[i, j, s] = idx[k]
                    rs.moves[i, j, s] = a
                    rs.reps[i, j, s] = reps[k]
                    rs.count[i, j] += 1
                    new.append((i, j, s))
                    if tgt[k] and rs.hit is None:
                        rs.hit = (int(i), int(j), int(s))
            if rs.hit is not None:
                break
        if corr_ids and rs.hit is None and not rs.exhausted:
            used += _flow_to_step(poly, rs, idx, pts, corr_ids, flow_base, flow_to, slots, avoid, target, new)
            rs.exhausted = used >= budget and rs.hit is None
        frontier = new
        if rs.exhausted or rs.hit is not None:
            break
    rs.expansions = used
    return rs


def _duplicate(rs, i, j, theta, r, tol=1e-12):
    stored = rs.points[i, j, :rs.count[i, j]]
    return bool(np.any((np.abs(stored[:, 0] - theta) < tol) & (np.abs(stored[:, 1] - r) < tol)))


def _theta_prefilter(corrs, theta):
    """Cheap superset of the union of correspondence domains, by their angular extent."""
    spans = set()
    for c in corrs:
        dom = getattr(c.domain, "base", c.domain)
        rects = getattr(dom, "rects", None)
        if rects is None:
            rects = (dom,) if isinstance(dom, Rect) else None
        if rects is None:
            return np.ones(np.shape(theta), bool)
        spans.update((r.theta_c, r.theta_hw) for r in rects)
    keep = np.zeros(np.shape(theta), bool)
    for tc, hw in spans:
        if hw >= 0.5:
            return np.ones(np.shape(theta), bool)
        keep |= np.abs(angle_diff(theta, tc)) <= hw + 1e-12
    return keep


def _flow_to_step(poly, rs, idx, pts, corr_ids, flow_base, horizon, slots, avoid, target, new, chunk=64):
    """Flow each frontier point to the first correspondence-domain visit whose image is storable.

    A visit is usable when the image stays in the band, avoids the forbidden set and lands in a cell with a
    free slot other than the source cell; otherwise the flow continues. Returns evaluations spent.
    """
    band = poly.band
    corrs = [poly.correspondences[c] for c in corr_ids]
    alive = np.arange(len(pts))
    th, r = pts[:, 0].copy(), pts[:, 1].copy()
    done = 0
    used = 0
    while alive.size and done < horizon:
        c = min(chunk, horizon - done)
        T, R = poly.fmap.orbits(th[alive], r[alive], c)
        used += c * alive.size
        T, R = T[1:], R[1:]
        out = (R < band.a) | (R > band.b)
        if avoid is not None:
            out |= np.asarray(avoid(T, R), bool)
        dead_at = np.where(out.any(axis=0), out.argmax(axis=0), c)
        which = np.full(T.shape, -1)
        cand = np.nonzero(_theta_prefilter(corrs, T))
        if cand[0].size:
            tc, rc = T[cand], R[cand]
            wc = np.full(tc.shape, -1)
            for q in range(len(corrs) - 1, -1, -1):
                wc = np.where(np.asarray(corrs[q].in_domain(tc, rc), bool), q, wc)
            which[cand] = wc
        which[np.arange(c)[:, None] >= dead_at[None, :]] = -1
        fired = np.zeros(alive.size, bool)
        rows, cols = np.nonzero(which >= 0)
        for n, k in sorted(zip(rows.tolist(), cols.tolist()), key=lambda nk: (nk[1], nk[0])):
            if fired[k]:
                continue
            q = which[n, k]
            t2, r2 = corrs[q](T[n, k], R[n, k])
            t2 = float(wrap(t2))
            r2 = float(r2)
            if not band.a <= r2 <= band.b:
                continue
            if avoid is not None and bool(np.asarray(avoid(t2, r2))):
                continue
            src = alive[k]
            i, j = rs.cell_of(t2, r2)
            i, j = int(i), int(j)
            if (i, j) == (idx[src, 0], idx[src, 1]) or rs.count[i, j] >= slots or _duplicate(rs, i, j, t2, r2):
                continue
            fired[k] = True
            s = rs.count[i, j]
            rs.points[i, j, s] = (t2, r2)
            rs.parent[i, j, s] = idx[src]
            rs.moves[i, j, s] = flow_base + q
            rs.reps[i, j, s] = 1
            rs.pre[i, j, s] = done + n
            rs.count[i, j] += 1
            new.append((i, j, s))
            if target is not None and rs.hit is None and bool(np.asarray(target(t2, r2))):
                rs.hit = (i, j, int(s))
                return used
        keep = ~fired & (dead_at >= c)
        th[alive[keep]], r[alive[keep]] = T[-1, keep], R[-1, keep]
        alive = alive[keep]
        done += c
    return used


def reach_or_raise(poly, seed, budget, **kw):
    rs = reachable_set(poly, seed, budget, **kw)
    if rs.exhausted:
        raise BudgetExhausted(budget, rs)
    return rs


# ---------------------------------------------------------------- symmetrization

def _word_gain(poly, word, x: Point, h=1e-7):
    """Finite-difference amplification of a word at x (max over two directions)."""
    base = apply_word(poly, word, x, False).endpoint
    gain = 1.0
    for d in ((h, 0.0), (0.0, h)):
        try:
            q = apply_word(poly, word, Point(x.theta + d[0], x.r + d[1]), False).endpoint
        except (OutsideDomain, OutsideRestriction):
            continue
        gain = max(gain, float(np.hypot(angle_diff(q.theta, base.theta), q.r - base.r)) / h)
    return gain


@dataclass
class SymmetrizeResult:
    word: OrbitWord
    seed: Point
    seed_window: Rect
    endpoint: Point
    target: Point
    error: float
    replacements: list


def recurrence_time(fmap, x: Point, tol, budget, nmin=2):
    """Least n >= nmin with |phi^n(x) - x| < tol in both coordinates, or -1."""
    band = getattr(fmap, "continuation", fmap.annulus)
    hit = fmap.first_hits(np.array([x.theta]), np.array([x.r]), budget, nmin,
                          (x.theta, tol, x.r - tol, x.r + tol), band.a, band.b)
    return int(hit[0])


def symmetrize_word(poly: Polysystem, word: OrbitWord, seed: Point, eps=1e-3, recurrence_budget=10**6,
                    window=None) -> SymmetrizeResult:
    """Replace every PhiInv by Phi^nu where phi^(nu+1) returns close to the current point.

    The recurrence tolerance is chosen from the amplification of the rest of the word so the final point
    stays within eps of the original endpoint (or of `window` when given).
    """
    g_run = apply_word(poly.with_inverse(True), word, seed)
    target = g_run.endpoint
    syms = list(word.symbols)
    replacements = []
    f_poly = poly.with_inverse(True)
    lip_inv = 2.0
    while PHI_INV in syms:
        nbar = syms.index(PHI_INV)
        head = OrbitWord(syms[:nbar])
        y = apply_word(f_poly, head, seed, False).endpoint
        tail = OrbitWord(syms[nbar + 1:])
        z = apply_word(f_poly, OrbitWord((PHI_INV,)), y, False).endpoint
        gain = _word_gain(f_poly, tail, z) * lip_inv
        remaining = 1 + syms[nbar + 1:].count(PHI_INV)
        tol = eps / (4.0 * gain * remaining)
        for _attempt in range(6):
            nu1 = recurrence_time(poly.fmap, y, tol, recurrence_budget)
            if nu1 < 0:
                raise RecurrenceNotFound(recurrence_budget)
            new = syms[:nbar] + [PHI] * (nu1 - 1) + syms[nbar + 1:]
            try:
                apply_word(f_poly, OrbitWord(new), seed, False)
            except (OutsideDomain, OutsideRestriction):
                tol *= 0.1
                continue
            break
        else:
            raise RecurrenceNotFound(recurrence_budget)
        replacements.append({"position": nbar, "nu": nu1 - 1, "tol": tol})
        syms = new
    out = OrbitWord(syms)
    end = apply_word(poly.with_inverse(False) if not out.has_inverse() else f_poly, out, seed, False).endpoint
    if window is not None:
        err = float(window.distance(end.theta, end.r))
    else:
        err = float(np.hypot(angle_diff(end.theta, target.theta), end.r - target.r))
    # seed window: the f-word moves points by at most eps inside it
    g = _word_gain(poly.with_inverse(False), out, seed) if len(out) else 1.0
    hw = max(eps / (4 * g), 1e-15)
    return SymmetrizeResult(out, seed, Rect.around(seed, hw, hw), end, target, err, replacements)


# ---------------------------------------------------------------- equivariant extension

def equivariant_extension(poly: Polysystem, i, m: int, check_samples=200, seed=0) -> Correspondence:
    c = poly.correspondences[i]
    if m == 0:
        return c
    fmap = poly.fmap
    cont = fmap.continuation
    rng = np.random.default_rng(seed)
    th, r = c.domain.sample(check_samples, rng)
    T, R = fmap.power(th, r, m)
    if np.any(~np.isfinite(R)) or np.any(R < cont.a) or np.any(R > cont.b):
        raise DomainEscapesAnnulus(f"phi^{m} of the domain of {i} leaves the continuation")

    def fwd(t, rr):
        t0, r0 = fmap.power(t, rr, -m)
        t1, r1 = c(t0, r0)
        return fmap.power(t1, r1, m)

    def inv(t, rr):
        t0, r0 = fmap.power(t, rr, -m)
        t1, r1 = c.inverse(t0, r0)
        return fmap.power(t1, r1, m)

    def tau(t, rr):
        t0, r0 = fmap.power(t, rr, -m)
        return c.tau(t0, r0)

    dom = _MaskRegion(_PushedRegion(c.domain, fmap, m),
                      lambda t, rr: c.domain.contains(*fmap.power(np.asarray(t, float), np.asarray(rr, float), -m)))
    return Correspondence(f"{i}({m})", dom, fwd, inv, tau, c.area_preserving, {**c.meta, "extended": m})


@dataclass(frozen=True)
class _PushedRegion:
    base: object
    fmap: object
    m: int

    def sample(self, n, rng):
        th, r = self.base.sample(n, rng)
        T, R = self.fmap.power(th, r, self.m)
        return wrap(T), R

    @property
    def diameter(self):
        return np.inf

    rects = ()
    whole = False


# ---------------------------------------------------------------- delta-boundedness

@dataclass
class DeltaReport:
    delta: float
    passed: bool
    max_distance: float
    witness: Point | None
    witness_circle: int | None
    witness_corr: object
    per_circle: list


def check_delta_bounded(poly: Polysystem, catalog, delta, samples=10**5, seed=0) -> DeltaReport:
    if not catalog:
        raise InvalidParameter("catalog must be nonempty")
    rng = np.random.default_rng(seed)
    worst, wit, wc, wid = 0.0, None, None, None
    per = [0.0] * len(catalog)
    band = poly.band
    for ident, c in poly.correspondences.items():
        if getattr(c.domain, "whole", False):
            th = rng.random(samples)
            r = band.a + (band.b - band.a) * rng.random(samples)
        else:
            th, r = c.domain.sample(samples, rng)
        keep = np.asarray(c.in_domain(th, r), bool)
        th, r = th[keep], r[keep]
        T, R = c(th, r)
        for k, circ in enumerate(catalog):
            hit = circ.below(th, r) & (R >= circ.ell(T))
            if not np.any(hit):
                continue
            d = circ.distance(th[hit], r[hit])
            j = int(np.argmax(d))
            per[k] = max(per[k], float(d[j]))
            if d[j] > worst:
                worst = float(d[j])
                wit, wc, wid = Point(th[hit][j], r[hit][j]), k, ident
    passed = worst < delta
    return DeltaReport(delta, passed, worst, None if passed else wit, None if passed else wc,
                       None if passed else wid, per)
