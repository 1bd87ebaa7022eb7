"""Chains of annuli joined by links: drifting pseudo-orbits, itineraries and exports."""
from __future__ import annotations

import csv
import hashlib
import json
import re
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .annulus import Annulus, Point, angle_diff, wrap
from .birkhoff import coherent_sequence
from .circles import horizontal_circle
from .errors import (BudgetExhausted, ChainConditionViolated, InvalidParameter, IoError, LinkMissed,
                     NotReplayable, Stalled)
from .maps import density_gap
from .polysystem import (PHI, PHI_INV, Corr, Polysystem, Rect, Symbol, equivariant_extension, masked,
                         reachable_set, symmetrize_word)

RETURN_TIME = 1.0
REPLAY_TOL = 1e-12
LINK_KINDS = ("Heteroclinic", "Transition")
MODES = ("Symmetrized", "Constructive")


# ---------------------------------------------------------------- symbols

@dataclass(frozen=True)
class ChainSymbol:
    """A polysystem symbol of annulus `annulus` (0-based), or the link out of it when `symbol` is None."""
    annulus: int
    symbol: Symbol | None = None

    @property
    def is_link(self):
        return self.symbol is None

    @property
    def is_phi(self):
        return self.symbol == PHI

    def __str__(self):
        return f"{self.annulus + 1}:{'L' if self.symbol is None else self.symbol}"

    @classmethod
    def parse(cls, token: str) -> "ChainSymbol":
        k, sep, s = token.partition(":")
        if not sep or not k.isdigit() or int(k) < 1:
            raise InvalidParameter(f"cannot parse chain symbol {token!r}")
        return cls(int(k) - 1, None if s == "L" else Symbol.parse(s))


def isolated_form(word) -> bool:
    """Every non-Phi symbol follows a Phi and is followed by a Phi or the end of the word."""
    for n, s in enumerate(word):
        if s.is_phi:
            continue
        if n == 0 or not word[n - 1].is_phi:
            return False
        if n + 1 < len(word) and not word[n + 1].is_phi:
            return False
    return True


def word_text(word):
    return " ".join(str(s) for s in word)


def parse_word(text):
    return [ChainSymbol.parse(t) for t in text.split()]


# ---------------------------------------------------------------- links and chains

@dataclass(eq=False)
class ChainLink:
    kind: str
    forward: Callable
    inverse: Callable | None
    domain: object               # region of the source continuation
    transit_time: object = 0.0   # constant or callable (theta, r)
    ident: str = "L"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LINK_KINDS:
            raise InvalidParameter(f"link kind must be one of {LINK_KINDS}, got {self.kind!r}")

    def in_domain(self, theta, r):
        return np.asarray(self.domain.contains(theta, r), bool)

    def __call__(self, theta, r):
        t, x = self.forward(np.asarray(theta, float), np.asarray(r, float))
        return wrap(t), x

    def tau(self, theta, r):
        if callable(self.transit_time):
            return float(self.transit_time(theta, r))
        return float(self.transit_time)

    def round_trip(self, samples=1000, seed=0):
        """Max error of inverse(forward(x)) - x over domain samples; inf without an inverse."""
        if self.inverse is None:
            return np.inf
        th, r = self.domain.sample(samples, np.random.default_rng(seed))
        keep = self.in_domain(th, r)
        th, r = th[keep], r[keep]
        if th.size == 0:
            return np.inf
        t2, r2 = self.forward(th, r)
        t3, r3 = self.inverse(t2, r2)
        return float(max(np.max(np.abs(angle_diff(t3, th))), np.max(np.abs(r3 - r))))


def shift_link(kind, domain, shift=0.0, tau=0.0, ident="L"):
    """(theta, r) -> (theta, r + shift); shift 0 is the identity on the shared band."""
    return ChainLink(kind, lambda t, r: (t, r + shift), lambda t, r: (t, r - shift), domain, tau, ident,
                     {"type": "shift", "shift": shift})


@dataclass(eq=False)
class AnnulusSystem:
    fmap: object
    poly: Polysystem
    catalog: list
    label: str = ""
    twist: object = None
    zones: list = field(default_factory=list)
    return_time: float = RETURN_TIME

    @property
    def annulus(self) -> Annulus:
        return self.fmap.annulus

    def correspondence(self, ident):
        """Base correspondence, or the equivariant extension named 'i(m)'."""
        if ident in self.poly.correspondences:
            return self.poly.correspondences[ident]
        m = re.fullmatch(r"(.+)\((-?\d+)\)", str(ident))
        if m:
            base = int(m.group(1)) if m.group(1).lstrip("-").isdigit() else m.group(1)
            if base in self.poly.correspondences:
                return equivariant_extension(self.poly, base, int(m.group(2)))
        raise NotReplayable(f"unknown correspondence {ident!r}")


@dataclass(eq=False)
class Chain:
    systems: list
    links: list
    delta: float
    options: dict = field(default_factory=dict)
    start: object = None
    avoid: Callable | None = None
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.systems:
            raise InvalidParameter("a chain needs at least one annulus")
        if len(self.links) != len(self.systems) - 1:
            raise InvalidParameter("a chain of k annuli needs k - 1 links")
        if not self.delta > 0:
            raise InvalidParameter("delta must be positive")

    def __len__(self):
        return len(self.systems)


def _dense(fmap, circle, eps, iterates):
    th, _ = fmap.orbit(0.0, float(circle.ell(0.0)), iterates)
    return density_gap(th) < eps


def check_link(chain: Chain, k, h0=None, shrink=0.5, floor=None, n_theta=256, n_r=9, eps_dense=None,
               iterates=4000):
    """Good-chain check for link k on a mesh of full-angle bands around the top boundary of annulus k.

    Each band's image must meet (contain points on both sides of) a certified circle with an
    eps-dense orbit lying within delta of the lower boundary of annulus k+1.
    """
    link = chain.links[k]
    src, dst = chain.systems[k], chain.systems[k + 1]
    delta = chain.delta
    top, cont, low = src.annulus.b, src.fmap.continuation, dst.annulus.a
    eps_dense = eps_dense or delta / 4
    candidates = []
    for c in [horizontal_circle(dst.fmap, low, "lower")] + list(dst.catalog):
        dist = float(np.max(np.abs(c.samples - low)))
        if dist < delta and c.residual < max(c.tol, 1e-8) and _dense(dst.fmap, c, eps_dense, iterates):
            candidates.append((c, dist))
    mesh = []
    h = h0 or delta
    floor = floor or delta / 64
    while h >= floor:
        lo, hi = max(top - h, cont.a), min(top + h, cont.b)
        T, R = np.meshgrid((np.arange(n_theta) + 0.5) / n_theta, np.linspace(lo, hi, n_r), indexing="ij")
        T, R = T.ravel(), R.ravel()
        inside = link.in_domain(T, R)
        met = None
        if inside.any():
            t2, r2 = link(T[inside], R[inside])
            for c, dist in candidates:
                d = r2 - c.ell(t2)
                if d.min() <= 0.0 <= d.max():
                    met = (c, dist)
                    break
        mesh.append({"h": h, "met": met is not None, "domain_points": int(inside.sum()),
                     "circle_rotation": None if met is None else met[0].rotation,
                     "circle_distance": None if met is None else met[1]})
        h *= shrink
    rec = {"link": k + 1, "kind": link.kind, "candidates": len(candidates), "mesh": mesh,
           "passed": bool(mesh) and all(m["met"] for m in mesh)}
    if link.kind == "Heteroclinic":
        rec["round_trip"] = link.round_trip()
        rec["passed"] = rec["passed"] and rec["round_trip"] < 1e-9
    return rec


def verify_chain(chain: Chain, strict=False):
    """Attach the good-chain report; violations raise in strict mode and warn otherwise."""
    links = [check_link(chain, k) for k in range(len(chain.links))]
    chain.report["links"] = links
    chain.report["passed"] = all(r["passed"] for r in links)
    for r in links:
        if not r["passed"]:
            if strict:
                raise ChainConditionViolated(r["link"])
            msg = f"good-chain condition fails at link {r['link']}"
            chain.report.setdefault("warnings", []).append(msg)
            warnings.warn(msg, stacklevel=2)
    return chain.report


# ---------------------------------------------------------------- pseudo-orbits

@dataclass(eq=False)
class PseudoOrbit:
    theta: np.ndarray
    r: np.ndarray
    annulus: np.ndarray
    word: list
    proximity: list = field(default_factory=list)   # per catalog circle: annulus, index, rotation, min distance
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, float)
        self.r = np.asarray(self.r, float)
        self.annulus = np.asarray(self.annulus, int)
        self.word = list(self.word)
        if not (len(self.theta) == len(self.r) == len(self.annulus) == len(self.word) + 1):
            raise InvalidParameter("a pseudo-orbit has one more point than symbols")

    @property
    def n_star(self):
        return len(self.word)

    def point(self, n) -> Point:
        return Point(self.theta[n], self.r[n])

    def isolated_form(self):
        return isolated_form(self.word)

    def max_proximity(self):
        return max((p["min_distance"] for p in self.proximity), default=0.0)

    def admissible(self, delta):
        return bool(self.proximity) and all(p["min_distance"] < delta for p in self.proximity)

    def word_text(self):
        return word_text(self.word)

    def summary(self):
        return {"n_star": self.n_star, "start": [float(self.theta[0]), float(self.r[0])],
                "end": [float(self.theta[-1]), float(self.r[-1])], "max_proximity": self.max_proximity(),
                "isolated_form": self.isolated_form(),
                "links": sum(s.is_link for s in self.word),
                "corrections": sum((not s.is_link) and s.symbol.kind == "Corr" for s in self.word),
                **{k: v for k, v in self.meta.items() if isinstance(v, (int, float, str, bool))}}


def _min_circle_distance(circle, th, r):
    if th.size == 0:
        return np.inf
    v = np.abs(r - circle.ell(th))
    # Euclidean distance is at least v / sqrt(1 + L^2), so only near-minimal vertical gaps matter
    keep = v <= v.min() * np.sqrt(1.0 + circle.nu ** 2) + 1e-15
    return float(np.min(circle.distance(th[keep], r[keep])))


def proximity_record(chain: Chain, orbit: PseudoOrbit):
    out = []
    for k, system in enumerate(chain.systems):
        m = orbit.annulus == k
        for i, c in enumerate(system.catalog):
            out.append({"annulus": k + 1, "circle": i, "rotation": c.rotation,
                        "min_distance": _min_circle_distance(c, orbit.theta[m], orbit.r[m])})
    return out


def point_distances(chain: Chain, orbit: PseudoOrbit):
    """Distance from each orbit point to the nearest catalog circle of its annulus."""
    out = np.full(len(orbit.theta), np.inf)
    for k, system in enumerate(chain.systems):
        m = np.nonzero(orbit.annulus == k)[0]
        for c in system.catalog:
            if m.size:
                out[m] = np.minimum(out[m], c.distance(orbit.theta[m], orbit.r[m]))
    return out


# ---------------------------------------------------------------- canonical replay

def _replay_symbols(system: AnnulusSystem, syms, x, corrs=None):
    """Points of a single-annulus word from x; Phi runs use the compiled per-step wrapped orbit."""
    fmap, poly = system.fmap, system.poly
    band = poly.band
    th, rr = [np.array([x[0]])], [np.array([x[1]])]
    t, r = float(x[0]), float(x[1])
    i = 0
    while i < len(syms):
        s = syms[i]
        if s == PHI:
            j = i
            while j < len(syms) and syms[j] == PHI:
                j += 1
            ot, orr = fmap.orbit(t, r, j - i)
            if np.any(orr < band.a) or np.any(orr > band.b) or not np.all(np.isfinite(orr)):
                raise NotReplayable(f"Phi run leaves the band after symbol {i}")
            th.append(ot[1:])
            rr.append(orr[1:])
            t, r = float(ot[-1]), float(orr[-1])
            i = j
            continue
        if s == PHI_INV:
            raise NotReplayable("PhiInv in a pseudo-orbit word")
        c = (corrs or {}).get(s.index) or system.correspondence(s.index)
        if not bool(c.in_domain(t, r)):
            raise NotReplayable(f"{s} undefined at ({t:.17g}, {r:.17g})")
        t2, r2 = c(np.array([t]), np.array([r]))
        t, r = float(wrap(t2)[0]), float(r2[0])
        if not band.a <= r <= band.b:
            raise NotReplayable(f"{s} leaves the band")
        th.append(np.array([t]))
        rr.append(np.array([r]))
        i += 1
    return np.concatenate(th), np.concatenate(rr)


def _segments(word):
    """Split a chain word into per-annulus runs separated by link symbols."""
    segs, cur, k = [], [], 0
    for s in word:
        if s.is_link:
            segs.append((k, cur, s))
            cur, k = [], s.annulus + 1
        else:
            if s.annulus != k:
                raise NotReplayable(f"symbol {s} outside annulus {k + 1}")
            cur.append(s.symbol)
    segs.append((k, cur, None))
    return segs


def replay(chain: Chain, orbit: PseudoOrbit, tol=REPLAY_TOL):
    """Recompute the orbit from x_0 and its word; returns the max deviation or raises NotReplayable."""
    th, rr, ann = _replay_word(chain, orbit.word, (orbit.theta[0], orbit.r[0]), int(orbit.annulus[0]))
    if len(th) != len(orbit.theta):
        raise NotReplayable("replay produced a different number of points")
    dev = float(max(np.max(np.abs(angle_diff(th, orbit.theta))), np.max(np.abs(rr - orbit.r))))
    if dev > tol or np.any(ann != orbit.annulus):
        raise NotReplayable(f"replay deviates by {dev:.3e}")
    return dev


def _replay_word(chain, word, x0, k0=0):
    th, rr, ann = [], [], []
    x = (float(x0[0]), float(x0[1]))
    for k, syms, link_sym in _segments(word):
        if k >= len(chain.systems):
            raise NotReplayable("word runs past the last annulus")
        t, r = _replay_symbols(chain.systems[k], syms, x)
        th.append(t)
        rr.append(r)
        ann.append(np.full(len(t), k))
        if link_sym is not None:
            if k >= len(chain.links):
                raise NotReplayable("link symbol after the last annulus")
            link = chain.links[k]
            if not bool(link.in_domain(t[-1], r[-1])):
                raise NotReplayable(f"link {k + 1} undefined at the end of annulus {k + 1}")
            t2, r2 = link(t[-1], r[-1])
            x = (float(t2), float(r2))
            cont = chain.systems[k + 1].fmap.continuation
            if not cont.a <= x[1] <= cont.b:
                raise NotReplayable(f"link {k + 1} lands outside the next continuation")
    # each later segment starts at the link image, so points and symbols stay one-to-one
    return np.concatenate(th), np.concatenate(rr), np.concatenate(ann)


# ---------------------------------------------------------------- drift

class _Budget:
    def __init__(self, total):
        self.total = int(total)
        self.used = 0

    @property
    def left(self):
        return max(self.total - self.used, 0)

    def spend(self, n, partial=None):
        self.used += int(n)
        if self.used > self.total:
            raise BudgetExhausted(self.total, partial)


def _region_points(region, system, grid, density=4):
    """Lattice points of a start region, at `density` points per grid cell side."""
    band = system.poly.band
    nt, nr = grid
    ti = (np.arange(nt * density) + 0.5) / (nt * density)
    rj = band.a + (np.arange(nr * density) + 0.5) / (nr * density) * (band.b - band.a)
    T, R = np.meshgrid(ti, rj, indexing="ij")
    keep = np.asarray(region.contains(T.ravel(), R.ravel()), bool)
    return np.column_stack([T.ravel()[keep], R.ravel()[keep]])


def _target(chain: Chain, k, end_tol):
    b = chain.systems[k].annulus.b
    if k == len(chain.systems) - 1:
        return lambda th, r: np.asarray(r) >= b - end_tol
    link = chain.links[k]
    fmap = chain.systems[k].fmap
    band = chain.systems[k].poly.band

    # one more Phi step still inside the link domain, so the link symbol follows a Phi
    def target(th, r):
        t2, r2 = fmap(th, r)
        return ((np.asarray(r) >= b - end_tol) & link.in_domain(t2, r2) & (r2 >= band.a) & (r2 <= band.b))
    return target


def _masked_poly(poly, avoid):
    if avoid is None:
        return poly
    return Polysystem(poly.fmap, {i: masked(c, avoid) for i, c in poly.correspondences.items()},
                      poly.annulus, poly.symmetrized, poly.restriction)


def _stall_circle(system, r_max):
    above = [c for c in system.catalog if c.samples.min() > r_max]
    return above[0].rotation if above else None


def _flood_segment(chain, k, seeds, target, avoid, budget, grid, mode, sym_eps):
    system = chain.systems[k]
    poly = _masked_poly(system.poly, avoid)
    alphabet = [(PHI,)] + [(PHI, Corr(i)) for i in poly.correspondences]
    flow_to = int(chain.options.get("flow_to", 0))
    rs = reachable_set(poly, None, budget.left, grid, alphabet=alphabet, seed_points=seeds, target=target,
                       avoid=avoid, flow_to=flow_to)
    budget.spend(rs.expansions, rs)
    info = {"route": "forward flood", "expansions": rs.expansions, "cells": int(rs.occupied.sum())}
    if rs.hit is not None:
        x0, word = rs.word_for(*rs.hit)
        return x0, list(word), info
    if mode == "Symmetrized":
        g = poly.with_inverse(True)
        rs2 = reachable_set(g, None, budget.left, grid, alphabet=alphabet + [(PHI_INV,)], seed_points=seeds,
                            target=target, avoid=avoid, flow_to=flow_to)
        budget.spend(rs2.expansions, rs2)
        if rs2.hit is not None:
            x0, gword = rs2.word_for(*rs2.hit)
            res = symmetrize_word(poly, gword, x0, eps=sym_eps)
            info.update(route="symmetrized flood", expansions=rs.expansions + rs2.expansions,
                        replacements=len(res.replacements), symmetrize_error=res.error)
            return x0, list(res.word), info
        rs = rs2
    if rs.exhausted:
        raise BudgetExhausted(budget.total, rs)
    r_max = rs.r_range[0] + (rs.max_r() + 1) * (rs.r_range[1] - rs.r_range[0]) / rs.shape[1]
    raise Stalled(k + 1, _stall_circle(system, r_max), "reachable set closed below the target")


def _climb(system, poly, gates, target, seeds, avoid, budget, horizons=(2_000, 20_000, 200_000), branch=3,
           max_nodes=4000):
    """Forward climb across ordered certified circles: Phi runs followed by one correspondence.

    From each point the earliest correspondence images lying above the next uncrossed circle are
    tried in order (depth first, `branch` alternatives per level); the final leg ends in `target`.
    """
    fmap = system.fmap
    band = poly.band
    corrs = dict(poly.correspondences)

    def level(t, r, g):
        while g < len(gates) and bool(gates[g].above(t, r)):
            g += 1
        return g

    nodes = 0

    def expand(t, r, g):
        """Candidate moves (n, ident, landing) from (t, r), earliest first."""
        for H in horizons:
            budget.spend(H)
            ot, orr = fmap.orbit(t, r, H)
            bad = (orr < band.a) | (orr > band.b) | ~np.isfinite(orr)
            if avoid is not None:
                bad |= np.asarray(avoid(ot, orr), bool)
            stop = int(np.argmax(bad)) if bad.any() else H + 1
            ot, orr = ot[:stop], orr[:stop]
            if g >= len(gates):
                hit = np.nonzero(np.asarray(target(ot, orr), bool))[0]
                if hit.size:
                    return [(int(hit[0]), None, None)]
            out = []
            for ident, c in corrs.items():
                ok = np.asarray(c.in_domain(ot[1:], orr[1:]), bool)
                idx = np.nonzero(ok)[0] + 1
                if idx.size == 0:
                    continue
                t2, r2 = c(ot[idx], orr[idx])
                t2 = wrap(t2)
                good = (r2 >= band.a) & (r2 <= band.b)
                if avoid is not None:
                    good &= ~np.asarray(avoid(t2, r2), bool)
                if g < len(gates):
                    good &= np.asarray(gates[g].above(t2, r2), bool)
                else:
                    good &= np.asarray(target(t2, r2), bool)
                for j in np.nonzero(good)[0][:branch]:
                    out.append((int(idx[j]), ident, (float(t2[j]), float(r2[j]))))
            if out:
                out.sort(key=lambda m: m[0])
                # distinct Phi counts give distinct branches
                seen, uniq = set(), []
                for m in out:
                    if m[0] not in seen:
                        seen.add(m[0])
                        uniq.append(m)
                return uniq[:branch]
            if stop <= H:
                return []
        return []

    def dfs(t, r, g, depth):
        nonlocal nodes
        nodes += 1
        if nodes > max_nodes:
            return None
        if g > len(gates):
            return []
        for n, ident, land in expand(t, r, g):
            if ident is None:
                return [(n, None)]
            g2 = level(land[0], land[1], g)
            if g2 == len(gates) and bool(np.asarray(target(*land))):
                return [(n, ident)]
            rest = dfs(land[0], land[1], g2, depth + 1)
            if rest is not None:
                return [(n, ident)] + rest
        return None

    for x in seeds:
        t, r = float(x[0]), float(x[1])
        if target is not None and len(gates) == 0 and bool(np.asarray(target(t, r))):
            return (t, r), []
        path = dfs(t, r, level(t, r, 0), 0)
        if path is not None:
            syms = []
            for n, ident in path:
                syms += [PHI] * n
                if ident is not None:
                    syms.append(Corr(ident))
            return (t, r), syms
    return None


def _constructive_segment(chain, k, seeds, target, avoid, budget, opts):
    system = chain.systems[k]
    fmap = system.fmap
    base = _masked_poly(system.poly, avoid)
    poly = Polysystem(fmap, dict(base.correspondences), base.annulus, False, base.restriction)
    lower = horizontal_circle(fmap, system.annulus.a, "lower")
    upper = horizontal_circle(fmap, system.annulus.b, "upper")
    ball = opts.get("ball", {})
    hw = float(ball.get("theta_hw", 0.01))
    nu = float(ball.get("nu", 1.0))
    s = np.asarray(seeds)
    c = s[np.argmax(s[:, 1])]
    r_hi = max(float(s[:, 1].max()), lower.samples.max() + 1e-9)
    V0 = Rect(float(c[0]), 0.5, min(float(s[:, 1].min()), lower.samples.min()) - 1e-9, r_hi)
    seq = coherent_sequence(fmap, poly, lower, V0, upper, chain.delta, zones=system.zones, avoid=avoid,
                            max_steps=int(opts.get("max_steps", 400)), budget=int(opts.get("crux_budget", 2 * 10**4)),
                            procedure_kw=opts.get("procedure"), theta_hw=hw, nu=nu)
    gates = [cc for cc in seq.circles[1:]]
    for st in seq.steps:
        if st.correspondence is not None:
            poly.correspondences.setdefault(st.correspondence.ident, st.correspondence)
    order = np.argsort(-s[:, 1])
    picks = s[order[:: max(1, len(order) // 32)]][:32]
    found = _climb(system, poly, gates, target, picks, avoid, budget)
    if found is None:
        raise Stalled(k + 1, gates[0].rotation if gates else None, "no forward climb across the coherent sequence")
    x0, syms = found
    return Point(*x0), syms, {"route": "coherent sequence", "circles": len(seq.circles), "steps": len(seq.steps),
                              "contained": sum(st.contained for st in seq.steps),
                              "gap_kinds": sorted({st.gap_kind for st in seq.steps}),
                              "sequence": seq.to_records()}


def drift(chain: Chain, start=None, mode=None, budget=None, grid=None, end_tol=None, avoid=None,
          sym_eps=None) -> PseudoOrbit:
    """Delta-admissible pseudo-orbit from `start` (in annulus 1) to the top of the last annulus."""
    opts = chain.options
    mode = mode or opts.get("mode", "Symmetrized")
    if mode not in MODES:
        raise InvalidParameter(f"mode must be one of {MODES}")
    start = start if start is not None else chain.start
    grid = tuple(grid or opts.get("grid", (64, 64)))
    end_tol = float(end_tol if end_tol is not None else opts.get("end_tol", 0.01))
    avoid = avoid if avoid is not None else chain.avoid
    sym_eps = float(sym_eps or opts.get("symmetrize_eps", 1e-3))
    budget = _Budget(budget or opts.get("budget", 10**7))
    if start is None:
        raise InvalidParameter("drift needs a start region")
    sys0 = chain.systems[0]
    seeds = _region_points(start, sys0, grid)
    if avoid is not None and len(seeds):
        seeds = seeds[~np.asarray(avoid(seeds[:, 0], seeds[:, 1]), bool)]
    if len(seeds) == 0:
        raise InvalidParameter("start region is empty")
    if not np.any(seeds[:, 1] < sys0.annulus.a + chain.delta):
        raise InvalidParameter("start region misses the delta-neighbourhood of the lower boundary")

    word, infos = [], []
    x_first = None
    for k in range(len(chain.systems)):
        target = _target(chain, k, end_tol)
        if mode == "Constructive":
            x0, syms, info = _constructive_segment(chain, k, seeds, target, avoid, budget, opts)
        else:
            x0, syms, info = _flood_segment(chain, k, seeds, target, avoid, budget, grid, mode, sym_eps)
        if x_first is None:
            x_first = x0
        infos.append(info)
        if k < len(chain.links):
            syms = list(syms) + [PHI]
        word += [ChainSymbol(k, s) for s in syms]
        if k < len(chain.links):
            th, rr = _replay_symbols(chain.systems[k], syms, (x0.theta, x0.r))
            link = chain.links[k]
            t2, r2 = link(th[-1], rr[-1])
            dst = chain.systems[k + 1]
            if abs(float(r2) - dst.annulus.a) >= chain.delta or not dst.fmap.continuation.a <= r2:
                raise LinkMissed(k + 1)
            word.append(ChainSymbol(k))
            seeds = np.array([[float(t2), float(r2)]])
    th, rr, ann = _replay_word(chain, word, (x_first.theta, x_first.r))
    orbit = PseudoOrbit(th, rr, ann, word, meta={"mode": mode, "evaluations": budget.used, "segments": infos})
    if avoid is not None and np.any(np.asarray(avoid(th, rr), bool)):
        raise Stalled(int(ann[np.argmax(avoid(th, rr))]) + 1, None, "orbit enters the avoided set")
    orbit.proximity = proximity_record(chain, orbit)
    orbit.meta["replay_deviation"] = replay(chain, orbit)
    return orbit


# ---------------------------------------------------------------- itineraries

@dataclass(frozen=True)
class ItineraryEntry:
    kind: str                  # "FLOW" or "JUMP"
    duration: float | None = None
    ident: str | None = None   # correspondence or link id
    step: int = 0              # pseudo-orbit step this entry belongs to
    link: bool = False


@dataclass(eq=False)
class Itinerary:
    entries: list
    states: list               # y_0 .. y_{j*}; (annulus, theta, r) or None while in transit
    index: list                # j_n for n = 0 .. n*

    @property
    def j_star(self):
        return len(self.entries)

    @property
    def n_star(self):
        return len(self.index) - 1

    def link_flows(self):
        return sum(e.kind == "FLOW" and e.link for e in self.entries)

    def check(self, orbit: PseudoOrbit | None = None, chain: Chain | None = None):
        """P1 (index map hits every orbit point), P2 (every entry is a flow or a known jump), j* <= 2 n*."""
        p1 = len(self.index) == (orbit.n_star + 1 if orbit is not None else len(self.index))
        if orbit is not None and p1:
            for n, j in enumerate(self.index):
                s = self.states[j]
                if s is None or s != (int(orbit.annulus[n]), float(orbit.theta[n]), float(orbit.r[n])):
                    p1 = False
                    break
        p2 = True
        for e in self.entries:
            if e.kind == "FLOW":
                p2 &= e.duration is not None and e.duration >= 0
            elif e.kind == "JUMP":
                p2 &= e.ident is not None
                if chain is not None and e.link:
                    p2 &= chain.links[int(e.ident.split(":")[0]) - 1].kind == "Heteroclinic"
            else:
                p2 = False
        return {"P1": bool(p1), "P2": bool(p2), "bound": self.j_star <= 2 * self.n_star}

    def to_records(self):
        out = []
        for j, e in enumerate(self.entries, 1):
            rec = {"j": j, "kind": e.kind, "step": e.step}
            if e.kind == "FLOW":
                rec["duration"] = e.duration
            else:
                rec["id"] = e.ident
            rec["link"] = e.link
            s = self.states[j]
            rec["state"] = None if s is None else {"annulus": s[0] + 1, "theta": s[1], "r": s[2]}
            out.append(rec)
        return out


def expand_itinerary(chain: Chain, orbit: PseudoOrbit, check=True) -> Itinerary:
    if check:
        replay(chain, orbit)
    entries = []

    def state(n):
        return (int(orbit.annulus[n]), float(orbit.theta[n]), float(orbit.r[n]))

    states, index = [state(0)], [0]
    for n, s in enumerate(orbit.word):
        t, r = orbit.theta[n], orbit.r[n]
        k = s.annulus
        if s.is_link:
            link = chain.links[k]
            tau = link.tau(t, r)
            ident = f"{k + 1}:{link.ident}"
            if link.kind == "Transition":
                entries.append(ItineraryEntry("FLOW", tau, ident, n, True))
            else:
                if tau > 0:
                    entries.append(ItineraryEntry("FLOW", tau, None, n, True))
                    states.append(None)
                entries.append(ItineraryEntry("JUMP", None, ident, n, True))
        elif s.symbol == PHI:
            entries.append(ItineraryEntry("FLOW", float(chain.systems[k].return_time), None, n))
        elif s.symbol.kind == "Corr":
            c = chain.systems[k].correspondence(s.symbol.index)
            tau = float(np.asarray(c.tau(np.array([t]), np.array([r]))).ravel()[0])
            if tau > 0:
                entries.append(ItineraryEntry("FLOW", tau, None, n))
                states.append(None)
            entries.append(ItineraryEntry("JUMP", None, f"{k + 1}:C{s.symbol.index}", n))
        else:
            raise NotReplayable("PhiInv has no forward flow segment")
        states.append(state(n + 1))
        index.append(len(states) - 1)
    itin = Itinerary(entries, states, index)
    if itin.j_star > 2 * max(itin.n_star, 0):
        raise NotReplayable(f"itinerary length {itin.j_star} exceeds 2 n* = {2 * itin.n_star}")
    return itin


# ---------------------------------------------------------------- export / import

def _g17(x):
    return format(float(x), ".17g")


def export_orbit(obj, fmt, path, chain: Chain | None = None):
    """Write a PseudoOrbit or Itinerary as points_csv, word_text or records_jsonl."""
    if fmt not in ("points_csv", "word_text", "records_jsonl"):
        raise InvalidParameter(f"unknown export format {fmt!r}")
    try:
        with open(path, "w", newline="") as fh:
            if isinstance(obj, PseudoOrbit):
                _export_pseudo(obj, fmt, fh, chain)
            elif isinstance(obj, Itinerary):
                _export_itinerary(obj, fmt, fh)
            else:
                raise InvalidParameter("export_orbit takes a PseudoOrbit or an Itinerary")
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return path


def _export_pseudo(orbit, fmt, fh, chain):
    if fmt == "points_csv":
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "annulus", "theta", "r"])
        for n in range(len(orbit.theta)):
            w.writerow([n, int(orbit.annulus[n]) + 1, _g17(orbit.theta[n]), _g17(orbit.r[n])])
    elif fmt == "word_text":
        text = orbit.word_text()
        fh.write(text + "\n" if text else "")
    else:
        dist = point_distances(chain, orbit) if chain is not None else None
        for n in range(len(orbit.theta)):
            rec = {"n": n, "annulus": int(orbit.annulus[n]) + 1, "theta": float(orbit.theta[n]),
                   "r": float(orbit.r[n]), "symbol": str(orbit.word[n]) if n < orbit.n_star else None,
                   "min_circle_dist": None if dist is None or not np.isfinite(dist[n]) else float(dist[n])}
            fh.write(json.dumps(rec) + "\n")


def _export_itinerary(itin, fmt, fh):
    if fmt == "points_csv":
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["j", "annulus", "theta", "r"])
        for j, s in enumerate(itin.states):
            if s is not None:
                w.writerow([j, s[0] + 1, _g17(s[1]), _g17(s[2])])
    elif fmt == "word_text":
        toks = [f"FLOW:{_g17(e.duration)}" if e.kind == "FLOW" else f"JUMP:{e.ident}" for e in itin.entries]
        fh.write(" ".join(toks) + ("\n" if toks else ""))
    else:
        for rec in itin.to_records():
            fh.write(json.dumps(rec) + "\n")


def load_orbit(points_path, word_path) -> PseudoOrbit:
    try:
        with open(points_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        with open(word_path) as fh:
            word = parse_word(fh.read())
    except OSError as exc:
        raise IoError(str(exc)) from exc
    th = np.array([float(r["theta"]) for r in rows])
    rr = np.array([float(r["r"]) for r in rows])
    ann = np.array([int(r["annulus"]) - 1 for r in rows])
    return PseudoOrbit(th, rr, ann, word)


def run_manifest(config_text, seed, budgets, tolerances, extra=None):
    import scipy

    from importlib.metadata import PackageNotFoundError, version
    try:
        pkg = version("artifact")
    except PackageNotFoundError:
        pkg = "unknown"
    return {"config_sha256": hashlib.sha256(config_text.encode()).hexdigest(), "seed": seed,
            "budgets": budgets, "tolerances": tolerances,
            "versions": {"artifact": pkg, "numpy": np.__version__, "scipy": scipy.__version__},
            **(extra or {})}


def orbit_ball_cells(orbit: PseudoOrbit, cells, shape, r_range, annulus=0):
    """Number of orbit points of `annulus` lying in the listed (i, j) grid cells."""
    nt, nr = shape
    m = orbit.annulus == annulus
    i = np.floor(orbit.theta[m] * nt).astype(int) % nt
    j = np.floor((orbit.r[m] - r_range[0]) / (r_range[1] - r_range[0]) * nr).astype(int)
    cells = {tuple(c) for c in cells}
    return int(sum((a, b) in cells for a, b in zip(i, j)))


__all__ = ["ChainSymbol", "ChainLink", "AnnulusSystem", "Chain", "PseudoOrbit", "Itinerary", "ItineraryEntry",
           "shift_link", "check_link", "verify_chain", "drift", "replay", "expand_itinerary", "export_orbit",
           "load_orbit", "run_manifest", "proximity_record", "point_distances", "isolated_form", "parse_word",
           "word_text", "orbit_ball_cells"]
