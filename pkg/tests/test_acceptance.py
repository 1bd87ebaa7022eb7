"""Primary acceptance criteria 1-9, each printing one PASS/FAIL line (also shown in the terminal summary)."""
import os
import time

import numpy as np
import pytest

from twistdrift import (PHI, PHI_INV, Corr, ModelConfig, OrbitWord, Point, Polysystem, Rect, Tilt, build_chain,
                        certify_circle, check_delta_bounded, classify_tilt, cross_zone, detect_zones, drift,
                        expand_itinerary, global_shear, horizontal_circle, instantiate_model, load_config,
                        reachable_set, replay, sweep_catalog, symmetrize_word)
from twistdrift.annulus import Arc
from twistdrift.birkhoff import image_arc
from twistdrift.chain import orbit_ball_cells

import oracles

CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")
CRITICAL_K_ORACLE = 0.9716534137929879   # Greene residue of the 55/89 approximant, frozen from oracles


def config(name):
    return os.path.join(CONFIGS, name)


def model(name, params=None, ann=(0.0, 1.0)):
    return instantiate_model(ModelConfig(name, params or {}, ann))


def domain_diameter(corr):
    rects = corr.domain.rects
    return max(2.0 * np.hypot(r.theta_hw, 0.5 * (r.r_hi - r.r_lo)) for r in rects)


@pytest.fixture(scope="module")
def engineered_zone():
    f = model("engineered_zone", {"k": 2.0, "band": [0.45, 0.55]}, (0.3, 0.7))
    cat = sweep_catalog(f, [0.3 + 0.4 * w for w in np.linspace(0.05, 0.95, 12)])
    zones = detect_zones(cat, f, refinement=8)
    assert len(zones) == 1
    return f, zones[0]


def test_criterion_1_f_cylinder(criterion):
    t = time.time()
    chain = build_chain(config("fcylinder.yaml"))
    orbit = drift(chain)
    dt = time.time() - t
    cat = chain.systems[0].catalog
    ok = (len(cat) == 20 and orbit.r[0] <= 0.01 and orbit.r[-1] >= 0.99 and orbit.admissible(0.06)
          and orbit.meta["evaluations"] <= 10**7 and dt <= 60)
    criterion(1, ok, f"r {orbit.r[0]:.4g} -> {orbit.r[-1]:.4g}, max proximity {orbit.max_proximity():.4g} < 0.06, "
                     f"{orbit.meta['evaluations']} evaluations, {dt:.1f} s")
    assert ok


def test_criterion_2_p_cylinder(criterion):
    t = time.time()
    chain = build_chain(config("pcylinder.yaml"))
    orbit = drift(chain)
    dt = time.time() - t
    system = chain.systems[0]
    diam = max(domain_diameter(c) for c in system.poly.correspondences.values())
    ok = (len(system.catalog) >= 20 and diam < chain.delta and orbit.admissible(chain.delta)
          and orbit.isolated_form() and orbit.r[-1] >= 0.69 and replay(chain, orbit) <= 1e-9 and dt <= 300)
    criterion(2, ok, f"catalog {len(system.catalog)}, ball diameter {diam:.4g} < {chain.delta}, max proximity "
                     f"{orbit.max_proximity():.4g}, isolated {orbit.isolated_form()}, end r {orbit.r[-1]:.4g}, "
                     f"{dt:.1f} s")
    assert ok


def test_criterion_3_zone_crossing(criterion, engineered_zone):
    f, zone = engineered_zone
    lo = float(zone.lower.ell(0.3))
    hi = float(zone.upper.ell(0.7))
    V_low = Rect(0.3, 0.01, lo - 0.01, lo + 0.01)
    V_high = Rect(0.7, 0.01, hi - 0.01, hi + 0.01)
    parts, ok = [], True
    for n_min in (0, 100, 1000):
        t = time.time()
        res = cross_zone(f, zone, V_low, V_high, n_min=n_min)
        dt = time.time() - t
        it, ir = f.iterate(res.z.theta, res.z.r, res.n)
        good = (res.n >= n_min and V_low.contains(res.z.theta, res.z.r) and V_high.contains(it, ir) and dt <= 120)
        ok &= bool(good)
        parts.append(f"n_min {n_min}: n {res.n} ({dt:.1f} s)")
    criterion(3, ok, f"zone [{zone.lower.samples.max():.4g}, {zone.upper.samples.min():.4g}]; " + ", ".join(parts))
    assert ok


def _dilate_periodic(mask):
    out = mask.copy()
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            shifted = np.roll(mask, di, axis=0)
            if dj:
                shifted = np.roll(shifted, dj, axis=1)
                if dj > 0:
                    shifted[:, 0] = False
                else:
                    shifted[:, -1] = False
            out |= shifted
    return out


def test_criterion_4_symmetrization_density(criterion):
    t = time.time()
    f = model("integrable")
    poly = Polysystem(f, {1: global_shear(1, 0.05)}, f.annulus)
    seed = Rect(0.5, 0.5, 0.0, 0.02)
    rf = reachable_set(poly, seed, 10**7, (64, 64))
    rg = reachable_set(poly.with_inverse(True), seed, 10**7, (64, 64))
    near = _dilate_periodic(rf.occupied)
    dense = bool(np.all(near[rg.occupied]))
    # random g-words over {P, Pi, C1} from interior seeds, where the rotation number is irrational a.s.
    rng = np.random.default_rng(0)
    letters = [PHI, PHI_INV, Corr(1)]
    errors, purged, with_inverse = [], 0, 0
    while len(errors) < 100:
        word = OrbitWord(tuple(letters[i] for i in rng.integers(0, 3, rng.integers(3, 12))))
        x = Point(rng.random(), 0.2 + 0.6 * rng.random())
        with_inverse += word.has_inverse()
        res = symmetrize_word(poly, word, x, eps=1e-3)
        purged += not res.word.has_inverse()
        errors.append(res.error)
    dt = time.time() - t
    ok = dense and purged == 100 and max(errors) <= 1e-3 and dt <= 120
    criterion(4, ok, f"f cells {int(rf.occupied.sum())}, g cells {int(rg.occupied.sum())}, g within 1 cell {dense}; "
                     f"{purged}/100 words purged ({with_inverse} had PhiInv), max error {max(errors):.3g}, {dt:.1f} s")
    assert ok


def test_criterion_5_golden_circle(criterion):
    t = time.time()
    good = certify_circle(model("bump_standard", {"k": 0.5}), oracles.GOLDEN)
    bad = certify_circle(model("bump_standard", {"k": 1.2}), oracles.GOLDEN)
    dt = time.time() - t
    ok = bool(good) and good.residual < 1e-8 and not bad and 0.5 < CRITICAL_K_ORACLE < 1.2 and dt <= 60
    criterion(5, ok, f"k=0.5 residual {good.residual:.3g}; k=1.2 fails (best residual {bad.best_residual:.3g}); "
                     f"oracle k_c {CRITICAL_K_ORACLE:.4f} bracketed, {dt:.1f} s")
    assert ok


def _random_tilted_arc(rng, circle, sign):
    """Smooth arc from a point of the circle into the region above it; sign -1 leans right, +1 leans left."""
    s = np.linspace(0, 1, 400)
    while True:
        th0 = rng.random()
        r0 = float(circle.ell(th0))
        c = rng.normal(0, 0.6, 3)
        ang = sign * rng.uniform(0.1, np.pi / 2 - 0.1) + c[0] * s + c[1] * np.sin(np.pi * s) + c[2] * s ** 2
        if not np.all(sign * ang > 0.05):
            continue
        length = rng.uniform(0.005, 0.05)
        dth, dr = -np.sin(ang) * length, np.cos(ang) * length
        th = th0 + np.concatenate([[0], np.cumsum(0.5 * (dth[1:] + dth[:-1]) * np.diff(s))])
        r = r0 + np.concatenate([[0], np.cumsum(0.5 * (dr[1:] + dr[:-1]) * np.diff(s))])
        if np.all(r[1:] > circle.ell(th[1:])):
            return Arc(s, th, r, dth, dr)


def test_criterion_6_tilt_suite(criterion):
    rng = np.random.default_rng(1)
    neg_fail = pos_fail = total = 0
    for _ in range(10):
        k, phase = rng.uniform(0.1, 0.6), rng.uniform(0, 2 * np.pi)
        f = model("bump_standard", {"k": k, "harmonics": [[1.0, 1, phase]]}, (-1.0, 2.0))
        circle = certify_circle(f, oracles.GOLDEN)
        assert circle
        for _ in range(100):
            total += 1
            neg = _random_tilted_arc(rng, circle, -1)
            assert classify_tilt(neg, 1e-6) == Tilt.NEGATIVE
            neg_fail += classify_tilt(image_arc(f, neg, 1), 1e-6) != Tilt.NEGATIVE
            pos = _random_tilted_arc(rng, circle, +1)
            assert classify_tilt(pos, 1e-6) == Tilt.POSITIVE
            pos_fail += classify_tilt(image_arc(f, pos, -1), 1e-6) != Tilt.POSITIVE
    ok = neg_fail == 0 and pos_fail == 0
    criterion(6, ok, f"{total - neg_fail}/{total} Negative arcs stay Negative under 10 maps, "
                     f"{total - pos_fail}/{total} Positive arcs stay Positive under inverses (tol 1e-6)")
    assert ok


def test_criterion_7_delta_bounded(criterion):
    f = model("integrable")
    cat = [horizontal_circle(f, r) for r in np.linspace(0.05, 0.95, 20)]
    poly = Polysystem(f, {1: global_shear(1, 0.05)}, f.annulus)
    hi, lo = check_delta_bounded(poly, cat, 0.06), check_delta_bounded(poly, cat, 0.04)
    ok = len(cat) == 20 and hi.passed and not lo.passed and lo.witness is not None
    if ok:
        w, circle = lo.witness, cat[lo.witness_circle]
        t2, r2 = poly.correspondences[lo.witness_corr](w.theta, w.r)
        ok = (circle.below(w.theta, w.r) and r2 >= circle.ell(t2) and circle.distance(w.theta, w.r) >= 0.04)
    criterion(7, bool(ok), f"{len(cat)} circles; max distance {hi.max_distance:.4g}: passes at 0.06, fails at 0.04 "
                           f"with witness {lo.witness}")
    assert ok


ISLAND_CELLS = [(5, 31), (5, 32), (37, 31), (37, 32)]
ISLAND_CENTER = (0.07865733, 0.5000732)   # elliptic period-2 orbit of engineered_zone k=2


def test_criterion_8_singular_avoidance(criterion, engineered_zone):
    f, zone = engineered_zone
    cfg = load_config(config("zone_avoid.yaml"))
    avoid = cfg["global"]["avoid"]["cells"]
    assert sorted(map(tuple, avoid["list"])) == sorted(ISLAND_CELLS)
    # K is invariant at grid resolution: the island orbit never leaves its cells
    th, r = f.orbit(*ISLAND_CENTER, 10**5)
    i = np.floor(th * 64).astype(int)
    j = np.floor((r - 0.3) / 0.4 * 64).astype(int)
    invariant = set(zip(i.tolist(), j.tolist())) <= set(ISLAND_CELLS)
    k_lo, k_hi = 0.3 + 31 * 0.4 / 64, 0.3 + 33 * 0.4 / 64
    rho = min(k_lo - zone.lower.samples.max(), zone.upper.samples.min() - k_hi)
    chain = build_chain(cfg)
    diam = max(domain_diameter(c) for c in chain.systems[0].poly.correspondences.values())
    orbit = drift(chain)
    inside = orbit_ball_cells(orbit, ISLAND_CELLS, (64, 64), (0.3, 0.7))
    ok = (invariant and diam < min(rho / 2, chain.delta) and inside == 0 and orbit.admissible(chain.delta))
    criterion(8, ok, f"island invariant {invariant}, rho {rho:.4g}, domain diameter {diam:.4g} < "
                     f"{min(rho / 2, chain.delta):.4g}, {len(orbit.theta)} orbit points, {inside} in K cells")
    assert ok


def test_criterion_9_chain_splice(criterion):
    chain = build_chain(config("two_annuli.yaml"))
    orbit = drift(chain)
    itin = expand_itinerary(chain, orbit)
    chk = itin.check(orbit, chain)
    links = sum(s.is_link for s in orbit.word)
    ok = (chain.report["passed"] and orbit.admissible(chain.delta) and links == 1 and chk["P1"] and chk["P2"]
          and itin.j_star <= 2 * itin.n_star and itin.link_flows() == 1 and orbit.annulus[-1] == 1)
    criterion(9, ok, f"admissible {orbit.admissible(chain.delta)}, P1 {chk['P1']}, P2 {chk['P2']}, "
                     f"j* {itin.j_star} <= 2n* {2 * itin.n_star}, link flows {itin.link_flows()}")
    assert ok
