import numpy as np
import pytest

from twistdrift import (Arc, ModelConfig, Point, Polysystem, Rect, Region, Tilt, birkhoff_procedure,
                        certify_circle, coherent_sequence, cross_zone, crux_step, find_splitting_arc, global_shear,
                        horizontal_circle, image_tilt, instantiate_model, make_nu_ball, transfer_search)
from twistdrift.birkhoff import arc_domain, ball_on, torsion_vertical_search
from twistdrift.errors import InvalidParameter, NoSplittingArc, NotFound
from twistdrift.polysystem import Correspondence, identity_correspondence


def model(name, params=None, ann=(0.0, 1.0)):
    return instantiate_model(ModelConfig(name, params or {}, ann))


def restricted_shear(eps, theta_lo, theta_hi):
    """Vertical shear eps sin(2 pi theta) on the angular strip theta in (theta_lo, theta_hi)."""
    hw = 0.5 * (theta_hi - theta_lo)
    dom = Region((Rect(theta_lo + hw, hw, 0.0, 1.0),))
    full = global_shear(1, eps)
    return Correspondence(1, dom, full.forward, full.inverse, meta=full.meta)


T0 = model("integrable")
BALL = Rect(0.5, 0.01, 0.28, 0.34)


@pytest.fixture(scope="module")
def t0_procedure():
    return birkhoff_procedure(T0, horizontal_circle(T0, 0.3), BALL)


def test_procedure_t0_frontier_is_ball_top(t0_procedure):
    cell = 1.0 / 256
    assert np.max(np.abs(t0_procedure.circle.samples - 0.34)) <= cell
    assert np.max(np.abs(t0_procedure.staircase - 0.34)) <= cell


def test_procedure_frontier_above_circle(t0_procedure):
    c = t0_procedure.circle
    assert np.all(c.samples >= 0.3) and np.any(c.samples > 0.3)


def test_procedure_bump_frontier_is_invariant_and_higher():
    f = model("bump_standard", {"k": 0.8})
    c = certify_circle(f, 0.55 + 1e-3 * np.sqrt(2))
    res = birkhoff_procedure(f, c, ball_on(c, 0.3, 0.005, 1.0))
    assert res.circle.residual < 1e-4
    assert np.all(res.circle.samples >= c.samples - 1e-12) and np.any(res.circle.samples > c.samples)


def test_procedure_rejects_rigid():
    f = model("rigid", {"omega": 0.3})
    with pytest.raises(InvalidParameter):
        birkhoff_procedure(f, horizontal_circle(f, 0.3), BALL)


def test_transfer_immediate():
    g2 = horizontal_circle(T0, 0.34)
    tr = transfer_search(T0, horizontal_circle(T0, 0.3), BALL, g2, Rect(0.5, 0.02, 0.32, 0.36))
    assert tr.n == 0


def test_transfer_first_return_matches_direct_search():
    g2 = horizontal_circle(T0, 0.34)
    V2 = Rect(0.7, 0.005, 0.335, 0.345)
    tr = transfer_search(T0, horizontal_circle(T0, 0.3), BALL, g2, V2)
    assert V2.contains(tr.image.theta, tr.image.r) and tr.image.r < 0.34
    assert tr.image.theta == pytest.approx(np.mod(tr.witness.theta + tr.n * tr.witness.r, 1.0), abs=1e-9)
    # direct search over the witness row: no earlier iterate lands in the target angles
    u = (np.arange(16) + 0.5) / 16 * 2 - 1
    th = 0.5 + np.repeat(u, 16) * 0.01 * 0.999
    r = 0.31 + np.tile(u, 16) * 0.03 * 0.999
    for n in range(tr.n):
        tn = np.mod(th + n * r, 1.0)
        assert not np.any(V2.contains(tn, r) & (r < 0.34))


def test_transfer_above_circle_not_found():
    g2 = horizontal_circle(T0, 0.34)
    with pytest.raises(NotFound):
        transfer_search(T0, horizontal_circle(T0, 0.3), BALL, g2, Rect(0.7, 0.01, 0.36, 0.38), budget=2000)


def test_splitting_arc_right_at_zero():
    poly = Polysystem(T0, {1: restricted_shear(0.05, 0.0, 0.5)}, T0.annulus)
    sa = find_splitting_arc(horizontal_circle(T0, 0.5), poly)
    assert sa.orientation == "Right"
    assert sa.base.theta == pytest.approx(0.0, abs=1e-3) and sa.base.r == pytest.approx(0.5, abs=1e-9)
    assert sa.residual < 1e-8
    th = np.asarray(sa.arc.theta)
    assert np.allclose(sa.arc.r, 0.5 - 0.05 * np.sin(2 * np.pi * th), atol=1e-9)
    du, dv = sa.derivative
    assert dv / du == pytest.approx(-0.1 * np.pi, rel=1e-2)


def test_splitting_arc_domain_below_circle():
    poly = Polysystem(T0, {1: restricted_shear(0.05, 0.0, 0.5)}, T0.annulus)
    circle = horizontal_circle(T0, 0.5)
    dom = arc_domain(find_splitting_arc(circle, poly), circle)
    assert np.all(dom.lower <= dom.upper) and np.all(dom.upper <= 0.5 + 1e-12)


def test_identity_has_no_splitting_arc():
    poly = Polysystem(T0, {1: identity_correspondence(1, Region((Rect(0.5, 0.5, 0.0, 1.0),)))}, T0.annulus)
    with pytest.raises(NoSplittingArc):
        find_splitting_arc(horizontal_circle(T0, 0.5), poly)


def test_shear_on_upper_half_has_no_splitting_arc():
    poly = Polysystem(T0, {1: restricted_shear(0.05, 0.5, 1.0)}, T0.annulus)
    with pytest.raises(NoSplittingArc):
        find_splitting_arc(horizontal_circle(T0, 0.5), poly)


def test_crux_step_global_shear():
    poly = Polysystem(T0, {1: global_shear(1, 0.05)}, T0.annulus)
    circle = horizontal_circle(T0, 0.5)
    V = make_nu_ball(Point(0.25, 0.5), 1.0, 0.005, 0.1, T0.annulus)
    res = crux_step(T0, circle, V, poly)
    # a certified ball inside psi(phi^n(V)): pull its corners back through the shear and n inverse steps
    ins = res.inscribed
    assert ins is not None
    assert ins.center.r == pytest.approx(float(res.circle.ell(ins.center.theta)), abs=1e-9)
    th, r = ins.corners()
    r = r - 0.05 * np.sin(2 * np.pi * th)
    th = th - res.n * r
    assert np.all(Rect.from_ball(V).contains(np.mod(th, 1.0), r))
    assert res.ball.center.r == pytest.approx(float(res.circle.ell(res.ball.center.theta)), abs=1e-9)
    assert res.circle.samples.min() >= 0.5 - 1e-12
    # the witness really lands in V' after n steps and one shear
    t, r = res.witness.theta, res.witness.r
    for _ in range(res.n):
        t, r = T0(t, r)
    t, r = poly.correspondences[res.corr](t, r)
    assert Rect.from_ball(res.ball).contains(np.mod(t, 1.0), r)


def test_crux_step_identity_only():
    poly = Polysystem(T0, {1: identity_correspondence(1, Region((Rect(0.5, 0.5, 0.0, 1.0),)))}, T0.annulus)
    V = make_nu_ball(Point(0.25, 0.5), 1.0, 0.005, 0.1, T0.annulus)
    with pytest.raises(NoSplittingArc):
        crux_step(T0, horizontal_circle(T0, 0.5), V, poly)


def test_coherent_sequence_trivial():
    poly = Polysystem(T0, {1: global_shear(1, 0.05)}, T0.annulus)
    c = horizontal_circle(T0, 0.4)
    seq = coherent_sequence(T0, poly, c, BALL, c, 0.06)
    assert seq.steps == [] and seq.circles == [c]


def test_cross_zone_degenerate():
    f = model("engineered_zone", {"k": 2.0, "band": [0.45, 0.55]}, (0.3, 0.7))
    V = Rect(0.2, 0.01, 0.49, 0.51)
    res = cross_zone(f, None, V, V, n_min=0)
    assert res.n == 0 and V.contains(res.z.theta, res.z.r)


def test_torsion_rejects_equal_circles():
    c = horizontal_circle(T0, 0.3)
    arc = Arc.segment((0.5, 0.25), (0.5, 0.45))
    with pytest.raises(InvalidParameter):
        torsion_vertical_search(T0, c, c, arc, Rect(0.2, 0.01, 0.29, 0.3))


def test_torsion_finds_vertical_crossing():
    lo, hi = horizontal_circle(T0, 0.3), horizontal_circle(T0, 0.4)
    arc = Arc.segment((0.6, 0.25), (0.6, 0.45))
    z, m = torsion_vertical_search(T0, lo, hi, arc, Rect(0.2, 0.01, 0.29, 0.3))
    assert 0.29 <= z.r <= 0.3
    # closed form: the lifted vertical spans [theta + 0.29 m, theta + z.r m] after m steps
    first = next(k for k in range(1, 1000)
                 if np.floor(z.theta + z.r * k - 0.6) >= np.ceil(z.theta + 0.29 * k - 0.6))
    assert m == first


def test_torsion_rigid_not_found():
    f = model("rigid", {"omega": 0.3})
    lo, hi = horizontal_circle(f, 0.3), horizontal_circle(f, 0.4)
    arc = Arc.segment((0.6, 0.3), (0.6, 0.4))
    with pytest.raises(NotFound):
        torsion_vertical_search(f, lo, hi, arc, Rect(0.2, 0.01, 0.29, 0.3), budget=50)


def test_right_twist_keeps_negative_tilt():
    arc = Arc.segment((0.3, 0.2), (0.35, 0.5))
    assert image_tilt(T0, arc) == Tilt.NEGATIVE
    assert image_tilt(T0, Arc.segment((0.3, 0.2), (0.3, 0.5))) == Tilt.NEGATIVE
    assert image_tilt(T0, Arc.segment((0.3, 0.2), (0.2, 0.5)), n=-1) == Tilt.POSITIVE
