import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twistdrift import ModelConfig, check_special, horizontal_circle, instantiate_model, verify_twist
from twistdrift.errors import InvalidParameter
from twistdrift.maps import continued_fraction, rational_approximant

import oracles


def model(name, params=None, ann=(0.0, 1.0)):
    return instantiate_model(ModelConfig(name, params or {}, ann))


def test_integrable_jacobian():
    f = model("integrable")
    rng = np.random.default_rng(0)
    J = f.jac(rng.random(100), rng.random(100))
    assert np.allclose(J[:, 0, 1], 1.0)
    assert np.allclose(np.linalg.det(J), 1.0)


def test_bump_k0_is_integrable():
    f, g = model("bump_standard", {"k": 0.0, "beta": 0.1}), model("integrable")
    rng = np.random.default_rng(1)
    th, r = rng.random(1000), rng.random(1000)
    assert np.array_equal(np.asarray(f(th, r)), np.asarray(g(th, r)))


def test_bump_jacobian_determinant():
    f = model("bump_standard", {"k": 0.8, "beta": 0.05})
    rng = np.random.default_rng(2)
    J = f.jac(rng.random(10_000), rng.random(10_000))
    assert np.max(np.abs(np.linalg.det(J) - 1.0)) < 1e-12


def test_flat_band_matches_plain_standard_map():
    f = model("bump_standard", {"k": 0.8})
    rng = np.random.default_rng(3)
    th, r = rng.random(200), 0.3 + 0.4 * rng.random(200)
    t1, r1 = f.lift(th, r)
    ref = np.array([oracles._std_lift(np.array([a, b]), 0.8) for a, b in zip(th, r)])
    assert np.allclose(t1, ref[:, 0], atol=1e-14) and np.allclose(r1, ref[:, 1], atol=1e-14)


def test_inverse_roundtrip():
    f = model("bump_standard", {"k": 0.8})
    rng = np.random.default_rng(4)
    th, r = rng.random(500), rng.random(500)
    t2, r2 = f.inverse(*f(th, r))
    assert np.allclose(np.mod(t2 - th + 0.5, 1) - 0.5, 0, atol=1e-12) and np.allclose(r2, r, atol=1e-12)


def test_verify_twist_integrable():
    rep = verify_twist(model("integrable"))
    assert rep.passed and rep.area_residual < 1e-12 and rep.twist_margin == pytest.approx(1.0)
    assert rep.boundary_residual == 0.0


def test_verify_twist_rigid_fails():
    rep = verify_twist(model("rigid", {"omega": 0.3}))
    assert not rep.passed and rep.twist_margin == 0.0


def test_verify_twist_bump_flat_band():
    f = model("bump_standard", {"k": 1.2, "beta": 0.05})
    rep = verify_twist(f, band=f.twist_band)
    assert rep.passed and rep.twist_margin >= 0.9


def test_verify_twist_needs_samples():
    with pytest.raises(InvalidParameter):
        verify_twist(model("integrable"), samples=10)


def test_unknown_model():
    with pytest.raises(InvalidParameter):
        model("nope")


def test_orbit_matches_stepwise_calls():
    f = model("bump_standard", {"k": 0.8})
    th, r = f.orbit(0.1, 0.45, 300)
    t, x = 0.1, 0.45
    for n in range(300):
        t, x = f(t, x)
    assert th[-1] == t and r[-1] == x


def test_rational_flags_on_irrational_grid():
    f = model("integrable")
    values = np.mod(0.05 + np.arange(1, 11) * oracles.GOLDEN, 0.9) + 0.05
    cat = [horizontal_circle(f, v) for v in values]
    assert check_special(f, cat, iterates=10_000).rational_flags == []


def test_rational_flag_one_third():
    f = model("integrable")
    flags = check_special(f, [horizontal_circle(f, 1 / 3)], iterates=10_000).rational_flags
    assert len(flags) == 1 and flags[0]["q"] == 3


def test_boundary_density_golden_edge():
    f = model("bump_standard", {"k": 0.5}, (0.0, oracles.GOLDEN))
    rep = check_special(f, [], eps_density=1e-2, iterates=10**6)
    assert rep.boundary_density["upper"]["dense"]


@settings(max_examples=100, deadline=None)
@given(st.fractions(0, 1, max_denominator=40))
def test_rational_approximant_recovers_fraction(x):
    p, q, err = rational_approximant(float(x), 50)
    assert (p, q) == (x.numerator, x.denominator) and err < 1e-12


def test_continued_fraction_golden():
    assert continued_fraction(oracles.GOLDEN, depth=10)[:10] == [0] + [1] * 9
