import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twistdrift import (Annulus, Arc, ModelConfig, Point, Tilt, angle_diff, certify_circle, classify_tilt,
                        instantiate_model, make_nu_ball, rotation_number, wrap)
from twistdrift.errors import BallExitsAnnulus, DegenerateDerivative, InvalidParameter

import oracles

GOLDEN_ROTATION_ORACLE = 0.6180339887499005   # oracles.weighted_rotation, 1e7 iterates, frozen


def test_nu_ball_halfwidth():
    b = make_nu_ball(Point(0.5, 0.3), 2.0, 0.05, 0.1)
    assert (b.r_hi - b.r_lo) / 2 == pytest.approx(0.11)
    assert (b.r_hi - b.r_lo) > 2.0 * (b.theta_hi - b.theta_lo)


def test_nu_ball_zero_margin_rejected():
    with pytest.raises(InvalidParameter):
        make_nu_ball(Point(0.0, 0.5), 1.0, 0.1, 0.0)


def test_nu_ball_exits_annulus():
    with pytest.raises(BallExitsAnnulus):
        make_nu_ball(Point(0.2, 0.99), 2.0, 0.05, 0.1, Annulus(0.0, 1.0))


# counterclockwise angle from (0, 1): up-left leans are Positive, up-right leans are Negative
def test_tilt_right_lean_is_negative():
    assert classify_tilt(Arc.segment((0.3, 0.2), (0.4, 0.5))) == Tilt.NEGATIVE


def test_tilt_left_lean_is_positive():
    assert classify_tilt(Arc.segment((0.3, 0.2), (0.2, 0.5))) == Tilt.POSITIVE


def test_tilt_vertical_is_neither():
    assert classify_tilt(Arc.segment((0.3, 0.2), (0.3, 0.5))) == Tilt.NEITHER


def test_tilt_zero_derivative_raises():
    arc = Arc(np.array([0.0, 1.0]), np.zeros(2), np.zeros(2), np.zeros(2), np.zeros(2))
    with pytest.raises(DegenerateDerivative):
        classify_tilt(arc)


@settings(max_examples=200, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(0.05, 1.0), st.floats(0.0, 1.0))
def test_tilt_reflection_flips_sign(slope, length, theta0):
    ang = np.linspace(slope, slope + 0.3 * np.sign(slope or 1), 64)
    s = np.linspace(0, 1, 64)
    arc = Arc(s, theta0 - np.sin(ang) * length * s, 0.5 + np.cos(ang) * length * s,
              -np.sin(ang) * length, np.cos(ang) * length)
    flip = {Tilt.POSITIVE: Tilt.NEGATIVE, Tilt.NEGATIVE: Tilt.POSITIVE, Tilt.NEITHER: Tilt.NEITHER}
    assert classify_tilt(arc.reflect(theta0)) == flip[classify_tilt(arc)]


@given(st.floats(-1e6, 1e6, allow_nan=False))
def test_wrap_range(x):
    w = float(wrap(x))
    assert 0.0 <= w < 1.0


@given(st.floats(-10, 10), st.floats(-10, 10))
def test_angle_diff_range(a, b):
    d = float(angle_diff(a, b))
    assert -0.5 <= d < 0.5
    assert np.isclose(np.mod(a - b - d + 0.5, 1.0), 0.5)


def test_rotation_rigid_third():
    f = instantiate_model(ModelConfig("rigid", {"omega": 1 / 3}, (0.0, 1.0)))
    est = rotation_number(f, Point(0.0, 0.5), 10_000)
    assert est.value == pytest.approx(1 / 3, abs=1e-15)


def test_rotation_integrable():
    f = instantiate_model(ModelConfig("integrable", {}, (0.0, 1.0)))
    assert rotation_number(f, Point(0.2, 0.25), 10_000).value == pytest.approx(0.25, abs=1e-10)


def test_rotation_golden_circle_matches_oracle():
    f = instantiate_model(ModelConfig("bump_standard", {"k": 0.5}, (0.0, 1.0)))
    c = certify_circle(f, oracles.GOLDEN)
    est = rotation_number(f, Point(0.0, float(c.ell(0.0))), 10**6)
    assert est.value == pytest.approx(GOLDEN_ROTATION_ORACLE, abs=1e-8)
    assert est.converged


def test_rotation_oracle_reproduces_frozen_value():
    assert oracles.weighted_rotation(0.0, 0.604841569539571, 0.5, 10**6) == pytest.approx(
        GOLDEN_ROTATION_ORACLE, abs=1e-12)
