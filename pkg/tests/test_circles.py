import numpy as np
import pytest

from twistdrift import (ModelConfig, certify_circle, detect_zones, horizontal_circle, instantiate_model,
                        sweep_catalog)
from twistdrift.circles import boundary_circles, inf_circles, is_ordered, order_key, sup_circles
from twistdrift.errors import EmptyFamily

import oracles

# Greene residue of the 55/89 golden approximant reaches 1/4 here (oracles.critical_k, frozen)
CRITICAL_K_ORACLE = 0.9716534137929879


def model(name, params=None, ann=(0.0, 1.0)):
    return instantiate_model(ModelConfig(name, params or {}, ann))


def test_integrable_circle_is_flat():
    c = certify_circle(model("integrable"), 0.37)
    assert np.allclose(c.samples, 0.37, atol=1e-14) and c.residual < 1e-14


def test_golden_circle_certified_at_half():
    c = certify_circle(model("bump_standard", {"k": 0.5}), oracles.GOLDEN)
    assert c and c.residual < 1e-8 and c.nu < 1


def test_golden_circle_fails_at_1_2():
    c = certify_circle(model("bump_standard", {"k": 1.2}), oracles.GOLDEN)
    assert not c and c.best_residual > 1e-2


def test_certification_brackets_critical_parameter():
    assert 0.5 < CRITICAL_K_ORACLE < 1.2
    assert CRITICAL_K_ORACLE == pytest.approx(0.9716, abs=5e-4)


def test_critical_oracle_reproduces_frozen_value():
    assert oracles.critical_k() == pytest.approx(CRITICAL_K_ORACLE, abs=1e-8)


def test_integrable_sweep_ordered():
    f = model("integrable")
    vals = np.mod(0.1 + np.arange(20) * oracles.GOLDEN, 0.8) + 0.1
    cat = sweep_catalog(f, vals)
    assert len(cat) == 20 and is_ordered(cat)
    assert np.allclose(sorted(vals), [c.samples[0] for c in cat])


def test_order_of_two_flat_circles():
    f = model("integrable")
    lo, hi = horizontal_circle(f, 0.2), horizontal_circle(f, 0.5)
    assert order_key(lo) < order_key(hi) and is_ordered([lo, hi])


def test_bump_sweep_monotone_rotation():
    f = model("bump_standard", {"k": 0.9})
    cat = sweep_catalog(f, np.linspace(0.02, 0.98, 60))
    assert 0 < len(cat) < 60
    assert is_ordered(cat)
    assert np.all(np.diff([c.rotation for c in cat]) > 0)


def test_sup_inf_of_constants():
    f = model("integrable")
    fam = [horizontal_circle(f, 0.2), horizontal_circle(f, 0.5)]
    assert np.allclose(sup_circles(fam, f).samples, 0.5)
    assert np.allclose(inf_circles(fam, f).samples, 0.2)
    assert sup_circles(fam[:1], f) is fam[0] or np.allclose(sup_circles(fam[:1], f).samples, 0.2)
    with pytest.raises(EmptyFamily):
        sup_circles([], f)


def test_integrable_has_no_zones():
    f = model("integrable")
    cat = [horizontal_circle(f, v) for v in np.linspace(0.05, 0.95, 10)]
    assert detect_zones(cat, f, refinement=5) == []


def test_engineered_zone_single_zone():
    f = model("engineered_zone", {"k": 2.0, "band": [0.45, 0.55]}, (0.3, 0.7))
    cat = sweep_catalog(f, [0.3 + 0.4 * w for w in np.linspace(0.05, 0.95, 12)])
    zones = detect_zones(cat, f, refinement=8)
    assert len(zones) == 1
    z = zones[0]
    # the kick is exponentially small near the band edges, so boundary circles sit inside the ramps
    ramp = 0.02
    assert 0.45 - 1e-9 <= np.min(z.lower.samples) and np.max(z.lower.samples) <= 0.45 + ramp
    assert 0.55 - ramp <= np.min(z.upper.samples) and np.max(z.upper.samples) <= 0.55 + 1e-9


def test_strong_kick_zone_spans_interior():
    f = model("bump_standard", {"k": 5.0})
    zones = detect_zones(boundary_circles(f), f, refinement=20)
    assert len(zones) == 1
    assert np.allclose(zones[0].lower.samples, 0.0) and np.allclose(zones[0].upper.samples, 1.0)
