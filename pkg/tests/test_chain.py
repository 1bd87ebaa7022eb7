import copy
import json

import numpy as np
import pytest

from twistdrift import (PHI, Corr, PseudoOrbit, Rect, build_chain, drift, expand_itinerary, export_orbit,
                        load_config, load_orbit, replay, run_manifest)
from twistdrift.chain import ChainSymbol, isolated_form, parse_word
from twistdrift.errors import ChainConditionViolated, ConfigError, InvalidParameter, NotReplayable

GOLD = 0.6180339887498949

SINGLE = {"global": {"delta": 0.06, "start": {"band": [0.0, 0.01]}},
          "annuli": [{"model": "integrable", "annulus": [0.0, 1.0], "catalog": {"count": 5},
                      "correspondences": [{"type": "global_shear", "id": 1, "eps": 0.05}]}]}

TWO = {"global": {"delta": 0.06, "start": {"band": [0.0, 0.01]}},
       "annuli": [{"model": "integrable", "annulus": [0.0, GOLD], "catalog": {"count": 4},
                   "correspondences": [{"type": "global_shear", "id": 1, "eps": 0.05}]},
                  {"model": "integrable", "annulus": [GOLD, 1.0], "catalog": {"count": 4},
                   "correspondences": [{"type": "global_shear", "id": 1, "eps": 0.05}]}],
       "links": [{"kind": "Transition", "domain": {"band": [0.59, 0.68]}, "tau": 0.5}]}


@pytest.fixture(scope="module")
def single():
    return build_chain(SINGLE)


@pytest.fixture(scope="module")
def two():
    return build_chain(TWO)


def t0_orbit(theta, r, steps):
    th, rr = [theta], [r]
    for _ in range(steps):
        th.append(float(np.mod(th[-1] + rr[-1], 1.0)))
        rr.append(rr[-1])
    return th, rr


def test_single_annulus_chain_is_valid(single):
    assert single.report["passed"] and single.report["links"] == []
    assert len(single.systems[0].catalog) == 5


def test_transition_chain_is_valid(two):
    assert two.report["passed"]
    assert two.report["links"][0]["kind"] == "Transition"


def test_heteroclinic_missing_lower_boundary():
    cfg = copy.deepcopy(TWO)
    cfg["links"] = [{"kind": "Heteroclinic", "domain": {"band": [0.59, 0.68]}, "shift": 0.3, "tau": 0.2}]
    with pytest.raises(ChainConditionViolated) as exc:
        build_chain(cfg, strict=True)
    assert exc.value.k == 1
    with pytest.warns(UserWarning):
        chain = build_chain(cfg, strict=False)
    assert not chain.report["passed"]


def test_drift_single_annulus(single):
    orbit = drift(single)
    assert orbit.r[0] <= 0.01 and orbit.r[-1] >= 0.99
    assert orbit.admissible(single.delta) and orbit.isolated_form()
    assert replay(single, orbit) <= 1e-9


def test_drift_constructive():
    cfg = copy.deepcopy(SINGLE)
    cfg["global"].update({"mode": "Constructive", "ball": {"theta_hw": 0.03}})
    chain = build_chain(cfg)
    orbit = drift(chain)
    seg = orbit.meta["segments"][0]
    assert orbit.r[-1] >= 0.99 and orbit.admissible(chain.delta) and orbit.isolated_form()
    assert seg["route"] == "coherent sequence" and seg["gap_kinds"] == ["delta"]
    assert orbit.meta["replay_deviation"] <= 1e-9


def test_drift_empty_start(single):
    with pytest.raises(InvalidParameter):
        drift(single, start=Rect(0.5, 0.5, 0.3, 0.3))


def test_drift_start_far_from_bottom(single):
    with pytest.raises(InvalidParameter):
        drift(single, start=Rect(0.5, 0.5, 0.4, 0.45))


def test_drift_across_transition(two):
    orbit = drift(two)
    links = [s for s in orbit.word if s.is_link]
    assert len(links) == 1 and orbit.isolated_form()
    assert orbit.annulus[0] == 0 and orbit.annulus[-1] == 1 and orbit.r[-1] >= 0.99
    itin = expand_itinerary(two, orbit)
    chk = itin.check(orbit, two)
    assert chk["P1"] and chk["P2"] and chk["bound"]
    assert itin.link_flows() == 1
    assert not any(e.kind == "JUMP" and e.link for e in itin.entries)


def test_three_phi_itinerary(single):
    th, r = t0_orbit(0.1, 0.3, 3)
    orbit = PseudoOrbit(th, r, [0] * 4, [ChainSymbol(0, PHI)] * 3)
    itin = expand_itinerary(single, orbit)
    assert [e.kind for e in itin.entries] == ["FLOW"] * 3
    assert [e.duration for e in itin.entries] == [1.0, 1.0, 1.0]
    assert itin.index == [0, 1, 2, 3]


def test_zero_transit_collapses(single):
    th, r = t0_orbit(0.1, 0.3, 1)
    r2 = r[-1] + 0.05 * np.sin(2 * np.pi * th[-1])
    orbit = PseudoOrbit(th + [th[-1]], r + [r2], [0] * 3, [ChainSymbol(0, PHI), ChainSymbol(0, Corr(1))])
    itin = expand_itinerary(single, orbit)
    assert [e.kind for e in itin.entries] == ["FLOW", "JUMP"]
    assert itin.entries[1].ident == "1:C1"
    assert itin.states[itin.index[1]] is not None and itin.states[itin.index[2]] is not None


def test_positive_transit_adds_flow(tmp_path):
    cfg = copy.deepcopy(SINGLE)
    cfg["annuli"][0]["correspondences"][0]["tau"] = 0.25
    chain = build_chain(cfg)
    th, r = t0_orbit(0.1, 0.3, 1)
    r2 = r[-1] + 0.05 * np.sin(2 * np.pi * th[-1])
    orbit = PseudoOrbit(th + [th[-1]], r + [r2], [0] * 3, [ChainSymbol(0, PHI), ChainSymbol(0, Corr(1))])
    itin = expand_itinerary(chain, orbit)
    assert [(e.kind, e.duration) for e in itin.entries] == [("FLOW", 1.0), ("FLOW", 0.25), ("JUMP", None)]
    chk = itin.check(orbit, chain)
    assert chk["P1"] and chk["P2"] and chk["bound"]
    path = tmp_path / "itin.jsonl"
    export_orbit(itin, "records_jsonl", path)
    recs = [json.loads(line) for line in path.read_text().splitlines()]
    assert [("duration" in x, "id" in x) for x in recs] == [(True, False), (True, False), (False, True)]
    assert recs[2]["id"] == "1:C1"


def test_bad_orbit_not_replayable(single):
    orbit = PseudoOrbit([0.1, 0.9], [0.3, 0.3], [0, 0], [ChainSymbol(0, PHI)])
    with pytest.raises(NotReplayable):
        expand_itinerary(single, orbit)


def test_export_three_steps(tmp_path, single):
    th, r = t0_orbit(1 / 3, np.sqrt(2) - 1, 3)
    orbit = PseudoOrbit(th, r, [0] * 4, [ChainSymbol(0, PHI)] * 3)
    pts, word = tmp_path / "p.csv", tmp_path / "w.txt"
    export_orbit(orbit, "points_csv", pts)
    export_orbit(orbit, "word_text", word)
    assert len(pts.read_text().splitlines()) == 1 + 4
    assert word.read_text().split() == ["1:P"] * 3
    back = load_orbit(pts, word)
    assert np.array_equal(back.theta, orbit.theta) and np.array_equal(back.r, orbit.r)
    assert back.word == orbit.word
    rec = tmp_path / "r.jsonl"
    export_orbit(orbit, "records_jsonl", rec, single)
    lines = [json.loads(x) for x in rec.read_text().splitlines()]
    assert len(lines) == 4 and lines[-1]["symbol"] is None and lines[0]["min_circle_dist"] >= 0


def test_export_empty_word(tmp_path):
    orbit = PseudoOrbit([0.3], [0.4], [0], [])
    pts, word = tmp_path / "p.csv", tmp_path / "w.txt"
    export_orbit(orbit, "points_csv", pts)
    export_orbit(orbit, "word_text", word)
    assert len(pts.read_text().splitlines()) == 2 and word.read_text() == ""


def test_export_rejects_unknown_format(tmp_path):
    with pytest.raises(InvalidParameter):
        export_orbit(PseudoOrbit([0.3], [0.4], [0], []), "xml", tmp_path / "x")


def test_points_keep_17_digits(tmp_path):
    orbit = PseudoOrbit([0.1 + 0.2], [np.pi / 10], [0], [])
    pts = tmp_path / "p.csv"
    export_orbit(orbit, "points_csv", pts)
    row = pts.read_text().splitlines()[1].split(",")
    assert float(row[2]) == 0.1 + 0.2 and float(row[3]) == np.pi / 10


def test_chain_word_parsing():
    w = parse_word("1:P 1:C3 1:P 1:L 2:P")
    assert [str(s) for s in w] == ["1:P", "1:C3", "1:P", "1:L", "2:P"]
    assert isolated_form(w)
    assert not isolated_form(parse_word("1:P 1:C1 1:C2"))
    assert not isolated_form(parse_word("1:C1 1:P"))
    with pytest.raises(InvalidParameter):
        parse_word("P")


@pytest.mark.parametrize("cfg, msg", [
    ({"annuli": [{"model": "integrable"}]}, "delta"),
    ({"global": {"delta": 0.1, "mode": "Fast"}, "annuli": [{"model": "integrable"}]}, "mode"),
    ({"global": {"delta": 0.1}, "annuli": []}, "annulus"),
    ({"global": {"delta": 0.1}, "annuli": [{"model": "integrable"}, {"model": "integrable"}]}, "links"),
    ({"global": {"delta": 0.1}, "annuli": [{"model": "integrable"}], "extra": 1}, "unknown"),
    ({"global": {"delta": 0.1}, "annuli": [{"annulus": [0, 1]}]}, "model"),
])
def test_config_errors(cfg, msg):
    with pytest.raises(ConfigError, match=msg):
        load_config(cfg)


def test_config_bad_yaml():
    with pytest.raises(ConfigError):
        load_config("global: [unclosed")


def test_config_rigid_fails_twist():
    cfg = copy.deepcopy(SINGLE)
    cfg["annuli"][0]["model"] = "rigid"
    cfg["annuli"][0]["params"] = {"omega": 0.3}
    with pytest.raises(ConfigError, match="twist"):
        build_chain(cfg)


def test_run_manifest_hashes_config():
    m = run_manifest("global: {}", 0, {"budget": 1}, {"delta": 0.1})
    assert len(m["config_sha256"]) == 64 and m["seed"] == 0 and "numpy" in m["versions"]
