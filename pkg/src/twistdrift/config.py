"""Chain configuration files (YAML) and the chain builder.

Layout::

    global:
      delta: 0.06
      grid: [64, 64]          # flood grid (theta cells, r cells)
      budget: 10000000        # map / symbol evaluations per drift
      mode: Symmetrized       # or Constructive
      strict: false           # good-chain violations raise instead of warn
      seed: 0
      end_tol: 0.01           # the drift ends within end_tol of the top boundary
      flow_to: 0              # horizon of flow-to-domain flood moves (0 disables)
      ball: {theta_hw: 0.01, nu: 1.0}   # Constructive mode: nominal ball of each crux step
      max_steps: 400          # Constructive mode: crux steps per annulus
      crux_budget: 20000      # Constructive mode: iterates per transfer search
      start: {band: [0.0, 0.01]}        # or {rect: [theta_c, theta_hw, r_lo, r_hi]}
      avoid: {rects: [[0.5, 0.02, 0.49, 0.51]]}
    annuli:
      - model: integrable
        annulus: [0.0, 1.0]
        params: {}
        catalog: {count: 20}            # or {rotations: [...]}, optional range / tol
        correspondences:
          - {type: global_shear, id: 1, eps: 0.05}
    links:
      - {kind: Transition, domain: {band: [0.55, 0.65]}, shift: 0.0, tau: 0.5}
"""
from __future__ import annotations

import os

import numpy as np
import yaml

from .chain import MODES, AnnulusSystem, Chain, shift_link, verify_chain
from .circles import _interior_rotations, _short_rotation, sweep_catalog
from .errors import ConfigError, DriftError
from .maps import ModelConfig, instantiate_model, verify_twist
from .polysystem import Polysystem, Rect, Region, ball_shear, global_shear, whole_band
from .annulus import Annulus

GLOBAL_DEFAULTS = {"grid": [64, 64], "budget": 10**7, "mode": "Symmetrized", "strict": False, "seed": 0,
                   "end_tol": 0.01, "symmetrize_eps": 1e-3, "flow_to": 0}


def load_config(source) -> dict:
    """Parse a YAML file path, YAML text or an already-parsed dict; returns the normalized dict."""
    if isinstance(source, dict):
        cfg = source
    else:
        text = source
        if isinstance(source, (str, os.PathLike)) and os.path.exists(source):
            with open(source) as fh:
                text = fh.read()
        try:
            cfg = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config does not parse: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(cfg) - {"global", "annuli", "links"}
    if unknown:
        raise ConfigError(f"unknown sections {sorted(unknown)}")
    glob = {**GLOBAL_DEFAULTS, **(cfg.get("global") or {})}
    if "delta" not in glob or not float(glob["delta"]) > 0:
        raise ConfigError("global.delta must be a positive number")
    if glob["mode"] not in MODES:
        raise ConfigError(f"global.mode must be one of {MODES}")
    annuli = cfg.get("annuli") or []
    if not annuli:
        raise ConfigError("at least one annulus is required")
    for i, a in enumerate(annuli):
        if "model" not in a:
            raise ConfigError(f"annuli[{i}] needs a model")
    links = cfg.get("links") or []
    if len(links) != len(annuli) - 1:
        raise ConfigError(f"{len(annuli)} annuli need {len(annuli) - 1} links, got {len(links)}")
    return {"global": glob, "annuli": annuli, "links": links}


def region_from_config(entry):
    if entry is None:
        return None
    if "band" in entry:
        lo, hi = map(float, entry["band"])
        return Rect(0.5, 0.5, lo, hi)
    if "rect" in entry:
        return Rect(*map(float, entry["rect"]))
    if "rects" in entry:
        return Region(tuple(Rect(*map(float, r)) for r in entry["rects"]))
    raise ConfigError(f"region needs band, rect or rects: {entry}")


def avoid_from_config(entry):
    """Forbidden set predicate: union of rects, or listed cells of a grid."""
    if entry is None:
        return None
    if "cells" in entry:
        cs = entry["cells"]
        nt, nr = cs["shape"]
        lo, hi = map(float, cs["r_range"])
        cells = np.zeros((nt, nr), bool)
        for i, j in cs["list"]:
            cells[i, j] = True

        def avoid(theta, r):
            theta = np.asarray(theta, float)
            r = np.asarray(r, float)
            i = np.floor(np.mod(theta, 1.0) * nt).astype(int) % nt
            j = np.floor((r - lo) / (hi - lo) * nr).astype(int)
            inside = (j >= 0) & (j < nr)
            return inside & cells[i, np.clip(j, 0, nr - 1)]
        return avoid
    region = region_from_config(entry)
    return lambda theta, r: np.asarray(region.contains(theta, r), bool)


def _tau(value):
    if value is None or float(value) == 0.0:
        return None
    return lambda th, r: np.full(np.shape(np.asarray(th, float)), float(value))


def ball_column(first_id, theta, theta_hw, r_hw, eps, r_lo, r_hi, tau=None):
    """Vertically stacked ball shears at one angle, tiling [r_lo, r_hi]."""
    n = int(np.ceil((r_hi - r_lo) / (2 * r_hw) - 1e-12))
    out = {}
    for j in range(n):
        lo = r_lo + 2 * r_hw * j
        c = ball_shear(first_id + j, Rect(theta, theta_hw, lo, min(lo + 2 * r_hw, r_hi)), eps)
        c.transit_time = tau
        out[first_id + j] = c
    return out


def correspondences_from_config(entries, annulus: Annulus):
    out = {}
    for s in entries or []:
        kind = s.get("type")
        tau = _tau(s.get("tau"))
        if kind == "global_shear":
            c = global_shear(int(s["id"]), float(s["eps"]), int(s.get("freq", 1)), float(s.get("phase", 0.0)))
            c.transit_time = tau
            out[c.ident] = c
        elif kind == "ball_shear":
            c = ball_shear(int(s["id"]), Rect(*map(float, s["rect"])), float(s["eps"]))
            c.transit_time = tau
            out[c.ident] = c
        elif kind == "ball_column":
            lo, hi = map(float, s.get("r_range", (annulus.a, annulus.b)))
            thetas = s.get("thetas", [s.get("theta", 0.25)])
            first = int(s.get("first_id", 1))
            for th in thetas:
                col = ball_column(first, float(th), float(s["theta_hw"]), float(s["r_hw"]), float(s["eps"]),
                                  lo, hi, tau)
                out.update(col)
                first += len(col)
        else:
            raise ConfigError(f"unknown correspondence type {kind!r}")
    return out


def build_catalog(fmap, entry, workers=1):
    """Certified circles at explicit rotations, or `count` circles spread over the boundary rotations."""
    entry = entry or {"count": 20}
    tol = float(entry.get("tol", 1e-8))
    kw = {k: entry[k] for k in ("n_modes", "max_modes") if k in entry}
    if "rotations" in entry:
        return sweep_catalog(fmap, [float(w) for w in entry["rotations"]], tol, workers, **kw)
    count = int(entry.get("count", 20))
    if "range" in entry:
        lo, hi = map(float, entry["range"])
    else:
        ann = fmap.annulus
        lo, hi = (_short_rotation(fmap, 0.0, ann.a, 4000), _short_rotation(fmap, 0.0, ann.b, 4000))
    # rounds of fresh golden-jittered rotations until `count` circles are certified
    tried, cat = set(), []
    attempts = count
    for _ in range(4):
        rots = [w for w in _interior_rotations(lo, hi, attempts) if round(w, 12) not in tried]
        tried.update(round(w, 12) for w in rots)
        cat = _merge(fmap, cat, sweep_catalog(fmap, rots, tol, workers, **kw), tol, workers, kw)
        if len(cat) >= count:
            break
        attempts *= 2
    if len(cat) > count:
        pick = np.round(np.linspace(0, len(cat) - 1, count)).astype(int)
        cat = [cat[i] for i in pick]
    for i, c in enumerate(cat):
        c.label = c.label or f"c{i}"
    return cat


def _merge(fmap, cat, new, tol, workers, kw):
    from .circles import crossing, order_key
    merged = sorted(cat + new, key=order_key)
    if any(crossing(a, b, 10 * tol) or abs(a.rotation - b.rotation) < 1e-14 for a, b in zip(merged, merged[1:])):
        return sweep_catalog(fmap, [c.rotation for c in merged], tol, workers, **kw)
    return merged


def _system(entry, k, n_annuli, workers, catalogs):
    try:
        mc = ModelConfig.from_dict({key: entry[key] for key in ("model", "annulus", "continuation", "params")
                                    if key in entry})
        fmap = instantiate_model(mc)
    except (DriftError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"annulus {k + 1}: {exc}") from exc
    rep = verify_twist(fmap, band=fmap.twist_band)
    if not rep.passed:
        raise ConfigError(f"annulus {k + 1} fails the twist check: {rep}")
    ann, cont = fmap.annulus, fmap.continuation
    band = Annulus(cont.a if k > 0 else ann.a, cont.b if k < n_annuli - 1 else ann.b)
    corrs = correspondences_from_config(entry.get("correspondences"), ann)
    poly = Polysystem(fmap, corrs, ann, False, band)
    if catalogs is not None and catalogs[k] is not None:
        catalog = catalogs[k]
    else:
        catalog = build_catalog(fmap, entry.get("catalog"), workers)
    if not catalog:
        raise ConfigError(f"annulus {k + 1} has an empty catalog")
    return AnnulusSystem(fmap, poly, catalog, entry.get("label", f"annulus{k + 1}"), rep,
                         return_time=float(entry.get("return_time", 1.0)))


def build_chain(source, strict=None, catalogs=None, workers=1) -> Chain:
    """Instantiate every annulus system and link, then verify the good-chain condition.

    `catalogs` may supply precomputed catalogs (one list or None per annulus).
    """
    cfg = load_config(source)
    glob = cfg["global"]
    n = len(cfg["annuli"])
    systems = [_system(a, k, n, workers, catalogs) for k, a in enumerate(cfg["annuli"])]
    links = []
    for k, entry in enumerate(cfg["links"]):
        dom = region_from_config(entry.get("domain")) or whole_band(*_link_band(systems[k]))
        try:
            links.append(shift_link(entry.get("kind", "Transition"), dom, float(entry.get("shift", 0.0)),
                                    float(entry.get("tau", 0.0)), str(entry.get("id", "L"))))
        except DriftError as exc:
            raise ConfigError(f"link {k + 1}: {exc}") from exc
    opts = {k: v for k, v in glob.items() if k not in ("delta", "start", "avoid")}
    chain = Chain(systems, links, float(glob["delta"]), opts, region_from_config(glob.get("start")),
                  avoid_from_config(glob.get("avoid")))
    verify_chain(chain, glob["strict"] if strict is None else strict)
    return chain


def _link_band(system):
    cont, ann = system.fmap.continuation, system.annulus
    return ann.b - 0.5 * (cont.b - ann.b), cont.b
