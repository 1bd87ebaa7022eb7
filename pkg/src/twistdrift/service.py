"""HTTP service around the core library.

Job functions take pydantic requests and return JSON-ready dicts; the FastAPI routes and the
in-process CLI both call them. Errors map to exit codes (2 stalled, 3 chain condition, 4 budget).
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
from typing import Literal

import numpy as np
from pydantic import BaseModel, Field

from . import chain as chain_mod
from .annulus import Point
from .birkhoff import birkhoff_procedure, ball_on
from .circles import detect_zones, export_catalog
from .config import build_chain, load_config
from .errors import (BudgetExhausted, ChainConditionViolated, ConfigError, DriftError, IoError, LinkMissed,
                     Stalled)
from .polysystem import OrbitWord, Rect, symmetrize_word

EXIT_OK, EXIT_ERROR, EXIT_STALLED, EXIT_CHAIN, EXIT_BUDGET = 0, 1, 2, 3, 4


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (Stalled, LinkMissed)):
        return EXIT_STALLED
    if isinstance(exc, ChainConditionViolated):
        return EXIT_CHAIN
    if isinstance(exc, BudgetExhausted):
        return EXIT_BUDGET
    return EXIT_ERROR


class ConfigRequest(BaseModel):
    config: str = Field(description="chain config as YAML text")
    strict: bool | None = None


class CertifyRequest(ConfigRequest):
    annulus: int = 1
    records_path: str | None = None
    samples_path: str | None = None


class ZonesRequest(ConfigRequest):
    annulus: int = 1
    refinement: int = 20


class ProcedureRequest(ConfigRequest):
    annulus: int = 1
    circle: int = 0
    theta: float = 0.25
    theta_hw: float = 0.01
    nu: float = 2.0
    grid: tuple[int, int] = (256, 256)
    budget: int = 5 * 10**6


class DriftRequest(ConfigRequest):
    mode: Literal["Symmetrized", "Constructive"] | None = None
    budget: int | None = None
    out_dir: str | None = None
    formats: list[Literal["points_csv", "word_text", "records_jsonl"]] = ["points_csv", "word_text",
                                                                         "records_jsonl"]


class SymmetrizeRequest(ConfigRequest):
    annulus: int = 1
    word: str
    theta: float
    r: float
    eps: float = 1e-3


class ExpandRequest(ConfigRequest):
    points_path: str
    word_path: str
    records_path: str | None = None


class PlotRequest(ConfigRequest):
    out_path: str
    points_path: str | None = None
    samples_per_circle: int = 512


_CACHE: dict = {}


def _chain(req: ConfigRequest):
    """Chains are cached by config hash; catalogs dominate the build time."""
    key = (hashlib.sha256(req.config.encode()).hexdigest(), req.strict)
    if key not in _CACHE:
        _CACHE.clear()
        _CACHE[key] = build_chain(load_config(req.config), strict=req.strict)
    return _CACHE[key]


def _system(ch, k):
    if not 1 <= k <= len(ch.systems):
        raise ConfigError(f"annulus must lie in 1..{len(ch.systems)}")
    return ch.systems[k - 1]


def run_certify(req: CertifyRequest) -> dict:
    system = _system(_chain(req), req.annulus)
    if req.records_path and req.samples_path:
        try:
            export_catalog(system.catalog, req.records_path, req.samples_path)
        except OSError as exc:
            raise IoError(str(exc)) from exc
    return {"annulus": req.annulus, "circles": [c.to_record(i) for i, c in enumerate(system.catalog)]}


def run_zones(req: ZonesRequest) -> dict:
    system = _system(_chain(req), req.annulus)
    zones = detect_zones(system.catalog, system.fmap, refinement=req.refinement)
    return {"annulus": req.annulus, "zones": [z.to_record() for z in zones]}


def run_procedure(req: ProcedureRequest) -> dict:
    system = _system(_chain(req), req.annulus)
    if not 0 <= req.circle < len(system.catalog):
        raise ConfigError(f"circle index must lie in 0..{len(system.catalog) - 1}")
    circle = system.catalog[req.circle]
    ball = ball_on(circle, req.theta, req.theta_hw, req.nu)
    res = birkhoff_procedure(system.fmap, circle, Rect.from_ball(ball), tuple(req.grid), req.budget,
                             catalog=system.catalog)
    return {"input_rotation": circle.rotation, "frontier": res.circle.to_record(),
            "max_point": res.max_point, "filled_cells": int(res.filled.sum())}


def run_drift(req: DriftRequest) -> dict:
    ch = _chain(req)
    orbit = chain_mod.drift(ch, mode=req.mode, budget=req.budget)
    out = {"summary": orbit.summary(), "admissible": orbit.admissible(ch.delta), "files": {}}
    manifest = chain_mod.run_manifest(
        req.config, ch.options.get("seed", 0),
        {"drift": req.budget or ch.options.get("budget")},
        {"delta": ch.delta, "end_tol": ch.options.get("end_tol"), "symmetrize_eps": ch.options.get("symmetrize_eps"),
         "replay": chain_mod.REPLAY_TOL},
        {"mode": req.mode or ch.options.get("mode"), "grid": list(ch.options.get("grid", ()))})
    out["manifest"] = manifest
    if req.out_dir:
        os.makedirs(req.out_dir, exist_ok=True)
        names = {"points_csv": "points.csv", "word_text": "word.txt", "records_jsonl": "records.jsonl"}
        for fmt in req.formats:
            path = os.path.join(req.out_dir, names[fmt])
            chain_mod.export_orbit(orbit, fmt, path, ch)
            out["files"][fmt] = path
        path = os.path.join(req.out_dir, "manifest.json")
        with open(path, "w") as fh:
            json.dump(manifest, fh, indent=2)
        out["files"]["manifest"] = path
    return out


def run_symmetrize(req: SymmetrizeRequest) -> dict:
    system = _system(_chain(req), req.annulus)
    word = OrbitWord.parse(req.word)
    res = symmetrize_word(system.poly, word, Point(req.theta, req.r), eps=req.eps)
    return {"word": str(res.word), "error": res.error, "replacements": res.replacements,
            "endpoint": [res.endpoint.theta, res.endpoint.r], "target": [res.target.theta, res.target.r]}


def run_expand(req: ExpandRequest) -> dict:
    ch = _chain(req)
    orbit = chain_mod.load_orbit(req.points_path, req.word_path)
    it = chain_mod.expand_itinerary(ch, orbit)
    if req.records_path:
        chain_mod.export_orbit(it, "records_jsonl", req.records_path)
    return {"entries": len(it.entries), "n_star": orbit.n_star, "check": it.check(orbit, ch),
            "link_flows": it.link_flows()}


def run_emit_plot(req: PlotRequest) -> dict:
    """CSV of circle graphs and (optionally) orbit points: kind, annulus, index, theta, r."""
    ch = _chain(req)
    rows = 0
    try:
        with open(req.out_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "annulus", "index", "theta", "r"])
            th = np.arange(req.samples_per_circle) / req.samples_per_circle
            for k, system in enumerate(ch.systems, 1):
                for i, c in enumerate(system.catalog):
                    for t, r in zip(th, c.ell(th)):
                        w.writerow(["circle", k, i, f"{t:.17g}", f"{r:.17g}"])
                        rows += 1
            if req.points_path:
                with open(req.points_path, newline="") as src:
                    for rec in csv.DictReader(src):
                        w.writerow(["orbit", rec["annulus"], rec["n"], rec["theta"], rec["r"]])
                        rows += 1
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return {"path": req.out_path, "rows": rows}


JOBS = {"certify": (CertifyRequest, run_certify), "zones": (ZonesRequest, run_zones),
        "procedure": (ProcedureRequest, run_procedure), "drift": (DriftRequest, run_drift),
        "symmetrize": (SymmetrizeRequest, run_symmetrize), "expand": (ExpandRequest, run_expand),
        "emit-plot": (PlotRequest, run_emit_plot)}


def create_app():
    from fastapi import FastAPI
    from fastapi.responses import JSONResponse

    app = FastAPI(title="twistdrift")

    @app.exception_handler(DriftError)
    async def _drift_error(request, exc):
        return JSONResponse(status_code=400, content={"error": type(exc).__name__, "detail": str(exc),
                                                      "exit_code": exit_code(exc)})

    @app.get("/health")
    def health():
        return {"status": "ok"}

    def route(name, model, fn):
        def handler(req):
            return fn(req)
        # explicit annotation: the module's postponed annotations would hide the closure's model
        handler.__annotations__ = {"req": model}
        handler.__name__ = name.replace("-", "_")
        app.post(f"/{name}")(handler)

    for name, (model, fn) in JOBS.items():
        route(name, model, fn)
    return app
