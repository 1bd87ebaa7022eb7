"""Command-line client. Runs jobs in-process, or against a running service with --server URL.

Exit codes: 0 success, 1 other error, 2 stalled, 3 chain-condition violation, 4 budget exhausted.
"""
from __future__ import annotations

import json
import sys

import click

from .service import EXIT_ERROR, JOBS, exit_code


def _read(path):
    try:
        with open(path) as fh:
            return fh.read()
    except OSError as exc:
        raise click.FileError(path, str(exc))


def _run(ctx, job, **fields):
    server = ctx.obj.get("server")
    model, fn = JOBS[job]
    req = model(config=_read(ctx.obj["config"]), strict=ctx.obj.get("strict"), **fields)
    if server:
        import httpx
        try:
            resp = httpx.post(f"{server.rstrip('/')}/{job}", json=req.model_dump(), timeout=None)
        except httpx.HTTPError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_ERROR)
        body = resp.json()
        if resp.status_code != 200:
            click.echo(f"error: {body.get('error', resp.status_code)}: {body.get('detail', body)}", err=True)
            sys.exit(int(body.get("exit_code", EXIT_ERROR)))
    else:
        try:
            body = fn(req)
        except Exception as exc:  # noqa: BLE001 - every failure becomes an exit code
            click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
            sys.exit(exit_code(exc))
    click.echo(json.dumps(body, indent=2, default=str))


@click.group()
@click.option("--config", "-c", required=True, type=click.Path(exists=True, dir_okay=False),
              help="chain config (YAML)")
@click.option("--server", default=None, help="service URL; omit to run in-process")
@click.option("--strict/--lenient", default=None, help="raise on good-chain violations")
@click.pass_context
def main(ctx, config, server, strict):
    """Drift orbits across chains of twist-map annuli."""
    ctx.obj = {"config": config, "server": server, "strict": strict}


@main.command()
@click.option("--annulus", default=1, show_default=True)
@click.option("--records", "records_path", type=click.Path(dir_okay=False))
@click.option("--samples", "samples_path", type=click.Path(dir_okay=False))
@click.pass_context
def certify(ctx, annulus, records_path, samples_path):
    """Certify the circle catalog of one annulus."""
    _run(ctx, "certify", annulus=annulus, records_path=records_path, samples_path=samples_path)


@main.command()
@click.option("--annulus", default=1, show_default=True)
@click.option("--refinement", default=20, show_default=True)
@click.pass_context
def zones(ctx, annulus, refinement):
    """Detect Birkhoff zones between catalog circles."""
    _run(ctx, "zones", annulus=annulus, refinement=refinement)


@main.command()
@click.option("--annulus", default=1, show_default=True)
@click.option("--circle", default=0, show_default=True, help="catalog index of the base circle")
@click.option("--theta", default=0.25, show_default=True)
@click.option("--theta-hw", default=0.01, show_default=True)
@click.option("--nu", default=2.0, show_default=True)
@click.option("--budget", default=5 * 10**6, show_default=True)
@click.pass_context
def procedure(ctx, annulus, circle, theta, theta_hw, nu, budget):
    """One Birkhoff-procedure run from a ball on a catalog circle."""
    _run(ctx, "procedure", annulus=annulus, circle=circle, theta=theta, theta_hw=theta_hw, nu=nu, budget=budget)


@main.command()
@click.option("--mode", type=click.Choice(["Symmetrized", "Constructive"]))
@click.option("--budget", type=int)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="directory for exports and manifest")
@click.pass_context
def drift(ctx, mode, budget, out_dir):
    """Drift from the start region to the top of the last annulus."""
    _run(ctx, "drift", mode=mode, budget=budget, out_dir=out_dir)


@main.command()
@click.option("--annulus", default=1, show_default=True)
@click.option("--word", required=True, help='symbols, e.g. "P Pi C1"')
@click.option("--theta", type=float, required=True)
@click.option("--r", "r", type=float, required=True)
@click.option("--eps", default=1e-3, show_default=True)
@click.pass_context
def symmetrize(ctx, annulus, word, theta, r, eps):
    """Replace every PhiInv of a word by forward recurrences."""
    _run(ctx, "symmetrize", annulus=annulus, word=word, theta=theta, r=r, eps=eps)


@main.command()
@click.option("--points", "points_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--word", "word_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--records", "records_path", type=click.Path(dir_okay=False))
@click.pass_context
def expand(ctx, points_path, word_path, records_path):
    """Expand an exported pseudo-orbit into an itinerary."""
    _run(ctx, "expand", points_path=points_path, word_path=word_path, records_path=records_path)


@main.command("emit-plot")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--points", "points_path", type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def emit_plot(ctx, out_path, points_path):
    """CSV of circle graphs and orbit points for external plotting."""
    _run(ctx, "emit-plot", out_path=out_path, points_path=points_path)


@click.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
def serve(host, port):
    """Run the HTTP service (needs uvicorn)."""
    import uvicorn

    from .service import create_app
    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()
