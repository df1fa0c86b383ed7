"""Command-line entry points: headless edits, view rendering, verification
suites, and the interactive service.

Exit codes: 0 success, 1 pipeline failure, 2 usage/config, 3 environment.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .cameras import load_cameras
from .config import EditParams, load_spec
from .engine import DONE, EditRun, densify_reports_csv, loss_history_csv
from .errors import DragsplatError
from .guidance import SyntheticOracle
from .protocol import ExternalGuidanceClient
from .render import render, rgb_to_png_bytes
from .scene import load_scene, save_scene
from .triplane import save_checkpoint

EXIT_OK, EXIT_PIPELINE, EXIT_USAGE, EXIT_ENV = 0, 1, 2, 3


@click.group()
def main():
    """Drag-based editing for Gaussian splatting scenes."""


def _oracle_factory_from_flag(guidance: str, background: float):
    if guidance.startswith("http:") or guidance.startswith("https:"):
        client = ExternalGuidanceClient(guidance)
        return lambda run: client
    if guidance.startswith("synthetic:"):
        path = guidance.split(":", 1)[1]
        target = load_scene(path)
        return lambda run: SyntheticOracle.from_scene(
            target, run.train_cameras, estimator=run.estimator,
            background=background)
    if guidance == "identity":
        return lambda run: SyntheticOracle.from_scene(
            run.mirror.scene, run.train_cameras, estimator=run.estimator,
            background=background)
    raise click.UsageError(f"unknown guidance mode {guidance!r}")


@main.command()
@click.option("--scene", "scene_path", required=True, type=click.Path())
@click.option("--cameras", "cameras_path", required=True, type=click.Path())
@click.option("--spec", "spec_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--guidance", default="identity",
              help="identity | synthetic:<target.ply> | http:<url>")
@click.option("--seed", type=int, default=None)
@click.option("--iters", type=int, default=None)
@click.option("--lambda-rr", type=float, default=None)
@click.option("--lambda-lat", type=float, default=None)
@click.option("--lambda-img", type=float, default=None)
@click.option("--lambda-lora", type=float, default=None)
@click.option("--render-width", type=int, default=None)
@click.option("--soft-k", type=int, default=None)
@click.option("--soft-mu", type=float, default=None)
def edit(scene_path, cameras_path, spec_path, out_dir, guidance, seed, iters,
         lambda_rr, lambda_lat, lambda_img, lambda_lora, render_width,
         soft_k, soft_mu):
    """Run a full two-stage edit headlessly and write all artifacts."""
    for p in (scene_path, cameras_path, spec_path):
        if not Path(p).exists():
            click.echo(f"error: missing input {p}", err=True)
            sys.exit(EXIT_USAGE)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        scene = load_scene(scene_path)
        cameras = load_cameras(cameras_path)
        spec = load_spec(spec_path)
    except (DragsplatError, ValueError, KeyError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_USAGE)

    p = spec.params
    if seed is not None:
        p.seed = seed
    if iters is not None:
        p.iterations = iters
    if render_width is not None:
        p.render_width = render_width
    if soft_k is not None:
        p.soft_k = soft_k
    if soft_mu is not None:
        p.soft_mu = soft_mu
    for name, value in (("rr", lambda_rr), ("lat", lambda_lat),
                        ("img", lambda_img), ("lora", lambda_lora)):
        if value is not None:
            setattr(p.lambdas, name, value)

    try:
        factory = _oracle_factory_from_flag(guidance, p.background)
        run = EditRun(scene, spec, cameras, factory)
    except click.UsageError:
        raise
    except DragsplatError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_USAGE)

    before = {i: render(run.mirror.scene, None, cam, p.background).rgb
              for i, cam in enumerate(run.train_cameras)}
    run.run()

    (out / "loss.csv").write_text(loss_history_csv(run.loss_history))
    (out / "densify.csv").write_text(densify_reports_csv(run.densify_reports))
    if run.status != DONE:
        diag = out / "diagnostic.json"
        diag.write_text(json.dumps({
            "status": run.status,
            "pause_reason": run.pause_reason,
            "diagnostic": run.diagnostic,
            "iteration": run.iteration,
        }, indent=1))
        click.echo(f"run ended with status {run.status}; diagnostic at {diag}",
                   err=True)
        sys.exit(EXIT_PIPELINE)

    baked = run.commit()
    save_scene(baked, out / "result.ply")
    save_checkpoint(run.model, out / "model.ckpt")
    for i, cam in enumerate(run.train_cameras):
        (out / f"before_{i:02d}.png").write_bytes(rgb_to_png_bytes(before[i]))
        after = render(baked, None, cam, p.background).rgb
        (out / f"after_{i:02d}.png").write_bytes(rgb_to_png_bytes(after))
    click.echo(f"done: {len(baked)} primitives, artifacts in {out}")
    sys.exit(EXIT_OK)


@main.command("render")
@click.option("--scene", "scene_path", required=True, type=click.Path())
@click.option("--cameras", "cameras_path", required=True, type=click.Path())
@click.option("--camera", "camera_index", type=int, default=0)
@click.option("--width", type=int, default=0)
@click.option("--out", "out_path", required=True, type=click.Path())
def render_cmd(scene_path, cameras_path, camera_index, width, out_path):
    """Render one view of a scene to PNG."""
    try:
        scene = load_scene(scene_path)
        cameras = load_cameras(cameras_path)
        cam = cameras[camera_index]
    except (DragsplatError, IndexError, OSError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_USAGE)
    if width:
        cam = cam.scaled(width)
    out = render(scene, None, cam)
    Path(out_path).write_bytes(rgb_to_png_bytes(out.rgb))
    click.echo(f"wrote {out_path}")
    sys.exit(EXIT_OK)


@main.command()
@click.argument("suite", default="all")
def verify(suite):
    """Run verification suites: schedules, gradients, routing, oracles, all."""
    from .verify import SUITES, run_suites
    if suite == "all":
        names = list(SUITES)
    elif suite in SUITES:
        names = [suite]
    else:
        click.echo(f"unknown suite {suite!r}; choose from "
                   f"{', '.join(SUITES)} or all", err=True)
        sys.exit(EXIT_USAGE)
    checks, ok = run_suites(names)
    width = max(len(name) for name, _, _ in checks)
    for name, passed, detail in checks:
        status = "PASS" if passed else "FAIL"
        click.echo(f"{name:<{width}}  {status}  {detail}")
    sys.exit(EXIT_OK if ok else EXIT_PIPELINE)


@main.command()
@click.option("--scene", "scene_path", type=click.Path(), default=None)
@click.option("--cameras", "cameras_path", type=click.Path(), default=None)
@click.option("--port", type=int, default=8000)
@click.option("--host", default="127.0.0.1")
@click.option("--guidance", default="identity")
@click.option("--out", "out_dir", type=click.Path(), default="dragsplat_out")
def serve(scene_path, cameras_path, port, host, guidance, out_dir):
    """Serve the interactive editing API (and preload a scene if given)."""
    import uvicorn

    from .service import GuidanceConfig, create_app

    try:
        cfg = GuidanceConfig.parse(guidance)
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_USAGE)
    app = create_app(cfg)
    if scene_path:
        try:
            session = app.state.session
            session.scene = load_scene(scene_path)
            session.cameras = load_cameras(cameras_path)
        except (DragsplatError, OSError, ValueError, TypeError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_USAGE)

    @app.on_event("shutdown")
    def flush_checkpoint():
        session = app.state.session
        run = session.run
        if run is not None and run.status in ("running", "paused"):
            run.request_pause("shutdown")
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            save_scene(run.scene, out / "paused_scene.ply")
            save_checkpoint(run.model, out / "paused_model.ckpt")
            (out / "paused_state.json").write_text(json.dumps(
                {"iteration": run.iteration, "round": run.round_index}))

    try:
        uvicorn.run(app, host=host, port=port, log_level="warning")
    except (OSError, SystemExit) as exc:
        if isinstance(exc, OSError):
            click.echo(f"error: cannot bind {host}:{port}: {exc}", err=True)
            sys.exit(EXIT_ENV)
        raise
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
