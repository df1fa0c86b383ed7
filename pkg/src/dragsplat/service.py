"""HTTP + WebSocket service for interactive editing.

Single session per process: load a scene, preview renders, select masks and
control points, run/pause/commit edit rounds, stream progress. All schemas
live under /v1. Every 409/422 carries {"error": {"code": ...}}.
"""

from __future__ import annotations

import asyncio
import base64
import threading
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, Query, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse, PlainTextResponse, Response

from .cameras import Camera, load_cameras
from .config import EditParams, EditSpec, params_from_json
from .engine import DONE, PAUSED, RUNNING, EditRun, loss_history_csv, select_mask_frustum
from .errors import (DragsplatError, EmptyMaskError, SceneDataError,
                     SceneFormatError, StateError)
from .guidance import SyntheticOracle
from .render import dilate_mask, dilation_radius_for, render, render_mask, rgb_to_png_bytes
from .scene import GaussianScene, load_scene, mirror
from .protocol import ExternalGuidanceClient

MAX_UPLOAD_BYTES = 64 * 1024 * 1024
PICK_ALPHA_THRESHOLD = 0.05


def error_response(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status,
                        content={"error": {"code": code, "message": message}})


@dataclass
class GuidanceConfig:
    """How runs obtain guidance: 'identity' targets the run-start scene,
    'synthetic' targets a ground-truth scene file, 'http' calls an
    external process."""

    mode: str = "identity"
    target_path: str | None = None
    endpoint: str | None = None

    @staticmethod
    def parse(text: str) -> "GuidanceConfig":
        if text == "identity":
            return GuidanceConfig("identity")
        if text.startswith("synthetic:"):
            return GuidanceConfig("synthetic", target_path=text.split(":", 1)[1])
        if text.startswith("http:") or text.startswith("https:"):
            return GuidanceConfig("http", endpoint=text)
        raise ValueError(f"unknown guidance mode {text!r}")


@dataclass
class Session:
    scene: GaussianScene | None = None
    cameras: list[Camera] = field(default_factory=list)
    draft_points: list = field(default_factory=list)
    run: EditRun | None = None
    runner: threading.Thread | None = None
    round_index: int = 0
    committed_runs: set[int] = field(default_factory=set)
    lock: threading.Lock = field(default_factory=threading.Lock)

    def run_active(self) -> bool:
        return self.run is not None and self.run.status in (RUNNING, PAUSED)


def _oracle_factory(config: GuidanceConfig, session: Session):
    if config.mode == "http":
        client = ExternalGuidanceClient(config.endpoint)
        return lambda run: client
    if config.mode == "synthetic":
        target = load_scene(config.target_path)
        return lambda run: SyntheticOracle.from_scene(
            target, run.train_cameras, estimator=run.estimator,
            background=run.params.background)
    # identity: target the scene as it stands at run start
    return lambda run: SyntheticOracle.from_scene(
        run.mirror.scene, run.train_cameras, estimator=run.estimator,
        background=run.params.background)


def create_app(guidance: GuidanceConfig | None = None,
               base_params: EditParams | None = None) -> FastAPI:
    app = FastAPI(title="dragsplat", version="1")
    session = Session()
    guidance = guidance or GuidanceConfig()
    app.state.session = session

    def current_scene() -> GaussianScene | None:
        if session.run is not None:
            return session.run.snapshot_scene()
        return session.scene

    @app.get("/v1/health")
    def health():
        return {"status": "ok"}

    @app.post("/v1/scene")
    def load_scene_endpoint(payload: dict):
        if session.run_active():
            return error_response(409, "run_active",
                                  "cannot replace the scene during a run")
        try:
            if "scene_b64" in payload:
                raw = base64.b64decode(payload["scene_b64"])
                if len(raw) > MAX_UPLOAD_BYTES:
                    return error_response(413, "too_large", "scene upload too large")
                import io
                import tempfile
                with tempfile.NamedTemporaryFile(suffix=".ply") as fh:
                    fh.write(raw)
                    fh.flush()
                    scene = load_scene(fh.name)
            else:
                scene = load_scene(payload["scene_path"])
            if "cameras_json" in payload:
                cameras = [Camera.from_json(c) for c in payload["cameras_json"]]
            else:
                cameras = load_cameras(payload["cameras_path"])
        except (SceneFormatError, SceneDataError, DragsplatError, KeyError,
                ValueError, OSError) as exc:
            return error_response(422, "parse_error", str(exc))
        with session.lock:
            session.scene = scene
            session.cameras = cameras
            session.draft_points = []
            session.run = None
            session.round_index = 0
            session.committed_runs = set()
        return {"primitives": len(scene),
                "aabb": scene.aabb.tolist(),
                "cameras": len(cameras)}

    @app.get("/v1/render")
    def render_endpoint(camera: int = Query(...), width: int = Query(0),
                        layer: str = Query("rgb"), depth: int = Query(0),
                        iter: int = Query(0)):
        scene = current_scene()
        if scene is None:
            return error_response(409, "no_scene", "load a scene first")
        if camera < 0 or camera >= len(session.cameras):
            return error_response(404, "bad_camera",
                                  f"camera {camera} out of range")
        cam = session.cameras[camera]
        if width:
            cam = cam.scaled(width)
        if layer == "mask":
            m = render_mask(mirror(scene), cam)
            m = dilate_mask(m, dilation_radius_for(cam.width))
            png = rgb_to_png_bytes(np.repeat(m[:, :, None], 3, axis=2).astype(np.float32))
            return Response(content=png, media_type="image/png")
        out = render(scene, None, cam, want_depth=bool(depth))
        png = rgb_to_png_bytes(out.rgb)
        if depth:
            return {
                "png_b64": base64.b64encode(png).decode(),
                "depth_b64": base64.b64encode(
                    out.depth.astype("<f4").tobytes()).decode(),
                "alpha_b64": base64.b64encode(
                    out.alpha.astype("<f4").tobytes()).decode(),
                "width": cam.width, "height": cam.height,
            }
        return Response(content=png, media_type="image/png")

    @app.post("/v1/mask/frustum")
    def mask_frustum(payload: dict):
        if session.scene is None:
            return error_response(409, "no_scene", "load a scene first")
        if session.run_active():
            return error_response(409, "run_active",
                                  "cannot edit the mask during a run")
        try:
            # rects may be drawn on a scaled preview; `width` names that space
            scale_w = int(payload.get("width", 0))
            views = []
            for v in payload["views"]:
                cam = session.cameras[v["camera"]]
                if scale_w:
                    cam = cam.scaled(scale_w)
                views.append((cam, v["rect"]))
        except (KeyError, IndexError) as exc:
            return error_response(422, "bad_view", str(exc))
        try:
            flags = select_mask_frustum(session.scene, views)
        except EmptyMaskError as exc:
            return error_response(409, "empty_mask", str(exc))
        except ValueError as exc:
            return error_response(422, "bad_rect", str(exc))
        with session.lock:
            session.scene.mask[:] = flags.astype(np.uint8)
        return {"masked_count": int(flags.sum()),
                "preview": "/v1/render?camera=0&layer=mask"}

    def _lift_pick(pick: dict):
        cam = session.cameras[pick["camera"]]
        if pick.get("width"):
            cam = cam.scaled(int(pick["width"]))
        out = render(session.scene, None, cam, want_depth=True)
        u, v = float(pick["u"]), float(pick["v"])
        xi = min(max(int(u), 0), cam.width - 1)
        yi = min(max(int(v), 0), cam.height - 1)
        if out.alpha[yi, xi] < PICK_ALPHA_THRESHOLD:
            return None
        z = float(out.depth[yi, xi])
        x_cam = np.array([(u - cam.cx) / cam.fx * z,
                          (v - cam.cy) / cam.fy * z, z])
        world = cam.rotation.T @ (x_cam - cam.translation)
        return [float(w) for w in world]

    @app.post("/v1/points")
    def set_points(payload: dict):
        if session.scene is None:
            return error_response(409, "no_scene", "load a scene first")
        if session.run_active():
            return error_response(409, "run_active",
                                  "cannot edit points during a run")
        resolved = []
        for pair in payload["pairs"]:
            if "handle" in pair and "target" in pair:
                resolved.append({"handle": [float(x) for x in pair["handle"]],
                                 "target": [float(x) for x in pair["target"]]})
                continue
            lifted_h = _lift_pick(pair["handle_px"])
            lifted_t = _lift_pick(pair["target_px"])
            if lifted_h is None or lifted_t is None:
                return error_response(409, "no_surface",
                                      "pick hit background (alpha ~ 0)")
            resolved.append({"handle": lifted_h, "target": lifted_t})
        with session.lock:
            session.draft_points = resolved
        return {"pairs": resolved}

    @app.get("/v1/points")
    def get_points(camera: int = Query(-1)):
        pairs = [dict(p) for p in session.draft_points]
        if camera >= 0:
            if camera >= len(session.cameras):
                return error_response(404, "bad_camera", "camera out of range")
            from .cameras import project_point
            from .errors import BehindCameraError
            cam = session.cameras[camera]
            for p in pairs:
                try:
                    hu, hv, _ = project_point(cam, p["handle"])
                    tu, tv, _ = project_point(cam, p["target"])
                    p["handle_px"] = [hu, hv]
                    p["target_px"] = [tu, tv]
                except BehindCameraError:
                    p["handle_px"] = p["target_px"] = None
        return {"pairs": pairs}

    def _spawn_runner():
        run = session.run

        def loop():
            try:
                run.run()
            except Exception as exc:  # surfaced via status polling
                run.status = "failed"
                run.diagnostic = {"reason": repr(exc)}

        session.runner = threading.Thread(target=loop, daemon=True)
        session.runner.start()

    @app.post("/v1/edit/start")
    def edit_start(payload: dict | None = None):
        payload = payload or {}
        if session.scene is None:
            return error_response(409, "no_scene", "load a scene first")
        if session.run_active():
            return error_response(409, "run_active", "a run is already active")
        if not session.scene.mask.any():
            return error_response(409, "draft_incomplete", "select a mask first")
        if not session.draft_points:
            return error_response(409, "draft_incomplete",
                                  "place at least one control pair")
        params = params_from_json(payload, base_params or EditParams())
        spec = EditSpec(mask_type="flags", mask_flags=session.scene.mask.copy(),
                        points=list(session.draft_points), params=params)
        try:
            run = EditRun(session.scene, spec, session.cameras,
                          _oracle_factory(guidance, session),
                          round_index=session.round_index)
        except DragsplatError as exc:
            return error_response(409, "bad_spec", str(exc))
        with session.lock:
            session.run = run
        _spawn_runner()
        return {"status": run.status, "round": session.round_index,
                "iterations": params.iterations}

    @app.post("/v1/edit/pause")
    def edit_pause():
        if session.run is None or session.run.status != RUNNING:
            return error_response(409, "no_active_run", "nothing to pause")
        session.run.request_pause()
        if session.runner is not None:
            session.runner.join(timeout=30)
        return {"status": session.run.status,
                "iteration": session.run.iteration}

    @app.post("/v1/edit/resume")
    def edit_resume():
        if session.run is None or session.run.status != PAUSED:
            return error_response(409, "not_paused", "nothing to resume")
        session.run.resume()
        _spawn_runner()
        return {"status": session.run.status,
                "iteration": session.run.iteration}

    @app.post("/v1/edit/commit")
    def edit_commit():
        run = session.run
        if run is None:
            return error_response(409, "no_run", "nothing to commit")
        if run.status != DONE:
            return error_response(409, "not_done",
                                  f"run status is {run.status}")
        token = session.round_index
        if token in session.committed_runs:
            return error_response(409, "already_committed",
                                  "this round was already committed")
        try:
            baked = run.commit()
        except StateError as exc:
            return error_response(409, "not_done", str(exc))
        with session.lock:
            session.committed_runs.add(token)
            session.scene = baked
            session.round_index += 1
            session.run = None
        return {"round": session.round_index, "primitives": len(baked)}

    @app.get("/v1/edit/status")
    def edit_status():
        run = session.run
        if run is None:
            return {"status": "idle", "round": session.round_index}
        return {"status": run.status, "iteration": run.iteration,
                "stage": run.stage, "round": session.round_index,
                "s": run.epoch_ratio,
                "pause_reason": run.pause_reason,
                "primitives": len(run.scene)}

    @app.get("/v1/edit/history.csv")
    def history_csv():
        if session.run is None:
            return error_response(409, "no_run", "no run history")
        return PlainTextResponse(loss_history_csv(session.run.loss_history),
                                 media_type="text/csv")

    @app.websocket("/v1/edit/progress")
    async def progress(ws: WebSocket, last_event_id: int = Query(-1)):
        await ws.accept()
        run = session.run
        if run is None:
            await ws.close(code=4404)
            return
        cursor = last_event_id + 1
        try:
            while True:
                events = run.events
                while cursor < len(events):
                    await ws.send_json(events[cursor])
                    cursor += 1
                if run.status in (DONE, "failed") and cursor >= len(run.events):
                    break
                await asyncio.sleep(0.05)
        except WebSocketDisconnect:
            return
        await ws.close()

    return app
