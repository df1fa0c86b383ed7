import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from dragsplat.cameras import save_cameras
from dragsplat.cli import main
from dragsplat.scene import load_scene, save_scene

from conftest import ring_cameras, two_blob_scene


@pytest.fixture
def inputs(tmp_path, rng):
    scene = two_blob_scene(rng, n_per_blob=25)
    cams = ring_cameras(n=4, width=32)
    save_scene(scene, tmp_path / "scene.ply")
    save_cameras(cams, tmp_path / "cameras.json")
    spec = {
        "mask": {"type": "flags", "flags": [int(v) for v in scene.mask]},
        "points": [{"handle": [-0.25, 0, 0], "target": [-0.25, 0, 0]}],
        "iterations": 6,
        "seed": 3,
        "render_width": 32,
    }
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    return tmp_path, scene


def run_edit(tmp_path, out_name, extra=()):
    runner = CliRunner()
    return runner.invoke(main, [
        "edit", "--scene", str(tmp_path / "scene.ply"),
        "--cameras", str(tmp_path / "cameras.json"),
        "--spec", str(tmp_path / "spec.json"),
        "--out", str(tmp_path / out_name),
        "--guidance", f"synthetic:{tmp_path / 'scene.ply'}", *extra])


def test_identity_edit_artifacts(inputs):
    tmp_path, scene = inputs
    result = run_edit(tmp_path, "out")
    assert result.exit_code == 0, result.output
    out = tmp_path / "out"
    assert (out / "result.ply").exists()
    assert (out / "model.ckpt").exists()
    assert (out / "loss.csv").exists()
    assert (out / "before_00.png").exists()
    assert (out / "after_00.png").exists()
    baked = load_scene(out / "result.ply")
    drift = np.linalg.norm(baked.positions - scene.positions, axis=1).mean()
    assert drift < 1e-3  # identity drag with synthetic oracle holds still


def test_missing_scene_usage_error(inputs):
    tmp_path, _ = inputs
    runner = CliRunner()
    result = runner.invoke(main, [
        "edit", "--scene", str(tmp_path / "nope.ply"),
        "--cameras", str(tmp_path / "cameras.json"),
        "--spec", str(tmp_path / "spec.json"),
        "--out", str(tmp_path / "out2")])
    assert result.exit_code == 2


def test_determinism_same_seed_csv(inputs):
    tmp_path, _ = inputs
    assert run_edit(tmp_path, "outA").exit_code == 0
    assert run_edit(tmp_path, "outB").exit_code == 0
    a = (tmp_path / "outA" / "loss.csv").read_bytes()
    b = (tmp_path / "outB" / "loss.csv").read_bytes()
    assert a == b


def test_render_command(inputs):
    tmp_path, _ = inputs
    runner = CliRunner()
    result = runner.invoke(main, [
        "render", "--scene", str(tmp_path / "scene.ply"),
        "--cameras", str(tmp_path / "cameras.json"),
        "--camera", "1", "--out", str(tmp_path / "view.png")])
    assert result.exit_code == 0
    assert (tmp_path / "view.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_verify_schedules():
    runner = CliRunner()
    result = runner.invoke(main, ["verify", "schedules"])
    assert result.exit_code == 0, result.output
    assert "PASS" in result.output
    assert "FAIL" not in result.output


def test_verify_routing_and_oracles():
    runner = CliRunner()
    for suite in ("routing", "oracles"):
        result = runner.invoke(main, ["verify", suite])
        assert result.exit_code == 0, result.output
        assert "FAIL" not in result.output


def test_verify_unknown_suite():
    runner = CliRunner()
    assert runner.invoke(main, ["verify", "nonsense"]).exit_code == 2


def test_serve_health_and_shutdown(inputs):
    tmp_path, _ = inputs
    import socket
    import time
    import urllib.request
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    port = sock.getsockname()[1]
    sock.close()
    proc = subprocess.Popen([
        sys.executable, "-m", "dragsplat.cli", "serve",
        "--scene", str(tmp_path / "scene.ply"),
        "--cameras", str(tmp_path / "cameras.json"),
        "--port", str(port)],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE)
    try:
        deadline = time.time() + 30
        body = None
        while time.time() < deadline:
            try:
                with urllib.request.urlopen(
                        f"http://127.0.0.1:{port}/v1/health", timeout=1) as r:
                    body = json.loads(r.read())
                    break
            except Exception:
                time.sleep(0.3)
        assert body == {"status": "ok"}
    finally:
        proc.terminate()
        proc.wait(timeout=15)


def test_serve_port_busy(inputs):
    tmp_path, _ = inputs
    import socket
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    port = sock.getsockname()[1]
    sock.listen(1)
    try:
        result = subprocess.run([
            sys.executable, "-m", "dragsplat.cli", "serve",
            "--port", str(port)], capture_output=True, timeout=60)
        assert result.returncode == 3
    finally:
        sock.close()
