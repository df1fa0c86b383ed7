"""Build the synthetic two-blob drag benchmark: scene, translated ground
truth, camera ring, and an edit spec, ready for `dragsplat edit`.

Usage: python scripts/make_synthetic_scene.py OUTDIR [--n-per-blob 1000]
"""

import argparse
import json
from pathlib import Path

import numpy as np

from dragsplat.cameras import Camera, save_cameras
from dragsplat.scene import make_scene, save_scene


def build_scene(rng, n_per_blob, std=0.08, centers=((-0.2, 0, 0), (0.2, 0, 0)),
                log_scale=np.log(0.02)):
    pos = np.concatenate([rng.normal(centers[0], std, (n_per_blob, 3)),
                          rng.normal(centers[1], std, (n_per_blob, 3))])
    n = 2 * n_per_blob
    colors = np.concatenate([
        np.tile([0.8, 0.3, 0.2], (n_per_blob, 1)),
        np.tile([0.2, 0.4, 0.8], (n_per_blob, 1)),
    ]) + rng.uniform(-0.05, 0.05, (n, 3))
    mask = np.concatenate([np.ones(n_per_blob), np.zeros(n_per_blob)])
    return make_scene(pos, rng.normal(size=(n, 4)),
                      np.full((n, 3), log_scale) + rng.uniform(-0.2, 0.2, (n, 3)),
                      np.full(n, 2.0), np.clip(colors, 0.05, 0.95), mask)


def camera_ring(n=8, radius=2.2, width=40, elevation=0.25):
    cams = []
    for k in range(n):
        a = 2 * np.pi * k / n
        eye = np.array([radius * np.sin(a), elevation * np.sin(2 * a),
                        -radius * np.cos(a)])
        fwd = -eye / np.linalg.norm(eye)
        up = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        cams.append(Camera(fx=1.4 * width, fy=1.4 * width, cx=width / 2,
                           cy=width / 2, width=width, height=width,
                           rotation=R, translation=-R @ eye))
    return cams


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("outdir", type=Path)
    ap.add_argument("--n-per-blob", type=int, default=1000)
    ap.add_argument("--drag", type=float, nargs=3, default=[0.0, 0.3, 0.0])
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--width", type=int, default=40)
    ap.add_argument("--iterations", type=int, default=1200)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    scene = build_scene(rng, args.n_per_blob)
    d = np.asarray(args.drag, dtype=np.float32)
    target = scene.copy()
    target.positions[target.mask != 0] += d

    args.outdir.mkdir(parents=True, exist_ok=True)
    save_scene(scene, args.outdir / "scene.ply")
    save_scene(target, args.outdir / "target.ply")
    save_cameras(camera_ring(width=args.width), args.outdir / "cameras.json")
    handle = [-0.2, 0.0, 0.0]
    spec = {
        "mask": {"type": "flags", "flags": [int(v) for v in scene.mask]},
        "points": [{"handle": handle,
                    "target": (np.asarray(handle) + d).tolist()}],
        "iterations": args.iterations,
        "seed": args.seed,
        "render_width": args.width,
    }
    (args.outdir / "spec.json").write_text(json.dumps(spec))
    print(f"wrote scene/target/cameras/spec to {args.outdir}")
    print("run:  dragsplat edit --scene scene.ply --cameras cameras.json "
          "--spec spec.json --guidance synthetic:target.ply --out out/")


if __name__ == "__main__":
    main()
