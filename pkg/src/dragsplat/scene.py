"""Masked 3D Gaussian scenes: data model, PLY persistence, partitioning, mirroring.

Attributes are stored structure-of-arrays so per-attribute optimizer groups
operate on contiguous memory. Scale is kept as log-scale and opacity as a
pre-sigmoid logit; quaternions are normalized on load.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import SceneDataError, SceneFormatError

# Binary little-endian PLY subset understood by load_scene/save_scene.
PLY_FIELDS = (
    ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
    ("rot_0", "<f4"), ("rot_1", "<f4"), ("rot_2", "<f4"), ("rot_3", "<f4"),
    ("scale_0", "<f4"), ("scale_1", "<f4"), ("scale_2", "<f4"),
    ("opacity", "<f4"),
    ("f_dc_0", "<f4"), ("f_dc_1", "<f4"), ("f_dc_2", "<f4"),
)
MASK_FIELD = ("edit_mask", "u1")

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "<i2", "int16": "<i2",
    "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4",
    "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4",
    "double": "<f8", "float64": "<f8",
}

DEGENERATE_AABB_PAD = 1e-3


@dataclass
class GaussianPrimitive:
    """Single-primitive view; scenes store attributes as arrays."""

    position: np.ndarray       # (3,) world units
    rotation: np.ndarray       # (4,) unit quaternion (w, x, y, z order by convention)
    log_scale: np.ndarray      # (3,) log of positive axis lengths
    opacity_logit: float       # sigmoid(opacity_logit) in (0, 1)
    color: np.ndarray          # (3,) RGB, SH degree 0
    mask: int                  # binary edit flag


@dataclass
class GaussianScene:
    positions: np.ndarray      # (N, 3) float32
    rotations: np.ndarray      # (N, 4) float32, unit norm
    log_scales: np.ndarray     # (N, 3) float32
    opacity_logits: np.ndarray  # (N,) float32
    colors: np.ndarray         # (N, 3) float32
    mask: np.ndarray           # (N,) uint8 in {0, 1}
    generation: int = 0
    _aabb: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def aabb(self) -> np.ndarray:
        """(2, 3) [min; max]. Tight box; empty scenes degenerate at the origin."""
        if self._aabb is None:
            if len(self) == 0:
                self._aabb = np.zeros((2, 3), dtype=np.float64)
            else:
                self._aabb = np.stack([
                    self.positions.min(axis=0).astype(np.float64),
                    self.positions.max(axis=0).astype(np.float64),
                ])
        return self._aabb

    def normalization_aabb(self) -> np.ndarray:
        """aabb with degenerate axes padded so affine normalization is well-defined."""
        box = self.aabb.copy()
        flat = box[1] - box[0] <= 0
        box[0, flat] -= DEGENERATE_AABB_PAD
        box[1, flat] += DEGENERATE_AABB_PAD
        return box

    def invalidate_aabb(self) -> None:
        self._aabb = None

    def bump_generation(self) -> None:
        """Call on every structural change (densify/prune)."""
        self.generation += 1
        self.invalidate_aabb()

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            position=self.positions[i].copy(),
            rotation=self.rotations[i].copy(),
            log_scale=self.log_scales[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            color=self.colors[i].copy(),
            mask=int(self.mask[i]),
        )

    def copy(self) -> "GaussianScene":
        return GaussianScene(
            positions=self.positions.copy(),
            rotations=self.rotations.copy(),
            log_scales=self.log_scales.copy(),
            opacity_logits=self.opacity_logits.copy(),
            colors=self.colors.copy(),
            mask=self.mask.copy(),
            generation=self.generation,
        )


class MirroredScene:
    """Immutable deep copy of a scene captured at edit start.

    Mask flags are captured as-is; the mirror is what guidance conditioning
    renders (initial image and 2D mask) come from.
    """

    def __init__(self, scene: GaussianScene):
        self._scene = copy.deepcopy(scene)
        for arr in (self._scene.positions, self._scene.rotations,
                    self._scene.log_scales, self._scene.opacity_logits,
                    self._scene.colors, self._scene.mask):
            arr.setflags(write=False)

    @property
    def scene(self) -> GaussianScene:
        return self._scene

    def __len__(self) -> int:
        return len(self._scene)


def make_scene(positions, rotations, log_scales, opacity_logits, colors,
               mask=None) -> GaussianScene:
    """Assemble a scene from arrays, normalizing quaternions and dtypes."""
    positions = np.ascontiguousarray(positions, dtype=np.float32).reshape(-1, 3)
    n = positions.shape[0]
    rotations = np.ascontiguousarray(rotations, dtype=np.float32).reshape(n, 4)
    norms = np.linalg.norm(rotations, axis=1, keepdims=True)
    bad = np.where(norms[:, 0] == 0)[0]
    if bad.size:
        raise SceneDataError(f"zero-norm quaternion at element {bad[0]}")
    rotations = rotations / norms
    scene = GaussianScene(
        positions=positions,
        rotations=rotations,
        log_scales=np.ascontiguousarray(log_scales, dtype=np.float32).reshape(n, 3),
        opacity_logits=np.ascontiguousarray(opacity_logits, dtype=np.float32).reshape(n),
        colors=np.ascontiguousarray(colors, dtype=np.float32).reshape(n, 3),
        mask=(np.zeros(n, dtype=np.uint8) if mask is None
              else np.ascontiguousarray(mask, dtype=np.uint8).reshape(n)),
    )
    _check_finite(scene)
    return scene


def _check_finite(scene: GaussianScene) -> None:
    for name, arr in (("position", scene.positions), ("rotation", scene.rotations),
                      ("scale", scene.log_scales), ("opacity", scene.opacity_logits),
                      ("color", scene.colors)):
        finite = np.isfinite(arr)
        if not finite.all():
            idx = int(np.argwhere(~finite.reshape(len(scene), -1).all(axis=1))[0, 0])
            raise SceneDataError(f"non-finite {name} at element {idx}")


def _parse_header(fh) -> tuple[list[tuple[str, str]], int, int]:
    """Returns (properties, vertex_count, payload_offset)."""
    magic = fh.readline()
    if magic.strip() != b"ply":
        raise SceneFormatError("not a PLY file (missing 'ply' magic)")
    fmt = fh.readline().split()
    if len(fmt) < 2 or fmt[0] != b"format" or fmt[1] != b"binary_little_endian":
        raise SceneFormatError("unsupported PLY format (need binary_little_endian)")
    props: list[tuple[str, str]] = []
    count = None
    in_vertex = False
    while True:
        line = fh.readline()
        if not line:
            raise SceneFormatError("unterminated PLY header")
        tokens = line.split()
        if not tokens or tokens[0] == b"comment":
            continue
        if tokens[0] == b"end_header":
            break
        if tokens[0] == b"element":
            if tokens[1] == b"vertex":
                in_vertex = True
                count = int(tokens[2])
            else:
                in_vertex = False
        elif tokens[0] == b"property" and in_vertex:
            if tokens[1] == b"list":
                raise SceneFormatError("list properties are not supported")
            tname = tokens[1].decode()
            if tname not in _PLY_TYPES:
                raise SceneFormatError(f"unknown property type '{tname}'")
            props.append((tokens[2].decode(), _PLY_TYPES[tname]))
    if count is None:
        raise SceneFormatError("PLY header has no vertex element")
    return props, count, fh.tell()


def load_scene(path) -> GaussianScene:
    """Load the documented PLY subset. Unknown properties ignored; missing
    edit_mask defaults all flags to 0."""
    with open(path, "rb") as fh:
        props, count, _ = _parse_header(fh)
        dtype = np.dtype([(name, code) for name, code in props])
        payload = fh.read(dtype.itemsize * count)
    if len(payload) < dtype.itemsize * count:
        raise SceneFormatError(
            f"truncated payload: expected {dtype.itemsize * count} bytes, "
            f"got {len(payload)}")
    rec = np.frombuffer(payload, dtype=dtype, count=count)
    names = {name for name, _ in props}
    missing = [name for name, _ in PLY_FIELDS if name not in names]
    if missing:
        raise SceneFormatError(f"missing required properties: {missing}")

    def col(*fields):
        return np.stack([rec[f].astype(np.float32) for f in fields], axis=1) \
            if count else np.zeros((0, len(fields)), dtype=np.float32)

    mask = (rec["edit_mask"].astype(np.uint8) if "edit_mask" in names and count
            else np.zeros(count, dtype=np.uint8))
    opac = rec["opacity"].astype(np.float32) if count else np.zeros(0, dtype=np.float32)
    return make_scene(
        positions=col("x", "y", "z"),
        rotations=col("rot_0", "rot_1", "rot_2", "rot_3"),
        log_scales=col("scale_0", "scale_1", "scale_2"),
        opacity_logits=opac,
        colors=col("f_dc_0", "f_dc_1", "f_dc_2"),
        mask=mask,
    )


def save_scene(scene: GaussianScene, path) -> None:
    """Write the PLY subset; re-loadable by load_scene bit-exactly."""
    fields = list(PLY_FIELDS) + [MASK_FIELD]
    dtype = np.dtype(fields)
    rec = np.empty(len(scene), dtype=dtype)
    rec["x"], rec["y"], rec["z"] = scene.positions.T
    for k in range(4):
        rec[f"rot_{k}"] = scene.rotations[:, k]
    for k in range(3):
        rec[f"scale_{k}"] = scene.log_scales[:, k]
    rec["opacity"] = scene.opacity_logits
    for k in range(3):
        rec[f"f_dc_{k}"] = scene.colors[:, k]
    rec["edit_mask"] = scene.mask

    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {len(scene)}"]
    type_names = {"<f4": "float", "u1": "uchar"}
    header += [f"property {type_names[code]} {name}" for name, code in fields]
    header.append("end_header")
    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode())
            fh.write(rec.tobytes())
    except OSError as exc:
        raise OSError(f"failed to write scene to {path}: {exc}") from exc


def partition(scene: GaussianScene) -> tuple[np.ndarray, np.ndarray]:
    """(masked indices, unmasked indices); disjoint, union covers the scene."""
    flags = scene.mask != 0
    return np.flatnonzero(flags), np.flatnonzero(~flags)


def mirror(scene: GaussianScene) -> MirroredScene:
    return MirroredScene(scene)


def mark_new_primitives_masked(scene: GaussianScene, new_indices) -> None:
    """Flag primitives created by densify as masked."""
    idx = np.asarray(new_indices, dtype=np.int64)
    if idx.size == 0:
        return
    if idx.min() < 0 or idx.max() >= len(scene):
        raise IndexError(
            f"primitive index out of range: {int(idx.max())} with N={len(scene)}")
    scene.mask[idx] = 1
