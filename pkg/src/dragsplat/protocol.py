"""Wire protocol for external guidance processes.

JSON envelope with base64-encoded row-major float32 little-endian tensors.
Requests and responses carry a `protocol: 1` version field.
"""

from __future__ import annotations

import base64
import time

import httpx
import numpy as np

from .errors import GuidanceUnavailableError
from .guidance import GuidanceRequest, GuidanceResponse

PROTOCOL_VERSION = 1


def encode_tensor(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return {"shape": list(arr.shape),
            "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def decode_tensor(obj: dict) -> np.ndarray:
    shape = tuple(int(v) for v in obj["shape"])
    raw = base64.b64decode(obj["data"])
    expect = int(np.prod(shape)) * 4
    if len(raw) != expect:
        raise GuidanceUnavailableError(
            f"tensor payload has {len(raw)} bytes, expected {expect}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def request_to_json(req: GuidanceRequest) -> dict:
    return {
        "protocol": PROTOCOL_VERSION,
        "image": encode_tensor(req.image),
        "init_image": encode_tensor(req.init_image),
        "mask": encode_tensor(req.mask),
        "points": [{"handle": [float(p["handle"][0]), float(p["handle"][1])],
                    "target": [float(p["target"][0]), float(p["target"][1])]}
                   for p in req.points],
        "t": int(req.t),
        "alpha_bar": float(req.alpha_bar),
        "noise": encode_tensor(req.noise),
        "cfg": float(req.cfg),
        "seed": int(req.seed),
    }


def request_from_json(doc: dict) -> GuidanceRequest:
    if doc.get("protocol") != PROTOCOL_VERSION:
        raise GuidanceUnavailableError(
            f"unsupported protocol version {doc.get('protocol')}")
    return GuidanceRequest(
        image=decode_tensor(doc["image"]),
        init_image=decode_tensor(doc["init_image"]),
        mask=decode_tensor(doc["mask"]),
        points=doc["points"],
        t=int(doc["t"]),
        alpha_bar=float(doc["alpha_bar"]),
        noise=decode_tensor(doc["noise"]),
        cfg=float(doc["cfg"]),
        seed=int(doc["seed"]),
    )


def response_to_json(resp: GuidanceResponse) -> dict:
    return {"protocol": PROTOCOL_VERSION,
            "eps_tgt": encode_tensor(resp.eps_tgt),
            "eps_src": encode_tensor(resp.eps_src)}


def response_from_json(doc: dict) -> GuidanceResponse:
    try:
        return GuidanceResponse(eps_tgt=decode_tensor(doc["eps_tgt"]),
                                eps_src=decode_tensor(doc["eps_src"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise GuidanceUnavailableError(f"malformed guidance response: {exc}") from exc


class ExternalGuidanceClient:
    """HTTP transport to an external drag-model process.

    Transport failures are retried (3 attempts, exponential backoff); shape
    mismatches and malformed payloads are protocol violations and surface
    immediately so the edit run can pause.
    """

    def __init__(self, endpoint: str, timeout: float = 30.0, attempts: int = 3,
                 backoff: float = 0.5, transport=None):
        self.endpoint = endpoint
        self.timeout = timeout
        self.attempts = attempts
        self.backoff = backoff
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def respond(self, request: GuidanceRequest, camera_index: int | None = None
                ) -> GuidanceResponse:
        payload = request_to_json(request)
        last_exc: Exception | None = None
        for attempt in range(self.attempts):
            try:
                reply = self._client.post(self.endpoint, json=payload)
                reply.raise_for_status()
                resp = response_from_json(reply.json())
                resp.validate_shape(request.noise.shape)
                return resp
            except GuidanceUnavailableError:
                raise
            except (httpx.HTTPError, ValueError) as exc:
                last_exc = exc
                if attempt + 1 < self.attempts:
                    time.sleep(self.backoff * (2 ** attempt))
        raise GuidanceUnavailableError(
            f"guidance endpoint {self.endpoint} unreachable after "
            f"{self.attempts} attempts: {last_exc}") from last_exc

    def close(self) -> None:
        self._client.close()
