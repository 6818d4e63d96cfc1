"""Pluggable view synthesis: a deterministic procedural oracle or a remote
diffusion sidecar speaking a fixed JSON/HTTP wire protocol.

The procedural backend is a pure function of the position map and hit mask
(a smooth trigonometric color field), so it is view-consistent by
construction and gives the end-to-end tests exact ground truth. The remote
backend packages the geometric maps into one POST per call.
"""

from __future__ import annotations

import base64
import io
import time
from dataclasses import dataclass

import numpy as np
import requests
from PIL import Image

from .camera import CameraPose, GeometryMaps, depth_range, encode_depth_u16, encode_normal_u8

ORACLE_FREQ = 4.0
REMOTE_TIMEOUT_S = 300.0
REMOTE_RETRIES = 2


class BackendError(Exception):
    def __init__(self, message: str, retries: int = 0):
        super().__init__(message)
        self.retries = retries


class ProtocolError(BackendError):
    pass


@dataclass
class ViewBundle:
    """One viewpoint's conditioning package."""

    pose: CameraPose
    maps: GeometryMaps
    prompt: str
    reference: np.ndarray | None = None   # anchor image
    target: np.ndarray | None = None      # synthesized or occluded image
    mask: np.ndarray | None = None        # inpaint region


def oracle_color(position: np.ndarray) -> np.ndarray:
    """Closed-form world-position -> RGB field; frequencies low enough that a
    constant color per disk can represent it."""
    p = np.asarray(position, dtype=np.float64)
    return 0.5 + 0.5 * np.sin(ORACLE_FREQ * p)


class ProceduralBackend:
    """Deterministic stand-in for the diffusion stack; white background."""

    name = "procedural"

    def _paint(self, maps: GeometryMaps) -> np.ndarray:
        img = np.ones(maps.position.shape)
        hits = maps.hit_mask
        img[hits] = oracle_color(maps.position[hits])
        return img

    def synthesize_reference(self, bundle: ViewBundle) -> np.ndarray:
        if bundle.maps.depth is None:
            raise BackendError("reference synthesis needs a depth map")
        return self._paint(bundle.maps)

    def synthesize_multiview(
        self, bundles: list[ViewBundle], reference: np.ndarray
    ) -> list[np.ndarray]:
        # the oracle is globally consistent already; the reference is unused
        return [self._paint(b.maps) for b in bundles]

    def inpaint(self, bundle: ViewBundle) -> np.ndarray:
        return self._paint(bundle.maps)


def inpaint_with_backend(backend, bundle: ViewBundle) -> np.ndarray:
    """Inpaints the masked region and hard-composites the result so pixels
    outside the mask are byte-identical to the input target, whatever the
    backend returned."""
    if bundle.target is None or bundle.mask is None:
        raise BackendError("inpaint needs a target image and a mask")
    mask = np.asarray(bundle.mask, dtype=bool)
    if not mask.any():
        raise BackendError("empty inpaint mask")
    out = np.asarray(backend.inpaint(bundle), dtype=np.float64)
    if out.shape != bundle.target.shape:
        raise ProtocolError("backend returned a mismatched image size")
    return np.where(mask[:, :, None], out, bundle.target)


# ---- wire protocol ----------------------------------------------------------

def _png_b64(img_u8: np.ndarray, mode: str | None = None) -> str:
    buf = io.BytesIO()
    if img_u8.dtype == np.uint16:
        Image.fromarray(img_u8, mode="I;16").save(buf, format="PNG")
    else:
        Image.fromarray(img_u8, mode=mode).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _b64_png(data: str) -> np.ndarray:
    img = Image.open(io.BytesIO(base64.b64decode(data)))
    return np.array(img)


def encode_view(bundle: ViewBundle) -> dict:
    """One entry of the request's `views` array (bit-exact float32 positions)."""
    maps = bundle.maps
    pose = bundle.pose
    intr = pose.intrinsics
    near, far = depth_range(pose)
    _, up, _ = pose.basis()
    view = {
        "width": intr.width,
        "height": intr.height,
        "camera": {
            "position": [float(v) for v in pose.position],
            "fov": float(intr.fov_y),
            "up": [float(v) for v in up],
        },
        "depth_near": near,
        "depth_far": far,
        "depth_png_b16": _png_b64(encode_depth_u16(maps.depth, near, far)),
        "normal_png_rgb": _png_b64(encode_normal_u8(maps.normal, maps.hit_mask)),
        "position_exr_or_raw_f32_b64": base64.b64encode(
            maps.position.astype("<f4").tobytes()
        ).decode("ascii"),
    }
    if bundle.target is not None:
        view["image_png"] = _png_b64(image_to_u8(bundle.target))
    if bundle.mask is not None:
        view["mask_png"] = _png_b64(
            (np.asarray(bundle.mask, dtype=np.uint8) * 255), mode="L"
        )
    return view


def decode_view_position(view: dict) -> np.ndarray:
    raw = base64.b64decode(view["position_exr_or_raw_f32_b64"])
    arr = np.frombuffer(raw, dtype="<f4")
    return arr.reshape(view["height"], view["width"], 3).astype(np.float64)


def image_to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def u8_to_image(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float64) / 255.0


class RemoteBackend:
    """HTTP client for a diffusion sidecar implementing the wire protocol.

    One POST per call; the JSON body carries the prompt, a mode tag, and the
    per-view conditioning payloads. Responses are all-or-nothing.
    """

    name = "remote"

    def __init__(self, url: str, timeout: float = REMOTE_TIMEOUT_S,
                 retries: int = REMOTE_RETRIES, session=None):
        self.url = url
        self.timeout = timeout
        self.retries = retries
        self.session = session or requests.Session()

    def _post(self, payload: dict, expected: int) -> list[np.ndarray]:
        attempt = 0
        while True:
            try:
                resp = self.session.post(self.url, json=payload, timeout=self.timeout)
                resp.raise_for_status()
                body = resp.json()
                break
            except (requests.RequestException, ValueError) as e:
                if attempt >= self.retries:
                    raise BackendError(
                        f"remote backend failed after {attempt} retries: {e}",
                        retries=attempt,
                    ) from e
                time.sleep(2.0 ** attempt)
                attempt += 1
        images = body.get("images")
        if not isinstance(images, list) or len(images) != expected:
            raise ProtocolError(
                f"expected {expected} images, got "
                f"{len(images) if isinstance(images, list) else type(images)}"
            )
        out = []
        for data in images:
            arr = _b64_png(data)
            if arr.ndim == 2:
                arr = np.repeat(arr[:, :, None], 3, axis=2)
            out.append(u8_to_image(arr[:, :, :3]))
        return out

    def synthesize_reference(self, bundle: ViewBundle) -> np.ndarray:
        payload = {
            "prompt": bundle.prompt,
            "mode": "reference",
            "views": [encode_view(bundle)],
        }
        return self._post(payload, 1)[0]

    def synthesize_multiview(
        self, bundles: list[ViewBundle], reference: np.ndarray
    ) -> list[np.ndarray]:
        views = [encode_view(b) for b in bundles]
        payload = {
            "prompt": bundles[0].prompt if bundles else "",
            "mode": "multiview",
            "views": views,
            "reference_png": _png_b64(image_to_u8(reference)),
        }
        return self._post(payload, len(bundles))

    def inpaint(self, bundle: ViewBundle) -> np.ndarray:
        payload = {
            "prompt": bundle.prompt,
            "mode": "inpaint",
            "views": [encode_view(bundle)],
        }
        return self._post(payload, 1)[0]


def make_backend(name: str, url: str = "", timeout: float = REMOTE_TIMEOUT_S):
    if name == "procedural":
        return ProceduralBackend()
    if name == "remote":
        if not url:
            raise BackendError("remote backend requires a service URL")
        return RemoteBackend(url, timeout=timeout)
    raise BackendError(f"unknown backend '{name}'")
