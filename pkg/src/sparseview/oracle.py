"""Clients for the repair/inpaint oracles plus deterministic in-process stubs.

Wire protocol (HTTP): POST /v1/repair and /v1/inpaint with a JSON envelope
{scene_id, seed, image_png_b64, mask_png_b64?}; responses carry
{image_png_b64, model_fingerprint}; errors come back as an HTTP status plus
{code, message}. Images travel as 8-bit RGB PNG with the smallest dimension
resized to 512 before dispatch and restored afterwards.

In-process stubs skip the wire (and its resizing/quantization) entirely, so
stub-driven pipelines are bitwise deterministic. Shipped stubs:
  * ``identity``      repair: returns the input unchanged
  * ``blur``          repair: Gaussian blur, sigma 1
  * ``harmonic``      inpaint: harmonic (Laplace) fill from the hole boundary
  * ``constant``      inpaint: fills holes with 0.5 gray

Every dispatched request is journaled (request hash, seed, response hash)
and responses are cached by request hash, so repeated refreshes reuse
identical oracle outputs.
"""

from __future__ import annotations

import base64
import hashlib
import io as _io
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import OracleProtocolError, OracleUnavailableError
from .fusion import harmonic_fill
from .scene import BinaryMask, ImageRGB

logger = logging.getLogger(__name__)

DISPATCH_SIDE = 512
ENDPOINT_ENV_VAR = "SPARSEVIEW_ORACLE_URL"
OUTSIDE_HOLE_TOLERANCE = 1.0 / 255.0


@dataclass
class OracleRequest:
    """Payload sent to an oracle endpoint."""

    kind: str  # "repair" | "inpaint"
    image: ImageRGB
    mask: BinaryMask | None
    seed: int
    scene_id: str


@dataclass
class OracleResponse:
    image: ImageRGB
    latency_ms: float
    model_fingerprint: str


def encode_png_b64(image: ImageRGB) -> str:
    arr = np.clip(np.rint(image.pixels * 255.0), 0, 255).astype(np.uint8)
    buf = _io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png_b64(payload: str) -> ImageRGB:
    raw = base64.b64decode(payload)
    with Image.open(_io.BytesIO(raw)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return ImageRGB(arr)


def encode_mask_b64(mask: BinaryMask) -> str:
    arr = np.where(mask.bits, 255, 0).astype(np.uint8)
    buf = _io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_mask_b64(payload: str) -> BinaryMask:
    raw = base64.b64decode(payload)
    with Image.open(_io.BytesIO(raw)) as im:
        arr = np.asarray(im.convert("L"))
    return BinaryMask(arr >= 128)


@dataclass
class ResizePlan:
    """Inverse description of the 512-side dispatch resize."""

    native_width: int
    native_height: int
    dispatch_width: int
    dispatch_height: int

    @property
    def is_identity(self) -> bool:
        return (self.native_width, self.native_height) == (
            self.dispatch_width,
            self.dispatch_height,
        )

    def restore(self, image: ImageRGB) -> ImageRGB:
        if self.is_identity:
            return image
        return _resize_image(image, self.native_width, self.native_height)


def _resize_image(image: ImageRGB, width: int, height: int) -> ImageRGB:
    channels = []
    for c in range(3):
        src = Image.fromarray(image.pixels[:, :, c].astype(np.float32), mode="F")
        channels.append(
            np.asarray(src.resize((width, height), resample=Image.BILINEAR), dtype=np.float64)
        )
    return ImageRGB(np.clip(np.stack(channels, axis=2), 0.0, 1.0))


def _resize_mask(mask: BinaryMask, width: int, height: int) -> BinaryMask:
    src = Image.fromarray(np.where(mask.bits, 255, 0).astype(np.uint8), mode="L")
    arr = np.asarray(src.resize((width, height), resample=Image.NEAREST))
    return BinaryMask(arr >= 128)


def resize_roundtrip(image: ImageRGB) -> tuple[ImageRGB, ResizePlan]:
    """Bilinear resize so the smallest dimension is 512, plus its inverse.

    Raises:
        ValueError: smallest input dimension below 64.
    """
    w, h = image.width, image.height
    if min(w, h) < 64:
        raise ValueError(f"image {w}x{h} too small for oracle dispatch (min side 64)")
    if min(w, h) == DISPATCH_SIDE:
        plan = ResizePlan(w, h, w, h)
        return image, plan
    factor = DISPATCH_SIDE / min(w, h)
    dw = DISPATCH_SIDE if w <= h else int(round(w * factor))
    dh = DISPATCH_SIDE if h < w else int(round(h * factor))
    if w == h:
        dw = dh = DISPATCH_SIDE
    plan = ResizePlan(w, h, dw, dh)
    return _resize_image(image, dw, dh), plan


def _hash_request(kind: str, image: ImageRGB, mask: BinaryMask | None, seed: int, scene_id: str) -> str:
    digest = hashlib.sha256()
    digest.update(kind.encode())
    digest.update(scene_id.encode())
    digest.update(np.int64(seed).tobytes())
    digest.update(np.ascontiguousarray(image.pixels).tobytes())
    if mask is not None:
        digest.update(np.ascontiguousarray(mask.bits).tobytes())
    return digest.hexdigest()


def _hash_image(image: ImageRGB) -> str:
    return hashlib.sha256(np.ascontiguousarray(image.pixels).tobytes()).hexdigest()


class OracleStub:
    """Pure deterministic in-process oracle backend."""

    name = "stub"
    fingerprint = "stub"

    def repair(self, image: ImageRGB, seed: int) -> ImageRGB:
        raise NotImplementedError

    def inpaint(self, image: ImageRGB, hole: BinaryMask, seed: int) -> ImageRGB:
        raise NotImplementedError


class IdentityRepairStub(OracleStub):
    """Repair that returns the rendered image unchanged."""

    name = "identity"
    fingerprint = "stub-identity"

    def repair(self, image: ImageRGB, seed: int) -> ImageRGB:
        return ImageRGB(image.pixels.copy())


def gaussian_blur_kernel(sigma: float = 1.0, radius: int = 4) -> np.ndarray:
    coords = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(coords**2) / (2 * sigma**2))
    return k / k.sum()


def separable_blur(pixels: np.ndarray, sigma: float = 1.0, radius: int = 4) -> np.ndarray:
    """Truncated separable Gaussian blur with replicate padding."""
    kernel = gaussian_blur_kernel(sigma, radius)
    padded = np.pad(pixels, ((radius, radius), (0, 0), (0, 0)), mode="edge")
    out = np.zeros_like(pixels)
    for i, kv in enumerate(kernel):
        out += kv * padded[i : i + pixels.shape[0]]
    padded = np.pad(out, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    out = np.zeros_like(pixels)
    for i, kv in enumerate(kernel):
        out += kv * padded[:, i : i + pixels.shape[1]]
    return out


class BlurRepairStub(OracleStub):
    """Repair that applies a sigma-1 Gaussian blur (an adversarially lazy oracle)."""

    name = "blur"
    fingerprint = "stub-blur-sigma1"

    def repair(self, image: ImageRGB, seed: int) -> ImageRGB:
        return ImageRGB(separable_blur(image.pixels, sigma=1.0, radius=4))


class HarmonicFillInpaintStub(OracleStub):
    """Inpaint by harmonic extension of the hole boundary, per channel.

    A hole covering the whole image has no boundary to extend; it is filled
    with 0.5 gray.
    """

    name = "harmonic"
    fingerprint = "stub-harmonic-fill"

    def inpaint(self, image: ImageRGB, hole: BinaryMask, seed: int) -> ImageRGB:
        if hole.bits.all():
            return ImageRGB(np.full_like(image.pixels, 0.5))
        out = image.pixels.copy()
        for c in range(3):
            out[:, :, c] = harmonic_fill(out[:, :, c], hole.bits)
        return ImageRGB(np.clip(out, 0.0, 1.0))


class ConstantFillInpaintStub(OracleStub):
    """Inpaint by filling holes with 0.5 gray."""

    name = "constant"
    fingerprint = "stub-constant-0.5"

    def inpaint(self, image: ImageRGB, hole: BinaryMask, seed: int) -> ImageRGB:
        out = image.pixels.copy()
        out[hole.bits] = 0.5
        return ImageRGB(out)


STUB_REGISTRY: dict[str, type[OracleStub]] = {
    "identity": IdentityRepairStub,
    "blur": BlurRepairStub,
    "harmonic": HarmonicFillInpaintStub,
    "constant": ConstantFillInpaintStub,
}


@dataclass
class JournalEntry:
    kind: str
    request_hash: str
    seed: int
    response_hash: str
    fingerprint: str


class OracleClient:
    """Uniform repair/inpaint interface with journaling and a response cache.

    The inpaint contract (pixels outside the hole preserved within 1/255 per
    channel) is enforced client-side; violating responses raise
    :class:`OracleProtocolError`.
    """

    def __init__(self, scene_id: str = "scene"):
        self.scene_id = scene_id
        self.journal: list[JournalEntry] = []
        self._cache: dict[str, ImageRGB] = {}
        self.fallback_count = 0

    # Subclasses implement the raw transport at native or dispatch resolution.
    def _dispatch_repair(self, image: ImageRGB, seed: int) -> tuple[ImageRGB, str]:
        raise NotImplementedError

    def _dispatch_inpaint(self, image: ImageRGB, hole: BinaryMask, seed: int) -> tuple[ImageRGB, str]:
        raise NotImplementedError

    def repair(self, image: ImageRGB, seed: int) -> ImageRGB:
        """Same-size cleaned image; deterministic for a fixed (image, seed)."""
        key = _hash_request("repair", image, None, seed, self.scene_id)
        if key in self._cache:
            return self._cache[key]
        result, fingerprint = self._dispatch_repair(image, seed)
        if (result.height, result.width) != (image.height, image.width):
            raise OracleProtocolError(
                f"repair returned {result.width}x{result.height} for "
                f"{image.width}x{image.height} input"
            )
        self._record("repair", key, seed, result, fingerprint)
        return result

    def inpaint(self, image: ImageRGB, hole: BinaryMask, seed: int) -> ImageRGB:
        """Fill hole pixels; pixels outside the hole are preserved.

        An empty hole is a warned no-op.
        """
        if hole.count() == 0:
            logger.warning("inpaint called with an empty hole; returning input")
            return ImageRGB(image.pixels.copy())
        key = _hash_request("inpaint", image, hole, seed, self.scene_id)
        if key in self._cache:
            return self._cache[key]
        result, fingerprint = self._dispatch_inpaint(image, hole, seed)
        if (result.height, result.width) != (image.height, image.width):
            raise OracleProtocolError(
                f"inpaint returned {result.width}x{result.height} for "
                f"{image.width}x{image.height} input"
            )
        outside = ~hole.bits
        deviation = np.abs(result.pixels[outside] - image.pixels[outside])
        if deviation.size and deviation.max() > OUTSIDE_HOLE_TOLERANCE + 1e-12:
            raise OracleProtocolError(
                f"inpaint modified pixels outside the hole by {deviation.max():.4f} "
                f"(allowed {OUTSIDE_HOLE_TOLERANCE:.4f})"
            )
        self._record("inpaint", key, seed, result, fingerprint)
        return result

    def _record(self, kind: str, key: str, seed: int, result: ImageRGB, fingerprint: str) -> None:
        self._cache[key] = result
        self.journal.append(
            JournalEntry(
                kind=kind,
                request_hash=key,
                seed=seed,
                response_hash=_hash_image(result),
                fingerprint=fingerprint,
            )
        )

    def write_journal(self, path) -> None:
        with open(path, "w") as f:
            for e in self.journal:
                f.write(
                    json.dumps(
                        {
                            "kind": e.kind,
                            "request": e.request_hash,
                            "seed": e.seed,
                            "response": e.response_hash,
                            "fingerprint": e.fingerprint,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )


class StubOracleClient(OracleClient):
    """In-process client backed by pure stubs (no wire, no resizing)."""

    def __init__(
        self,
        repair_stub: OracleStub | None = None,
        inpaint_stub: OracleStub | None = None,
        scene_id: str = "scene",
    ):
        super().__init__(scene_id=scene_id)
        self.repair_stub = repair_stub if repair_stub is not None else IdentityRepairStub()
        self.inpaint_stub = inpaint_stub if inpaint_stub is not None else HarmonicFillInpaintStub()

    @classmethod
    def from_names(cls, repair: str = "identity", inpaint: str = "harmonic", scene_id: str = "scene"):
        for name in (repair, inpaint):
            if name not in STUB_REGISTRY:
                raise ValueError(f"unknown stub '{name}' (have {sorted(STUB_REGISTRY)})")
        return cls(STUB_REGISTRY[repair](), STUB_REGISTRY[inpaint](), scene_id=scene_id)

    def _dispatch_repair(self, image: ImageRGB, seed: int) -> tuple[ImageRGB, str]:
        return self.repair_stub.repair(image, seed), self.repair_stub.fingerprint

    def _dispatch_inpaint(self, image: ImageRGB, hole: BinaryMask, seed: int) -> tuple[ImageRGB, str]:
        return self.inpaint_stub.inpaint(image, hole, seed), self.inpaint_stub.fingerprint


class HttpOracleClient(OracleClient):
    """HTTP transport speaking the JSON + base64-PNG wire protocol.

    Connection failures, timeouts, and 5xx responses are retried up to
    ``retries`` times; exhausting the budget raises
    :class:`OracleUnavailableError` (callers fall back per stage policy).
    """

    def __init__(
        self,
        endpoint: str | None = None,
        *,
        timeout: float = 120.0,
        retries: int = 2,
        scene_id: str = "scene",
        session=None,
    ):
        super().__init__(scene_id=scene_id)
        endpoint = endpoint or os.environ.get(ENDPOINT_ENV_VAR, "")
        if not endpoint:
            raise ValueError(f"no oracle endpoint given (set {ENDPOINT_ENV_VAR} or pass one)")
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        if session is None:
            import requests

            session = requests.Session()
        self._session = session

    def _post(self, route: str, payload: dict) -> dict:
        import requests

        url = f"{self.endpoint}{route}"
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._session.post(url, json=payload, timeout=self.timeout)
            except requests.RequestException as exc:
                last_error = exc
                logger.warning("oracle request failed (attempt %d): %s", attempt + 1, exc)
                continue
            if resp.status_code >= 500:
                last_error = OracleUnavailableError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                logger.warning("oracle server error (attempt %d): %s", attempt + 1, resp.status_code)
                continue
            if resp.status_code != 200:
                try:
                    detail = resp.json()
                except ValueError:
                    detail = {"code": "unknown", "message": resp.text[:200]}
                raise OracleProtocolError(
                    f"HTTP {resp.status_code}: {detail.get('code')}: {detail.get('message')}"
                )
            return resp.json()
        raise OracleUnavailableError(f"oracle unreachable after {self.retries + 1} attempts: {last_error}")

    def _dispatch_repair(self, image: ImageRGB, seed: int) -> tuple[ImageRGB, str]:
        dispatch, plan = resize_roundtrip(image)
        t0 = time.monotonic()
        data = self._post(
            "/v1/repair",
            {
                "scene_id": self.scene_id,
                "seed": int(seed),
                "image_png_b64": encode_png_b64(dispatch),
            },
        )
        logger.debug("repair latency %.1f ms", (time.monotonic() - t0) * 1000)
        result = decode_png_b64(data["image_png_b64"])
        if (result.height, result.width) != (dispatch.height, dispatch.width):
            raise OracleProtocolError("repair response size differs from dispatched size")
        return plan.restore(result), str(data.get("model_fingerprint", ""))

    def _dispatch_inpaint(self, image: ImageRGB, hole: BinaryMask, seed: int) -> tuple[ImageRGB, str]:
        dispatch, plan = resize_roundtrip(image)
        dmask = (
            hole
            if plan.is_identity
            else _resize_mask(hole, plan.dispatch_width, plan.dispatch_height)
        )
        data = self._post(
            "/v1/inpaint",
            {
                "scene_id": self.scene_id,
                "seed": int(seed),
                "image_png_b64": encode_png_b64(dispatch),
                "mask_png_b64": encode_mask_b64(dmask),
            },
        )
        result = decode_png_b64(data["image_png_b64"])
        if (result.height, result.width) != (dispatch.height, dispatch.width):
            raise OracleProtocolError("inpaint response size differs from dispatched size")
        restored = plan.restore(result)
        if not plan.is_identity:
            # Resampling perturbs out-of-hole pixels; composite them back so
            # the client-side preservation contract holds at native size.
            merged = image.pixels.copy()
            merged[hole.bits] = restored.pixels[hole.bits]
            restored = ImageRGB(merged)
        return restored, str(data.get("model_fingerprint", ""))


def make_client(spec: str, scene_id: str = "scene", **kwargs) -> OracleClient:
    """Build a client from a CLI-style spec: a URL or ``stub:<repair>,<inpaint>``."""
    if spec.startswith("stub:"):
        names = spec[5:].split(",")
        repair = names[0] or "identity"
        inpaint = names[1] if len(names) > 1 and names[1] else "harmonic"
        return StubOracleClient.from_names(repair, inpaint, scene_id=scene_id)
    return HttpOracleClient(spec, scene_id=scene_id, **kwargs)
