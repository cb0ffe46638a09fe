"""Stage two: mask generators behind one interface.

Three backends ship here: ``FullCropBackend`` (every crop pixel is foreground),
``OracleBackend`` (ground truth restricted to the crop, used to verify the
pipeline) and ``RemoteBackend`` which speaks a small JSON protocol::

    POST {url}
    {"image": <base64 PNG, 224x224 RGB>, "text": <target description>}

    200 OK
    {"width": w, "height": h, "rle": [counts...]}

Counts use the COCO column-major convention. The returned mask is resized back
to the crop size with nearest-neighbour sampling.
"""
from __future__ import annotations

import base64
import io
from dataclasses import dataclass
from typing import Callable, Optional, Protocol

import httpx
import numpy as np
from PIL import Image

from .errors import BackendError, ConfigurationError, FormatError, InvalidInputError, ProtocolError
from .geometry import CropRect, restrict_mask
from .masks import BinaryMask, rle_decode, resize_nearest

REMOTE_INPUT_SIZE = 224


@dataclass
class SegmentationRequest:
    crop_image: np.ndarray
    target_text: str
    crop_rect: CropRect
    sample_id: str = ""

    def __post_init__(self) -> None:
        if not self.target_text or not self.target_text.strip():
            raise InvalidInputError("target_text must be non-empty")
        if self.crop_image.size == 0:
            raise InvalidInputError("crop_image is empty")

    @property
    def crop_dims(self) -> tuple[int, int]:
        return int(self.crop_image.shape[1]), int(self.crop_image.shape[0])


class SegBackend(Protocol):
    backend_id: str
    max_parallel: int

    def segment(self, req: SegmentationRequest) -> BinaryMask: ...


def segment(backend: SegBackend, req: SegmentationRequest) -> BinaryMask:
    """Run ``backend`` and enforce the crop-size contract on its output."""
    mask = backend.segment(req)
    if mask.dims != req.crop_dims:
        raise ProtocolError(f"{backend.backend_id} returned {mask.dims}, expected {req.crop_dims}")
    return mask


class FullCropBackend:
    backend_id = "full"
    max_parallel = 64

    def segment(self, req: SegmentationRequest) -> BinaryMask:
        w, h = req.crop_dims
        return BinaryMask.ones(w, h)


def oracle_segment(gt_mask: BinaryMask, rect: CropRect) -> BinaryMask:
    if rect.x1 > gt_mask.width or rect.y1 > gt_mask.height:
        raise InvalidInputError(f"{rect} exceeds ground-truth dims {gt_mask.dims}")
    return restrict_mask(gt_mask, rect)


class OracleBackend:
    """Returns the ground truth inside the crop.

    ``gt_lookup`` maps a sample id to its ground-truth mask in normalized
    image space.
    """

    backend_id = "oracle"
    max_parallel = 64

    def __init__(self, gt_lookup: Callable[[str], BinaryMask]):
        self.gt_lookup = gt_lookup

    def segment(self, req: SegmentationRequest) -> BinaryMask:
        return oracle_segment(self.gt_lookup(req.sample_id), req.crop_rect)


def encode_crop(crop_image: np.ndarray, size: int = REMOTE_INPUT_SIZE) -> str:
    img = Image.fromarray(np.asarray(crop_image, dtype=np.uint8)).convert("RGB")
    img = img.resize((size, size), resample=Image.Resampling.BILINEAR)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_mask_response(payload: object) -> BinaryMask:
    if not isinstance(payload, dict):
        raise ProtocolError("mask response must be a JSON object")
    try:
        width, height, counts = payload["width"], payload["height"], payload["rle"]
    except KeyError as exc:
        raise ProtocolError(f"mask response missing key {exc}") from exc
    if not all(isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in (width, height)):
        raise ProtocolError(f"bad mask dims {width!r} x {height!r}")
    if not isinstance(counts, list):
        raise ProtocolError("rle must be a list of counts")
    try:
        return rle_decode(counts, (width, height))
    except FormatError as exc:
        raise ProtocolError(f"malformed RLE: {exc}") from exc


class RemoteBackend:
    def __init__(
        self,
        url: str,
        timeout: float = 60.0,
        max_parallel: int = 2,
        backend_id: Optional[str] = None,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        self.url = url
        self.max_parallel = max_parallel
        self.backend_id = backend_id or f"remote:{url}"
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def segment(self, req: SegmentationRequest) -> BinaryMask:
        body = {"image": encode_crop(req.crop_image), "text": req.target_text}
        try:
            resp = self._client.post(self.url, json=body)
        except httpx.TransportError as exc:
            raise BackendError(f"mask server unreachable: {exc}") from exc
        if resp.status_code >= 400:
            raise BackendError(f"mask server answered HTTP {resp.status_code}")
        try:
            payload = resp.json()
        except ValueError as exc:
            raise ProtocolError("mask response is not JSON") from exc
        mask = decode_mask_response(payload)
        w, h = req.crop_dims
        return resize_nearest(mask, w, h)

    def close(self) -> None:
        self._client.close()


def seg_backend_from_descriptor(desc: dict, gt_lookup: Optional[Callable[[str], BinaryMask]] = None) -> SegBackend:
    kind = desc.get("kind", "oracle")
    if kind == "full":
        return FullCropBackend()
    if kind == "oracle":
        if gt_lookup is None:
            raise ConfigurationError("oracle backend needs ground truth")
        return OracleBackend(gt_lookup)
    if kind == "remote":
        return RemoteBackend(
            desc["url"],
            timeout=float(desc.get("timeout", 60.0)),
            max_parallel=int(desc.get("max_parallel", 2)),
            backend_id=desc.get("id"),
        )
    raise ConfigurationError(f"unknown segmentation backend kind {kind!r}")
