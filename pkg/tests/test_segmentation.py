import base64
import io

import numpy as np
import pytest
from PIL import Image

from regionseg.errors import BackendError, ConfigurationError, InvalidInputError, ProtocolError
from regionseg.geometry import CropRect
from regionseg.masks import BinaryMask, rle_encode
from regionseg.segmentation import (
    FullCropBackend,
    OracleBackend,
    RemoteBackend,
    SegmentationRequest,
    decode_mask_response,
    seg_backend_from_descriptor,
    segment,
)

from stubs import json_server


def _req(w=30, h=20, rect=CropRect(10, 5, 40, 25), sid="s"):
    img = np.random.default_rng(0).integers(0, 256, (h, w, 3), dtype=np.uint8)
    return SegmentationRequest(img, "green lamp", rect, sid)


def test_full_crop_backend():
    m = segment(FullCropBackend(), _req())
    assert m.dims == (30, 20) and m.popcount() == 600


def test_oracle_backend_restricts_ground_truth():
    gt = np.zeros((50, 60), dtype=bool)
    gt[0:10, 0:20] = True  # overlaps the crop at x 10..20, y 5..10
    backend = OracleBackend(lambda sid: BinaryMask(gt))
    m = segment(backend, _req())
    assert m.popcount() == 10 * 5
    assert m.bits[0:5, 0:10].all()


def test_random_masks_preserve_popcount_through_oracle():
    rng = np.random.default_rng(4)
    for _ in range(20):
        gt = rng.random((40, 40)) < 0.4
        rect = CropRect(0, 0, 40, 40)
        req = SegmentationRequest(np.zeros((40, 40, 3), np.uint8), "x", rect)
        assert segment(OracleBackend(lambda s: BinaryMask(gt)), req).popcount() == int(gt.sum())


def test_wrong_size_output_is_a_protocol_error():
    class Bad:
        backend_id = "bad"
        max_parallel = 1

        def segment(self, req):
            return BinaryMask.ones(3, 3)

    with pytest.raises(ProtocolError):
        segment(Bad(), _req())


def test_request_validation():
    with pytest.raises(InvalidInputError):
        SegmentationRequest(np.zeros((4, 4, 3), np.uint8), "  ", CropRect(0, 0, 4, 4))


def test_remote_backend_roundtrip():
    fixed = np.zeros((224, 224), dtype=bool)
    fixed[:112, :] = True  # top half

    def respond(path, body):
        with Image.open(io.BytesIO(base64.b64decode(body["image"]))) as img:
            assert img.size == (224, 224)
        assert body["text"] == "green lamp"
        return 200, {"width": 224, "height": 224, "rle": rle_encode(fixed)}

    with json_server(respond) as (url, received):
        backend = RemoteBackend(url + "/segment")
        m = segment(backend, _req())
        backend.close()
    assert len(received) == 1 and received[0][0] == "/segment"
    assert m.dims == (30, 20)
    assert m.bits[:10].all() and not m.bits[10:].any()


@pytest.mark.parametrize(
    "payload",
    [
        [],
        {"width": 2, "height": 2},
        {"width": 2, "height": 2, "rle": [1, 1]},
        {"width": 0, "height": 2, "rle": [0]},
        {"width": 2, "height": 2, "rle": "04"},
    ],
)
def test_malformed_mask_responses(payload):
    with pytest.raises(ProtocolError):
        decode_mask_response(payload)


def test_remote_http_error_and_unreachable():
    with json_server(lambda p, b: (500, {})) as (url, _):
        with pytest.raises(BackendError):
            RemoteBackend(url).segment(_req())
    with pytest.raises(BackendError):
        RemoteBackend("http://127.0.0.1:1", timeout=2.0).segment(_req())


def test_descriptor_factory():
    assert isinstance(seg_backend_from_descriptor({"kind": "full"}), FullCropBackend)
    with pytest.raises(ConfigurationError):
        seg_backend_from_descriptor({"kind": "oracle"})
    with pytest.raises(ConfigurationError):
        seg_backend_from_descriptor({"kind": "sam"})
