import struct
from pathlib import Path

import numpy as np
import pytest

from mupax_adapter import protocol

GOLDEN = Path(__file__).resolve().parents[2] / "tests" / "golden"


def test_golden_frames_decode_and_reencode_byte_for_byte():
    expected_types = {
        "eval_req_0.bin": (protocol.T_EVAL_REQUEST, 0),
        "eval_resp_7.bin": (protocol.T_EVAL_RESPONSE, 7),
        "hello.bin": (protocol.T_HELLO, 0),
        "hello_ack_b2.bin": (protocol.T_HELLO_ACK, 0),
        "error_9.bin": (protocol.T_ERROR, 9),
    }
    for name, (want_type, want_id) in expected_types.items():
        blob = (GOLDEN / name).read_bytes()
        (length,) = struct.unpack_from("<I", blob, 0)
        assert length == len(blob) - 4
        frame_type, rid, payload = protocol.parse_frame(blob[4:])
        assert (frame_type, rid) == (want_type, want_id)
        assert protocol.build_frame(frame_type, rid, payload) == blob


def test_golden_eval_request_contents():
    blob = (GOLDEN / "eval_req_0.bin").read_bytes()
    _, _, payload = protocol.parse_frame(blob[4:])
    shape, batch = protocol.parse_eval_request(payload)
    assert shape == (1,)
    assert batch.shape == (1, 1)
    assert batch[0, 0] == 0.0


def test_golden_hello_ack_bytes_reproduced():
    assert protocol.build_hello_ack(0, 2) == (GOLDEN / "hello_ack_b2.bin").read_bytes()


def test_golden_error_bytes_reproduced():
    assert protocol.build_error(9, "batch too large") == (
        GOLDEN / "error_9.bin"
    ).read_bytes()


def test_golden_eval_response_bytes_reproduced():
    assert protocol.build_eval_response(7, [0.0, 2.5]) == (
        GOLDEN / "eval_resp_7.bin"
    ).read_bytes()


def test_tensor_body_roundtrip_random():
    rng = np.random.default_rng(3)
    for _ in range(25):
        shape = tuple(int(x) for x in rng.integers(1, 5, size=rng.integers(1, 4)))
        count = int(rng.integers(1, 5))
        bodies = b""
        rows = []
        for _ in range(count):
            values = rng.uniform(0, 7, int(np.prod(shape))).astype("<f4")
            rows.append(values)
            bodies += (
                struct.pack("<BB", 1, len(shape))
                + struct.pack(f"<{len(shape)}I", *shape)
                + values.tobytes()
            )
        payload = struct.pack("<H", count) + bodies
        got_shape, batch = protocol.parse_eval_request(payload)
        assert got_shape == shape
        for row, values in zip(batch.reshape(count, -1), rows):
            assert np.array_equal(row, values)


def test_malformed_frames_rejected():
    with pytest.raises(protocol.WireError):
        protocol.parse_frame(b"XXXX" + bytes(9))
    with pytest.raises(protocol.WireError):
        protocol.parse_frame(b"MPX1" + bytes(5))  # too short
    with pytest.raises(protocol.WireError):
        protocol.parse_frame(b"MPX1" + struct.pack("<BQ", 99, 0))  # unknown type


def test_eval_request_validation():
    with pytest.raises(protocol.WireError):
        protocol.parse_eval_request(struct.pack("<H", 0))  # empty batch
    good = struct.pack("<BB", 1, 1) + struct.pack("<I", 1) + struct.pack("<f", 1.0)
    other = struct.pack("<BB", 1, 1) + struct.pack("<I", 2) + struct.pack("<2f", 1, 2)
    with pytest.raises(protocol.WireError):
        protocol.parse_eval_request(struct.pack("<H", 2) + good + other)  # mixed
    with pytest.raises(protocol.WireError):
        protocol.parse_eval_request(struct.pack("<H", 1) + good + b"\x00")  # trailing
