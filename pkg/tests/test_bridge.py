import socket
import struct
import threading
from pathlib import Path

import numpy as np
import pytest

from mupax.bridge import (
    BridgeConnection,
    BridgePredictor,
    decode_eval_request,
    decode_eval_response,
    decode_frame,
    decode_hello_ack,
    encode_error,
    encode_eval_request,
    encode_eval_response,
    encode_frame,
    encode_hello,
    encode_hello_ack,
    read_frame,
    FRAME_ERROR,
    FRAME_EVAL_REQUEST,
    FRAME_EVAL_RESPONSE,
    FRAME_HELLO,
    FRAME_HELLO_ACK,
)
from mupax.chunking import SelectionVector, apply_mask, build_grid
from mupax.errors import (
    ConnectionLostError,
    EmptyBatchError,
    MixedShapesError,
    ProtocolError,
    ServerError,
)
from mupax.models import PlantedModelSpec, PlantedPredictor
from mupax.tensor_io import InputTensor

GOLDEN = Path(__file__).parent / "golden"


# --------------------------------------------------------------------------
# frame codec and golden fixtures
# --------------------------------------------------------------------------

def test_eval_request_golden_bytes():
    tensor = InputTensor.from_array(np.zeros(1, dtype=np.float32))
    assert encode_eval_request(0, [tensor]) == (GOLDEN / "eval_req_0.bin").read_bytes()


def test_packaged_goldens_match_test_fixtures():
    # the same fixtures ship as package data for the live conformance check
    from importlib import resources

    pkg = resources.files("mupax") / "golden"
    for path in sorted(GOLDEN.glob("*.bin")):
        assert (pkg / path.name).read_bytes() == path.read_bytes()


def test_eval_request_golden_matches_hand_layout():
    # length prefix | MPX1 | type 1 | u64 id | u16 batch | tensor body
    body = (
        b"MPX1"
        + struct.pack("<BQ", 1, 0)
        + struct.pack("<H", 1)
        + struct.pack("<BB", 1, 1)
        + struct.pack("<I", 1)
        + struct.pack("<f", 0.0)
    )
    expected = struct.pack("<I", len(body)) + body
    assert (GOLDEN / "eval_req_0.bin").read_bytes() == expected
    assert len(expected) == 29


def test_golden_frames_decode_and_reencode():
    cases = {
        "eval_req_0.bin": (FRAME_EVAL_REQUEST, 0),
        "eval_resp_7.bin": (FRAME_EVAL_RESPONSE, 7),
        "hello.bin": (FRAME_HELLO, 0),
        "hello_ack_b2.bin": (FRAME_HELLO_ACK, 0),
        "error_9.bin": (FRAME_ERROR, 9),
    }
    for name, (expect_type, expect_id) in cases.items():
        blob = (GOLDEN / name).read_bytes()
        (length,) = struct.unpack_from("<I", blob, 0)
        assert length == len(blob) - 4
        frame_type, request_id, payload = decode_frame(blob[4:])
        assert (frame_type, request_id) == (expect_type, expect_id)
        assert encode_frame(frame_type, request_id, payload) == blob


def test_golden_payload_contents():
    _, _, payload = decode_frame((GOLDEN / "eval_resp_7.bin").read_bytes()[4:])
    assert np.array_equal(decode_eval_response(payload), [0.0, 2.5])
    _, _, payload = decode_frame((GOLDEN / "hello_ack_b2.bin").read_bytes()[4:])
    assert decode_hello_ack(payload) == 2
    _, _, payload = decode_frame((GOLDEN / "error_9.bin").read_bytes()[4:])
    assert payload == b"batch too large"
    _, _, payload = decode_frame((GOLDEN / "eval_req_0.bin").read_bytes()[4:])
    batch = decode_eval_request(payload)
    assert len(batch) == 1
    assert batch[0].shape == (1,)
    assert batch[0].values[0] == 0.0


def test_request_roundtrip_random_batches():
    rng = np.random.default_rng(19)
    for _ in range(20):
        shape = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
        count = int(rng.integers(1, 6))
        batch = [
            InputTensor.from_array(
                rng.uniform(0, 9, int(np.prod(shape))).astype(np.float32).reshape(shape)
            )
            for _ in range(count)
        ]
        frame = encode_eval_request(3, batch)
        frame_type, rid, payload = decode_frame(frame[4:])
        assert (frame_type, rid) == (FRAME_EVAL_REQUEST, 3)
        back = decode_eval_request(payload)
        assert len(back) == count
        for a, b in zip(batch, back):
            assert a.shape == b.shape
            assert np.array_equal(a.values, b.values)


def test_bad_magic_rejected():
    frame = bytearray(encode_hello(0))
    frame[4:8] = b"XXXX"
    with pytest.raises(ProtocolError):
        decode_frame(bytes(frame[4:]))


def test_empty_and_mixed_batches_rejected():
    with pytest.raises(EmptyBatchError):
        encode_eval_request(0, [])
    with pytest.raises(MixedShapesError):
        encode_eval_request(
            0,
            [InputTensor.from_array([1.0]), InputTensor.from_array([1.0, 2.0])],
        )


# --------------------------------------------------------------------------
# loopback server
# --------------------------------------------------------------------------

class LoopbackServer(threading.Thread):
    """Minimal in-test bridge server; loss = sum of values."""

    def __init__(self, max_batch=32, fail_after=None, predictor=None):
        super().__init__(daemon=True)
        self.max_batch = max_batch
        self.fail_after = fail_after
        self.predictor = predictor
        self.request_count = 0
        self._sock = socket.create_server(("127.0.0.1", 0))
        self.port = self._sock.getsockname()[1]
        self._stop = threading.Event()

    def run(self):
        self._sock.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            threading.Thread(target=self._serve, args=(conn,), daemon=True).start()

    def _serve(self, conn):
        try:
            while True:
                frame_type, rid, payload = read_frame(conn)
                if frame_type == FRAME_HELLO:
                    conn.sendall(encode_hello_ack(rid, self.max_batch))
                    continue
                if frame_type != FRAME_EVAL_REQUEST:
                    conn.sendall(encode_error(rid, f"unexpected type {frame_type}"))
                    return
                self.request_count += 1
                if self.fail_after is not None and self.request_count > self.fail_after:
                    conn.close()
                    return
                batch = decode_eval_request(payload)
                if len(batch) > self.max_batch:
                    conn.sendall(encode_error(rid, "batch too large"))
                    return
                if self.predictor is not None:
                    losses = self.predictor.evaluate_tensors(batch)
                else:
                    losses = [float(t.values.astype(np.float64).sum()) for t in batch]
                conn.sendall(encode_eval_response(rid, losses))
        except (ConnectionLostError, ProtocolError, OSError):
            pass
        finally:
            conn.close()

    def stop(self):
        self._stop.set()
        self._sock.close()


@pytest.fixture
def echo_server():
    server = LoopbackServer()
    server.start()
    yield server
    server.stop()


def test_loopback_zero_tensors_zero_losses(echo_server):
    conn = BridgeConnection("127.0.0.1", echo_server.port)
    batch = [InputTensor.from_array(np.zeros(4, dtype=np.float32)) for _ in range(5)]
    assert conn.evaluate(batch) == [0.0] * 5
    conn.close()


def test_batch_split_respects_server_limit():
    server = LoopbackServer(max_batch=2)
    server.start()
    try:
        conn = BridgeConnection("127.0.0.1", server.port)
        assert conn.max_batch == 2
        batch = [InputTensor.from_array([float(i)]) for i in range(5)]
        losses = conn.evaluate(batch)
        assert losses == [0.0, 1.0, 2.0, 3.0, 4.0]
        assert server.request_count == 3  # ceil(5 / 2)
        conn.close()
    finally:
        server.stop()


def test_bridge_planted_bit_identical_to_in_process():
    rng = np.random.default_rng(23)
    ref = InputTensor.from_array(rng.uniform(0.2, 2, 16).astype(np.float32))
    grid = build_grid((16,), (2,))
    spec = PlantedModelSpec(
        reference=ref, grid=grid, relevant_chunks=(0, 3), noise_chunks=(5,),
        epsilon=0.125,
    )
    local = PlantedPredictor(spec)
    server = LoopbackServer(predictor=PlantedPredictor(spec))
    server.start()
    try:
        remote = BridgePredictor("127.0.0.1", server.port, input_shape=(16,))
        for _ in range(100):
            bits = rng.integers(0, 2, grid.num_chunks).astype(bool)
            masked = apply_mask(ref, SelectionVector(bits=bits), grid)
            a = local.evaluate_one(masked)
            b = remote.evaluate_one(masked)
            assert a == b  # bit-identical float64 over the wire
        remote.close()
    finally:
        server.stop()


def test_server_error_surfaces():
    server = LoopbackServer(max_batch=1)
    server.start()
    try:
        conn = BridgeConnection("127.0.0.1", server.port)
        conn.max_batch = 5  # force an oversized request on the wire
        with pytest.raises(ServerError, match="batch too large"):
            conn.evaluate([InputTensor.from_array([1.0]) for _ in range(3)])
        conn.close()
    finally:
        server.stop()


def test_connection_lost_mid_run():
    server = LoopbackServer(fail_after=1)
    server.start()
    try:
        conn = BridgeConnection("127.0.0.1", server.port)
        conn.evaluate([InputTensor.from_array([1.0])])
        with pytest.raises(ConnectionLostError):
            conn.evaluate([InputTensor.from_array([2.0])])
    finally:
        server.stop()


def test_timeout_env_override(monkeypatch):
    from mupax.bridge import bridge_timeout_s

    monkeypatch.setenv("MUPAX_BRIDGE_TIMEOUT_MS", "1500")
    assert bridge_timeout_s() == 1.5
    monkeypatch.delenv("MUPAX_BRIDGE_TIMEOUT_MS")
    assert bridge_timeout_s() == 30.0
