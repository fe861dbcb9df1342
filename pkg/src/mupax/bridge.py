"""Wire protocol for evaluating losses on an external frozen model.

Frame grammar (all integers little-endian):

    frame    := u32 length | body            (length = byte count of body)
    body     := "MPX1" | u8 type | u64 request_id | payload

    type 1 EvalRequest   payload = u16 batch_size | batch_size tensor bodies
    type 2 EvalResponse  payload = u16 batch_size | batch_size f64 losses
    type 3 Error         payload = utf-8 message (rest of body)
    type 4 Hello         payload = empty
    type 5 HelloAck      payload = u16 max_batch

A tensor body is an MPXT file without its 4-byte magic: u8 version=1,
u8 rank, rank u32 extents, float32 values row-major.

One request is in flight per connection; response request_ids must match.
Parallelism comes from opening one connection per worker. Failed requests
surface as errors; there are no silent retries, because attribution runs
must be exact rather than best-effort.
"""

from __future__ import annotations

import os
import socket
import struct
import threading

import numpy as np

from .errors import (
    ConnectionLostError,
    EmptyBatchError,
    MixedShapesError,
    ProtocolError,
    ServerError,
    TimeoutError,
)
from .models import Predictor, check_losses
from .tensor_io import InputTensor, decode_tensor_body, encode_tensor_body

BRIDGE_MAGIC = b"MPX1"
FRAME_EVAL_REQUEST = 1
FRAME_EVAL_RESPONSE = 2
FRAME_ERROR = 3
FRAME_HELLO = 4
FRAME_HELLO_ACK = 5

DEFAULT_PORT = 7341
DEFAULT_TIMEOUT_S = 30.0
TIMEOUT_ENV = "MUPAX_BRIDGE_TIMEOUT_MS"
MAX_FRAME_BYTES = 1 << 28


def bridge_timeout_s() -> float:
    raw = os.environ.get(TIMEOUT_ENV)
    if raw:
        try:
            return max(0.001, float(raw) / 1000.0)
        except ValueError:
            pass
    return DEFAULT_TIMEOUT_S


# --------------------------------------------------------------------------
# frame codec
# --------------------------------------------------------------------------

def encode_frame(frame_type: int, request_id: int, payload: bytes = b"") -> bytes:
    body = BRIDGE_MAGIC + struct.pack("<BQ", frame_type, request_id) + payload
    return struct.pack("<I", len(body)) + body


def decode_frame(body: bytes) -> tuple[int, int, bytes]:
    """Split a frame body (after the length prefix) into (type, id, payload)."""
    if len(body) < 13:
        raise ProtocolError(f"frame body too short: {len(body)} bytes")
    if body[:4] != BRIDGE_MAGIC:
        raise ProtocolError(f"bad frame magic {body[:4]!r}")
    frame_type, request_id = struct.unpack_from("<BQ", body, 4)
    if frame_type not in (
        FRAME_EVAL_REQUEST, FRAME_EVAL_RESPONSE, FRAME_ERROR,
        FRAME_HELLO, FRAME_HELLO_ACK,
    ):
        raise ProtocolError(f"unknown frame type {frame_type}")
    return frame_type, request_id, body[13:]


def encode_eval_request(request_id: int, batch: list[InputTensor]) -> bytes:
    if not batch:
        raise EmptyBatchError("evaluation batch is empty")
    shape = batch[0].shape
    for t in batch[1:]:
        if t.shape != shape:
            raise MixedShapesError(f"mixed shapes in batch: {shape} vs {t.shape}")
    if len(batch) > 0xFFFF:
        raise ProtocolError("batch size exceeds u16")
    payload = struct.pack("<H", len(batch)) + b"".join(
        encode_tensor_body(t) for t in batch
    )
    return encode_frame(FRAME_EVAL_REQUEST, request_id, payload)


def decode_eval_request(payload: bytes) -> list[InputTensor]:
    if len(payload) < 2:
        raise ProtocolError("truncated eval request")
    (count,) = struct.unpack_from("<H", payload, 0)
    if count == 0:
        raise EmptyBatchError("evaluation batch is empty")
    tensors = []
    pos = 2
    for _ in range(count):
        tensor, pos = decode_tensor_body(payload, pos)
        tensors.append(tensor)
    if pos != len(payload):
        raise ProtocolError(f"{len(payload) - pos} trailing bytes in eval request")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise MixedShapesError("mixed shapes in batch")
    return tensors


def encode_eval_response(request_id: int, losses) -> bytes:
    losses = [float(x) for x in losses]
    payload = struct.pack("<H", len(losses)) + struct.pack(f"<{len(losses)}d", *losses)
    return encode_frame(FRAME_EVAL_RESPONSE, request_id, payload)


def decode_eval_response(payload: bytes) -> np.ndarray:
    if len(payload) < 2:
        raise ProtocolError("truncated eval response")
    (count,) = struct.unpack_from("<H", payload, 0)
    if len(payload) != 2 + 8 * count:
        raise ProtocolError("eval response length does not match its count")
    return np.frombuffer(payload, dtype="<f8", count=count, offset=2).copy()


def encode_error(request_id: int, message: str) -> bytes:
    return encode_frame(FRAME_ERROR, request_id, message.encode("utf-8"))


def encode_hello(request_id: int = 0) -> bytes:
    return encode_frame(FRAME_HELLO, request_id)


def encode_hello_ack(request_id: int, max_batch: int) -> bytes:
    return encode_frame(FRAME_HELLO_ACK, request_id, struct.pack("<H", max_batch))


def decode_hello_ack(payload: bytes) -> int:
    if len(payload) != 2:
        raise ProtocolError("hello-ack payload must be exactly u16 max_batch")
    (max_batch,) = struct.unpack("<H", payload)
    if max_batch < 1:
        raise ProtocolError("server advertised max batch 0")
    return max_batch


# --------------------------------------------------------------------------
# blocking client
# --------------------------------------------------------------------------

def read_exact(sock: socket.socket, count: int) -> bytes:
    chunks = []
    remaining = count
    while remaining:
        try:
            chunk = sock.recv(remaining)
        except socket.timeout:
            raise TimeoutError("timed out waiting for bridge response") from None
        except OSError as exc:
            raise ConnectionLostError(f"bridge connection lost: {exc}") from None
        if not chunk:
            raise ConnectionLostError("bridge connection closed by peer")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> tuple[int, int, bytes]:
    (length,) = struct.unpack("<I", read_exact(sock, 4))
    if length < 13 or length > MAX_FRAME_BYTES:
        raise ProtocolError(f"implausible frame length {length}")
    return decode_frame(read_exact(sock, length))


class BridgeConnection:
    """One protocol connection: handshake once, then request/response pairs."""

    def __init__(self, host: str, port: int, timeout_s: float | None = None):
        self.timeout_s = bridge_timeout_s() if timeout_s is None else timeout_s
        try:
            self._sock = socket.create_connection((host, port), timeout=self.timeout_s)
        except socket.timeout:
            raise TimeoutError(f"timed out connecting to {host}:{port}") from None
        except OSError as exc:
            raise ConnectionLostError(f"cannot connect to {host}:{port}: {exc}") from None
        self._sock.settimeout(self.timeout_s)
        self._next_id = 0
        self.max_batch = self._handshake()

    def _send(self, frame: bytes) -> None:
        try:
            self._sock.sendall(frame)
        except socket.timeout:
            raise TimeoutError("timed out sending to bridge") from None
        except OSError as exc:
            raise ConnectionLostError(f"bridge connection lost: {exc}") from None

    def _roundtrip(self, frame: bytes, request_id: int) -> tuple[int, bytes]:
        self._send(frame)
        frame_type, rid, payload = read_frame(self._sock)
        if frame_type == FRAME_ERROR:
            raise ServerError(payload.decode("utf-8", "replace"))
        if rid != request_id:
            raise ProtocolError(f"response id {rid} does not match request {request_id}")
        return frame_type, payload

    def _handshake(self) -> int:
        rid = self._take_id()
        frame_type, payload = self._roundtrip(encode_hello(rid), rid)
        if frame_type != FRAME_HELLO_ACK:
            raise ProtocolError(f"expected hello-ack, got frame type {frame_type}")
        return decode_hello_ack(payload)

    def _take_id(self) -> int:
        rid = self._next_id
        self._next_id += 1
        return rid

    def evaluate(self, batch: list[InputTensor]) -> list[float]:
        """Losses for a batch, in batch order; splits over max_batch."""
        if not batch:
            raise EmptyBatchError("evaluation batch is empty")
        out: list[float] = []
        for ofs in range(0, len(batch), self.max_batch):
            part = batch[ofs : ofs + self.max_batch]
            rid = self._take_id()
            frame_type, payload = self._roundtrip(encode_eval_request(rid, part), rid)
            if frame_type != FRAME_EVAL_RESPONSE:
                raise ProtocolError(f"expected eval response, got type {frame_type}")
            losses = decode_eval_response(payload)
            if losses.size != len(part):
                raise ProtocolError(
                    f"response carries {losses.size} losses for {len(part)} inputs"
                )
            out.extend(float(x) for x in losses)
        return out

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


class BridgePredictor(Predictor):
    """Predictor backed by a bridge endpoint.

    Each worker thread lazily opens its own connection (one in-flight
    request per connection), so the engine's worker count doubles as the
    connection-pool size.
    """

    def __init__(self, host: str, port: int, input_shape, timeout_s: float | None = None):
        self.host = host
        self.port = int(port)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.timeout_s = timeout_s
        self.description = f"bridge model at {host}:{port}"
        self._local = threading.local()
        self._pool_lock = threading.Lock()
        self._pool: list[BridgeConnection] = []

    def _connection(self) -> BridgeConnection:
        conn = getattr(self._local, "conn", None)
        if conn is None:
            conn = BridgeConnection(self.host, self.port, self.timeout_s)
            self._local.conn = conn
            with self._pool_lock:
                self._pool.append(conn)
        return conn

    def evaluate_batch(self, batch: np.ndarray) -> np.ndarray:
        tensors = [
            InputTensor(shape=self.input_shape, values=row.reshape(-1))
            for row in np.asarray(batch, dtype=np.float32)
        ]
        losses = self._connection().evaluate(tensors)
        return check_losses(np.array(losses, dtype=np.float64))

    def close(self) -> None:
        with self._pool_lock:
            pool, self._pool = self._pool, []
        for conn in pool:
            conn.close()
