"""MPX1 frame codec, implemented from the wire format definition.

Frame: u32 length (little-endian, length of the remainder), then
"MPX1" | u8 type | u64 request_id | payload.

Types: 1 EvalRequest (u16 batch size, then per-tensor bodies),
2 EvalResponse (u16 count, count f64 losses), 3 Error (utf-8 text),
4 Hello (empty), 5 HelloAck (u16 max batch).

A tensor body is u8 version=1 | u8 rank | rank u32 extents | float32
values, row-major (an MPXT file without its 4-byte magic).
"""

from __future__ import annotations

import math
import struct

import numpy as np

MAGIC = b"MPX1"
T_EVAL_REQUEST = 1
T_EVAL_RESPONSE = 2
T_ERROR = 3
T_HELLO = 4
T_HELLO_ACK = 5

KNOWN_TYPES = frozenset((T_EVAL_REQUEST, T_EVAL_RESPONSE, T_ERROR, T_HELLO, T_HELLO_ACK))
MAX_FRAME = 1 << 28
TENSOR_VERSION = 1


class WireError(ValueError):
    """Malformed or implausible bytes on the wire."""


def build_frame(frame_type: int, request_id: int, payload: bytes = b"") -> bytes:
    body = MAGIC + struct.pack("<BQ", frame_type, request_id) + payload
    return struct.pack("<I", len(body)) + body


def parse_frame(body: bytes) -> tuple[int, int, bytes]:
    if len(body) < 13:
        raise WireError(f"frame body too short ({len(body)} bytes)")
    if body[:4] != MAGIC:
        raise WireError(f"bad magic {body[:4]!r}")
    frame_type, request_id = struct.unpack_from("<BQ", body, 4)
    if frame_type not in KNOWN_TYPES:
        raise WireError(f"unknown frame type {frame_type}")
    return frame_type, request_id, body[13:]


def parse_tensor_body(buf: bytes, pos: int) -> tuple[tuple[int, ...], np.ndarray, int]:
    if len(buf) < pos + 2:
        raise WireError("truncated tensor body")
    version, rank = buf[pos], buf[pos + 1]
    if version != TENSOR_VERSION:
        raise WireError(f"unsupported tensor version {version}")
    if rank < 1:
        raise WireError("tensor rank must be >= 1")
    pos += 2
    if len(buf) < pos + 4 * rank:
        raise WireError("truncated extents")
    extents = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    if any(d == 0 for d in extents):
        raise WireError("zero extent")
    count = math.prod(extents)
    if count > MAX_FRAME // 4:
        raise WireError("tensor too large")
    if len(buf) < pos + 4 * count:
        raise WireError("truncated tensor payload")
    values = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).copy()
    if not np.all(np.isfinite(values)):
        raise WireError("non-finite tensor value")
    return tuple(int(d) for d in extents), values, pos + 4 * count


def parse_eval_request(payload: bytes) -> tuple[tuple[int, ...], np.ndarray]:
    """Returns (shape, stacked float32 batch of shape (B, *shape))."""
    if len(payload) < 2:
        raise WireError("truncated eval request")
    (count,) = struct.unpack_from("<H", payload, 0)
    if count == 0:
        raise WireError("empty batch")
    pos = 2
    shape = None
    rows = []
    for _ in range(count):
        tensor_shape, values, pos = parse_tensor_body(payload, pos)
        if shape is None:
            shape = tensor_shape
        elif tensor_shape != shape:
            raise WireError("mixed shapes in batch")
        rows.append(values)
    if pos != len(payload):
        raise WireError("trailing bytes in eval request")
    batch = np.stack(rows).reshape((count,) + shape)
    return shape, batch


def build_eval_response(request_id: int, losses) -> bytes:
    losses = [float(x) for x in losses]
    payload = struct.pack("<H", len(losses)) + struct.pack(f"<{len(losses)}d", *losses)
    return build_frame(T_EVAL_RESPONSE, request_id, payload)


def build_error(request_id: int, message: str) -> bytes:
    return build_frame(T_ERROR, request_id, message.encode("utf-8"))


def build_hello_ack(request_id: int, max_batch: int) -> bytes:
    return build_frame(T_HELLO_ACK, request_id, struct.pack("<H", max_batch))


def read_exact(sock, count: int) -> bytes:
    chunks = []
    remaining = count
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise ConnectionError("peer closed the connection")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(sock) -> tuple[int, int, bytes]:
    (length,) = struct.unpack("<I", read_exact(sock, 4))
    if length < 13 or length > MAX_FRAME:
        raise WireError(f"implausible frame length {length}")
    return parse_frame(read_exact(sock, length))
