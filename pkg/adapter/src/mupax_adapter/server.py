"""Bridge server: one handler per connection, one request in flight.

Protocol behavior: Hello is answered with HelloAck carrying the batch
limit; EvalRequest with EvalResponse (losses in request order); batches
over the limit and model failures get an Error frame on the same
connection; undecodable bytes get an Error frame and the connection is
closed. The user callable is invoked from one handler at a time unless
``reentrant`` is set.
"""

from __future__ import annotations

import socketserver
import threading
from dataclasses import dataclass, field

import numpy as np

from . import protocol


@dataclass
class AdapterConfig:
    port: int = 7341
    host: str = "127.0.0.1"
    max_batch: int = 32
    model: object = None  # callable: float32 (B, *shape) -> B losses
    strict_nonneg: bool = True
    reentrant: bool = False

    def __post_init__(self):
        if self.max_batch < 1:
            raise ValueError("max_batch must be >= 1")
        if self.model is None:
            raise ValueError("a model callable is required")


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        config: AdapterConfig = self.server.config
        sock = self.request
        while True:
            try:
                frame_type, rid, payload = protocol.read_frame(sock)
            except (ConnectionError, OSError):
                return
            except protocol.WireError as exc:
                try:
                    sock.sendall(protocol.build_error(0, f"malformed frame: {exc}"))
                finally:
                    return
            try:
                response = self._respond(config, frame_type, rid, payload)
            except protocol.WireError as exc:
                sock.sendall(protocol.build_error(rid, f"malformed frame: {exc}"))
                return
            try:
                sock.sendall(response)
            except OSError:
                return

    def _respond(self, config, frame_type, rid, payload) -> bytes:
        if frame_type == protocol.T_HELLO:
            return protocol.build_hello_ack(rid, config.max_batch)
        if frame_type != protocol.T_EVAL_REQUEST:
            return protocol.build_error(rid, f"unexpected frame type {frame_type}")
        shape, batch = protocol.parse_eval_request(payload)
        if batch.shape[0] > config.max_batch:
            return protocol.build_error(rid, "batch too large")
        if config.strict_nonneg and float(batch.min()) < 0.0:
            return protocol.build_error(rid, "negative value in input tensor")
        try:
            if config.reentrant:
                losses = config.model(batch)
            else:
                with self.server.model_lock:
                    losses = config.model(batch)
            losses = np.asarray(losses, dtype=np.float64).reshape(-1)
            if losses.size != batch.shape[0]:
                raise ValueError(
                    f"model returned {losses.size} losses for {batch.shape[0]} inputs"
                )
            if not np.all(np.isfinite(losses)) or float(losses.min()) < 0.0:
                raise ValueError("model returned a non-finite or negative loss")
        except Exception as exc:  # surfaced to the client as an Error frame
            return protocol.build_error(rid, str(exc))
        return protocol.build_eval_response(rid, losses)


class BridgeServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, config: AdapterConfig):
        super().__init__((config.host, config.port), _Handler)
        self.config = config
        self.model_lock = threading.Lock()

    @property
    def bound_port(self) -> int:
        return self.server_address[1]


def serve(config: AdapterConfig, ready_callback=None):
    """Run until terminated; ``ready_callback(port)`` fires once bound."""
    with BridgeServer(config) as server:
        if ready_callback is not None:
            ready_callback(server.bound_port)
        server.serve_forever()
