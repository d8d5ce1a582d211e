"""GSGP server: accepts connections, answers guidance and segmentation
requests, and turns every recoverable problem into a type-255 error frame.

One request is in flight per connection; concurrent connections are
accepted but serialized onto the backend through a lock, since a model
backend is not reentrant. Unsupported protocol versions, unknown message
types, and malformed payloads are answered with an error frame whenever
a well-formed frame arrived at all; byte garbage that does not even
carry the magic just closes the connection.
"""

from __future__ import annotations

import socket
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from . import protocol
from .backends import EchoBackend


@dataclass
class BridgeConfig:
    host: str = "127.0.0.1"
    port: int = 7341
    model_id: str = "runwayml/stable-diffusion-v1-5"
    checkpoint: str | None = None
    keyword_tokens: dict[str, str] = field(default_factory=dict)
    device: str = "cpu"
    timeout: float = 120.0
    echo: bool = False
    protocol_version: int = protocol.VERSION  # pinned to 1


class BridgeServer:
    def __init__(self, config: BridgeConfig, backend=None):
        self.config = config
        if backend is None:
            if config.echo:
                backend = EchoBackend()
            else:
                from .backends import DiffusionBackend
                backend = DiffusionBackend(config.model_id, config.checkpoint,
                                           config.device,
                                           config.keyword_tokens)
        self.backend = backend
        self.backend_lock = threading.Lock()
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind((config.host, config.port))
        self.sock.listen(16)
        self.port = self.sock.getsockname()[1]
        self._stop = threading.Event()

    def serve_forever(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self.sock.accept()
            except OSError:
                return
            if self._stop.is_set():
                conn.close()
                return
            threading.Thread(target=self._serve_connection, args=(conn,),
                             daemon=True).start()

    def start_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread

    def stop(self) -> None:
        self._stop.set()
        try:
            socket.create_connection((self.config.host, self.port),
                                     timeout=1.0).close()
        except OSError:
            pass
        self.sock.close()

    def _serve_connection(self, conn: socket.socket) -> None:
        with conn:
            conn.settimeout(self.config.timeout)
            while not self._stop.is_set():
                try:
                    header = _recv_exact(conn, protocol.HEADER.size)
                except (OSError, socket.timeout):
                    return
                if header is None:
                    return
                magic, version, msg_type, length = protocol.HEADER.unpack(header)
                if magic != protocol.MAGIC:
                    return  # not our protocol at all: close
                if length > protocol.MAX_PAYLOAD:
                    try:
                        conn.sendall(protocol.pack_error(
                            f"payload length {length} exceeds limit"))
                    except OSError:
                        pass
                    return
                try:
                    payload = _recv_exact(conn, length)
                except (OSError, socket.timeout):
                    return
                if payload is None:
                    return
                reply = self._handle(version, msg_type, payload)
                try:
                    conn.sendall(reply)
                except OSError:
                    return

    def _handle(self, version: int, msg_type: int, payload: bytes) -> bytes:
        if version != self.config.protocol_version:
            return protocol.pack_error(f"unsupported version {version}")
        try:
            if msg_type == protocol.MSG_GUIDANCE_REQUEST:
                (_w, _h, timestep, seed, prompt,
                 image) = protocol.unpack_guidance_request(payload)
                with self.backend_lock:
                    residual, attention = self.backend.guidance(
                        image, prompt, timestep, seed)
                if residual.shape != image.shape:
                    return protocol.pack_error(
                        f"backend produced residual shape {residual.shape}, "
                        f"expected {image.shape}")
                return protocol.pack_guidance_response(residual, attention)
            if msg_type == protocol.MSG_SEGMENT_REQUEST:
                (width, height, view_id, keyword, positives, negatives,
                 image) = protocol.unpack_segment_request(payload)
                with self.backend_lock:
                    mask = self.backend.segment(width, height, view_id,
                                                keyword, positives,
                                                negatives, image)
                mask = np.asarray(mask)
                if mask.shape != (height, width):
                    return protocol.pack_error(
                        f"backend produced mask shape {mask.shape}, "
                        f"expected {(height, width)}")
                return protocol.pack_segment_response(mask)
            return protocol.pack_error(f"unsupported message type {msg_type}")
        except protocol.FrameError as exc:
            return protocol.pack_error(str(exc))
        except Exception as exc:  # model failures answer 255, never crash
            return protocol.pack_error(f"backend failure: {exc}")


def _recv_exact(conn: socket.socket, count: int) -> bytes | None:
    data = b""
    while len(data) < count:
        chunk = conn.recv(count - len(data))
        if not chunk:
            return None
        data += chunk
    return data
