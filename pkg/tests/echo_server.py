"""Threaded GSGP echo server used by the transport tests.

Echo contract (the out-of-process bridge honors the same one):
guidance requests come back as responses whose residual equals the
request image with no attention; segmentation requests yield an all-0.5
soft mask; malformed frames or unsupported versions are answered with a
type-255 error when a well-formed reply is possible, otherwise the
connection just closes.
"""

from __future__ import annotations

import socket
import struct
import threading

import numpy as np

from gsplat_edit import protocol


class EchoServer:
    def __init__(self):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind(("127.0.0.1", 0))
        self.sock.listen(8)
        self.port = self.sock.getsockname()[1]
        self.connections = 0
        self._stop = threading.Event()
        self.thread = threading.Thread(target=self._serve, daemon=True)

    def start(self):
        self.thread.start()
        return self

    def stop(self):
        self._stop.set()
        try:
            socket.create_connection(("127.0.0.1", self.port), timeout=1).close()
        except OSError:
            pass
        self.sock.close()

    def _serve(self):
        while not self._stop.is_set():
            try:
                conn, _ = self.sock.accept()
            except OSError:
                return
            if self._stop.is_set():
                conn.close()
                return
            self.connections += 1
            threading.Thread(target=self._handle, args=(conn,),
                             daemon=True).start()

    def _handle(self, conn: socket.socket):
        with conn:
            conn.settimeout(5.0)
            try:
                header = _recv_exact(conn, protocol.HEADER.size)
                if header is None:
                    return
                magic, version, msg_type, length = protocol.HEADER.unpack(header)
                if magic != protocol.MAGIC:
                    return  # not even our protocol: close
                if length > protocol.MAX_PAYLOAD:
                    conn.sendall(protocol.encode_error("payload too large"))
                    return
                payload = _recv_exact(conn, length)
                if payload is None:
                    return
                if version != protocol.VERSION:
                    conn.sendall(protocol.encode_error(
                        f"unsupported version {version}"))
                    return
                if msg_type == protocol.MSG_GUIDANCE_REQUEST:
                    w, h, _, _, _, image = protocol.decode_guidance_request(payload)
                    conn.sendall(protocol.encode_guidance_response(image))
                elif msg_type == protocol.MSG_SEGMENT_REQUEST:
                    w, h, *_ = protocol.decode_segment_request(payload)
                    conn.sendall(protocol.encode_segment_response(
                        np.full((h, w), 0.5)))
                else:
                    conn.sendall(protocol.encode_error(
                        f"unsupported message type {msg_type}"))
            except protocol.ProtocolError as exc:
                try:
                    conn.sendall(protocol.encode_error(str(exc)))
                except OSError:
                    pass
            except (OSError, struct.error):
                pass


def _recv_exact(conn, count):
    data = b""
    while len(data) < count:
        chunk = conn.recv(count - len(data))
        if not chunk:
            return None
        data += chunk
    return data
