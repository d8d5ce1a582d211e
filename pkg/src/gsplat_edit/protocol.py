"""GSGP wire protocol: frame codec and blocking socket client.

Frame layout, little-endian throughout: magic "GSGP", version u16 = 1,
message type u8, payload length u64, payload bytes.

Message types: 1 guidance request, 2 guidance response, 3 segmentation
request, 4 segmentation response, 255 error (UTF-8 message).

Guidance request payload: u32 width, u32 height, u32 timestep, u64 seed,
u32 prompt byte-length, prompt bytes, f32 image data (h*w*3).
Guidance response payload: f32 residual (h*w*3, shape taken from the
request), u8 has_attention, optional f32 attention grid (h*w).
Segmentation request payload: u32 width, u32 height, u32 view_id,
u32 keyword byte-length, keyword bytes, u32 n_positive, n_positive pairs
of f32 (x, y), u32 n_negative, n_negative pairs of f32 (x, y),
u8 has_image, optional f32 image (h*w*3).
Segmentation response payload: f32 soft mask (h*w).
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ProtocolError, TransportError

MAGIC = b"GSGP"
VERSION = 1
HEADER = struct.Struct("<4sHBQ")

MSG_GUIDANCE_REQUEST = 1
MSG_GUIDANCE_RESPONSE = 2
MSG_SEGMENT_REQUEST = 3
MSG_SEGMENT_RESPONSE = 4
MSG_ERROR = 255

MAX_PAYLOAD = 1 << 30


def encode_frame(msg_type: int, payload: bytes) -> bytes:
    return HEADER.pack(MAGIC, VERSION, msg_type, len(payload)) + payload


def decode_header(blob: bytes) -> tuple[int, int]:
    """Validate a 15-byte header; returns (msg_type, payload_length)."""
    if len(blob) != HEADER.size:
        raise ProtocolError(f"short header: {len(blob)} bytes")
    magic, version, msg_type, length = HEADER.unpack(blob)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"payload length {length} exceeds limit")
    return msg_type, length


def encode_guidance_request(width: int, height: int, timestep: int,
                            seed: int, prompt: str,
                            image: np.ndarray) -> bytes:
    image = np.ascontiguousarray(image, dtype="<f4")
    if image.shape != (height, width, 3):
        raise ProtocolError(f"image shape {image.shape} does not match "
                            f"{(height, width, 3)}")
    prompt_bytes = prompt.encode("utf-8")
    payload = struct.pack("<IIIQI", width, height, timestep, seed,
                          len(prompt_bytes)) + prompt_bytes + image.tobytes()
    return encode_frame(MSG_GUIDANCE_REQUEST, payload)


def decode_guidance_request(payload: bytes):
    fixed = struct.Struct("<IIIQI")
    if len(payload) < fixed.size:
        raise ProtocolError("guidance request payload too short")
    width, height, timestep, seed, plen = fixed.unpack_from(payload)
    offset = fixed.size
    if len(payload) < offset + plen:
        raise ProtocolError("guidance request prompt truncated")
    prompt = payload[offset:offset + plen].decode("utf-8")
    offset += plen
    need = width * height * 3 * 4
    if len(payload) - offset != need:
        raise ProtocolError(
            f"guidance request image bytes {len(payload) - offset} != {need}")
    image = np.frombuffer(payload, dtype="<f4", count=width * height * 3,
                          offset=offset).reshape(height, width, 3)
    return width, height, timestep, seed, prompt, image.astype(np.float64)


def encode_guidance_response(residual: np.ndarray,
                             attention: np.ndarray | None = None) -> bytes:
    residual = np.ascontiguousarray(residual, dtype="<f4")
    body = residual.tobytes()
    if attention is not None:
        attn = np.ascontiguousarray(attention, dtype="<f4")
        body += b"\x01" + attn.tobytes()
    else:
        body += b"\x00"
    return encode_frame(MSG_GUIDANCE_RESPONSE, body)


def decode_guidance_response(payload: bytes, width: int, height: int):
    res_bytes = width * height * 3 * 4
    if len(payload) < res_bytes + 1:
        raise ProtocolError("guidance response payload too short")
    residual = np.frombuffer(payload, dtype="<f4", count=width * height * 3
                             ).reshape(height, width, 3)
    flag = payload[res_bytes]
    attention = None
    if flag == 1:
        attn_bytes = width * height * 4
        if len(payload) != res_bytes + 1 + attn_bytes:
            raise ProtocolError("guidance response attention truncated")
        attention = np.frombuffer(payload, dtype="<f4", count=width * height,
                                  offset=res_bytes + 1).reshape(height, width)
        attention = attention.astype(np.float64)
    elif flag == 0:
        if len(payload) != res_bytes + 1:
            raise ProtocolError("guidance response has trailing bytes")
    else:
        raise ProtocolError(f"bad has_attention flag {flag}")
    return residual.astype(np.float64), attention


def encode_segment_request(width: int, height: int, view_id: int,
                           keyword: str, positives, negatives,
                           image: np.ndarray | None = None) -> bytes:
    kw = keyword.encode("utf-8")
    parts = [struct.pack("<IIII", width, height, view_id, len(kw)), kw]
    parts.append(struct.pack("<I", len(positives)))
    for x, y in positives:
        parts.append(struct.pack("<ff", float(x), float(y)))
    parts.append(struct.pack("<I", len(negatives)))
    for x, y in negatives:
        parts.append(struct.pack("<ff", float(x), float(y)))
    if image is not None:
        img = np.ascontiguousarray(image, dtype="<f4")
        parts.append(b"\x01" + img.tobytes())
    else:
        parts.append(b"\x00")
    return encode_frame(MSG_SEGMENT_REQUEST, b"".join(parts))


def decode_segment_request(payload: bytes):
    fixed = struct.Struct("<IIII")
    if len(payload) < fixed.size:
        raise ProtocolError("segmentation request payload too short")
    width, height, view_id, klen = fixed.unpack_from(payload)
    offset = fixed.size
    if len(payload) < offset + klen + 4:
        raise ProtocolError("segmentation request keyword truncated")
    keyword = payload[offset:offset + klen].decode("utf-8")
    offset += klen

    def read_points(off):
        (count,) = struct.unpack_from("<I", payload, off)
        off += 4
        if count > (len(payload) - off) // 8:
            raise ProtocolError("segmentation request points truncated")
        pts = [struct.unpack_from("<ff", payload, off + 8 * i)
               for i in range(count)]
        return pts, off + 8 * count

    try:
        positives, offset = read_points(offset)
        negatives, offset = read_points(offset)
    except struct.error as exc:
        raise ProtocolError(f"segmentation request malformed: {exc}") from exc
    if len(payload) < offset + 1:
        raise ProtocolError("segmentation request missing image flag")
    flag = payload[offset]
    offset += 1
    image = None
    if flag == 1:
        need = width * height * 3 * 4
        if len(payload) - offset != need:
            raise ProtocolError("segmentation request image truncated")
        image = np.frombuffer(payload, dtype="<f4", count=width * height * 3,
                              offset=offset).reshape(height, width, 3)
        image = image.astype(np.float64)
    elif flag != 0:
        raise ProtocolError(f"bad has_image flag {flag}")
    return width, height, view_id, keyword, positives, negatives, image


def encode_segment_response(mask: np.ndarray) -> bytes:
    return encode_frame(MSG_SEGMENT_RESPONSE,
                        np.ascontiguousarray(mask, dtype="<f4").tobytes())


def decode_segment_response(payload: bytes, width: int, height: int
                            ) -> np.ndarray:
    need = width * height * 4
    if len(payload) != need:
        raise ProtocolError(f"segmentation response bytes {len(payload)} "
                            f"!= {need}")
    mask = np.frombuffer(payload, dtype="<f4", count=width * height
                         ).reshape(height, width)
    return mask.astype(np.float64)


def encode_error(message: str) -> bytes:
    return encode_frame(MSG_ERROR, message.encode("utf-8"))


def read_frame(sock: socket.socket) -> tuple[int, bytes]:
    """Read one frame from a socket; raises on close or malformed data."""
    header = _recv_exact(sock, HEADER.size)
    msg_type, length = decode_header(header)
    payload = _recv_exact(sock, length)
    return msg_type, payload


def _recv_exact(sock: socket.socket, count: int) -> bytes:
    chunks = []
    remaining = count
    while remaining > 0:
        try:
            chunk = sock.recv(min(remaining, 1 << 20))
        except socket.timeout as exc:
            raise TransportError(f"socket timeout after reading "
                                 f"{count - remaining}/{count} bytes") from exc
        except OSError as exc:
            raise TransportError(f"socket error: {exc}") from exc
        if not chunk:
            raise TransportError(
                f"connection closed with {remaining}/{count} bytes pending")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


@dataclass
class Endpoint:
    host: str
    port: int
    timeout: float = 30.0

    @classmethod
    def parse(cls, address: str, timeout: float = 30.0) -> "Endpoint":
        host, _, port = address.rpartition(":")
        if not host or not port.isdigit():
            raise TransportError(f"bad endpoint address {address!r}; "
                                 f"expected host:port")
        return cls(host=host, port=int(port), timeout=timeout)


def call(endpoint: Endpoint, frame: bytes, retries: int = 1
         ) -> tuple[int, bytes]:
    """Send one frame, read one frame back; retries once on transport error."""
    last: Exception | None = None
    for _ in range(retries + 1):
        try:
            with socket.create_connection((endpoint.host, endpoint.port),
                                          timeout=endpoint.timeout) as sock:
                sock.settimeout(endpoint.timeout)
                sock.sendall(frame)
                return read_frame(sock)
        except TransportError as exc:
            last = exc
        except OSError as exc:
            last = TransportError(f"cannot reach {endpoint.host}:"
                                  f"{endpoint.port}: {exc}")
    assert last is not None
    raise last
