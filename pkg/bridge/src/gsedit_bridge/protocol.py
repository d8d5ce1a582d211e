"""GSGP frame codec, server side.

The bridge deliberately carries its own copy of the wire definitions:
the protocol itself is the contract with clients, not any client
library. Frame: magic "GSGP", version u16 = 1, type u8, payload length
u64, payload; all little-endian.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"GSGP"
VERSION = 1
HEADER = struct.Struct("<4sHBQ")

MSG_GUIDANCE_REQUEST = 1
MSG_GUIDANCE_RESPONSE = 2
MSG_SEGMENT_REQUEST = 3
MSG_SEGMENT_RESPONSE = 4
MSG_ERROR = 255

MAX_PAYLOAD = 1 << 30


class FrameError(Exception):
    """Malformed frame or payload; answered with a type-255 message."""


def pack_frame(msg_type: int, payload: bytes) -> bytes:
    return HEADER.pack(MAGIC, VERSION, msg_type, len(payload)) + payload


def pack_error(message: str) -> bytes:
    return pack_frame(MSG_ERROR, message.encode("utf-8"))


def unpack_header(blob: bytes) -> tuple[int, int, int]:
    """Returns (version, msg_type, payload_length); magic must match."""
    magic, version, msg_type, length = HEADER.unpack(blob)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}")
    if length > MAX_PAYLOAD:
        raise FrameError(f"payload length {length} exceeds limit")
    return version, msg_type, length


def unpack_guidance_request(payload: bytes):
    fixed = struct.Struct("<IIIQI")
    if len(payload) < fixed.size:
        raise FrameError("guidance request payload too short")
    width, height, timestep, seed, plen = fixed.unpack_from(payload)
    offset = fixed.size
    if len(payload) < offset + plen:
        raise FrameError("guidance request prompt truncated")
    try:
        prompt = payload[offset:offset + plen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FrameError(f"prompt is not UTF-8: {exc}") from exc
    offset += plen
    need = width * height * 3 * 4
    if len(payload) - offset != need:
        raise FrameError(
            f"guidance request image bytes {len(payload) - offset} != {need}")
    image = np.frombuffer(payload, dtype="<f4", count=width * height * 3,
                          offset=offset).reshape(height, width, 3)
    return width, height, timestep, seed, prompt, np.asarray(image, np.float64)


def pack_guidance_response(residual: np.ndarray,
                           attention: np.ndarray | None = None) -> bytes:
    body = np.ascontiguousarray(residual, dtype="<f4").tobytes()
    if attention is not None:
        body += b"\x01" + np.ascontiguousarray(attention, dtype="<f4").tobytes()
    else:
        body += b"\x00"
    return pack_frame(MSG_GUIDANCE_RESPONSE, body)


def unpack_segment_request(payload: bytes):
    fixed = struct.Struct("<IIII")
    if len(payload) < fixed.size:
        raise FrameError("segmentation request payload too short")
    width, height, view_id, klen = fixed.unpack_from(payload)
    offset = fixed.size
    if len(payload) < offset + klen:
        raise FrameError("segmentation request keyword truncated")
    try:
        keyword = payload[offset:offset + klen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FrameError(f"keyword is not UTF-8: {exc}") from exc
    offset += klen

    def read_points(off):
        if len(payload) < off + 4:
            raise FrameError("segmentation request points truncated")
        (count,) = struct.unpack_from("<I", payload, off)
        off += 4
        if count > (len(payload) - off) // 8:
            raise FrameError("segmentation request points truncated")
        pts = [struct.unpack_from("<ff", payload, off + 8 * i)
               for i in range(count)]
        return pts, off + 8 * count

    positives, offset = read_points(offset)
    negatives, offset = read_points(offset)
    if len(payload) < offset + 1:
        raise FrameError("segmentation request missing image flag")
    flag = payload[offset]
    offset += 1
    image = None
    if flag == 1:
        need = width * height * 3 * 4
        if len(payload) - offset != need:
            raise FrameError("segmentation request image truncated")
        image = np.frombuffer(payload, dtype="<f4", count=width * height * 3,
                              offset=offset).reshape(height, width, 3)
        image = np.asarray(image, np.float64)
    elif flag != 0:
        raise FrameError(f"bad has_image flag {flag}")
    return width, height, view_id, keyword, positives, negatives, image


def pack_segment_response(mask: np.ndarray) -> bytes:
    return pack_frame(MSG_SEGMENT_RESPONSE,
                      np.ascontiguousarray(mask, dtype="<f4").tobytes())
