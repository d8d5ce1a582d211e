"""Float image buffers and the PFM / PNG file formats.

PFM is the interchange format for every float grid (renders, attention
maps, masks): little-endian, scale -1.0, rows stored bottom-to-top per
the format convention. PNG is export-only, for human-viewable snapshots
(clamped to [0, 1] then quantized to 8 bits).

Buffers are float32 on disk. In memory they may be float64 — the
renderer works in double precision so that analytic gradients survive a
finite-difference comparison — and are converted on save.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractViolation, ParseError


@dataclass
class ImageBuffer:
    """Row-major float image, 1 or 3 channels, values finite.

    data has shape (height, width, channels). Rendered RGB stays in
    [0, 1]; gradient and residual buffers may hold any finite values.
    """

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ContractViolation(
                f"image must be (H, W, 1|3), got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ContractViolation("image contains NaN or Inf")
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        self.data = data

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def copy(self) -> "ImageBuffer":
        return ImageBuffer(self.data.copy())

    def same_shape(self, other: "ImageBuffer") -> bool:
        return self.data.shape == other.data.shape


def write_pfm(path, data: np.ndarray) -> None:
    """Write a float grid as PFM (little-endian, scale -1.0).

    data: (H, W) or (H, W, 1) for grayscale, (H, W, 3) for color.
    """
    data = np.asarray(data)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    if data.ndim == 2:
        header = b"Pf\n"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF\n"
    else:
        raise ContractViolation(f"cannot write PFM with shape {data.shape}")
    h, w = data.shape[0], data.shape[1]
    payload = np.flipud(data).astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(payload)


def read_pfm(path) -> np.ndarray:
    """Read a PFM file; returns (H, W) or (H, W, 3) float32."""
    path = Path(path)
    blob = path.read_bytes()

    def next_token(pos):
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(f"truncated PFM header in {path}", offset=start)
        return blob[start:pos], pos

    magic, pos = next_token(0)
    if magic == b"PF":
        channels = 3
    elif magic == b"Pf":
        channels = 1
    else:
        raise ParseError(f"not a PFM file: {path}", offset=0)
    wtok, pos = next_token(pos)
    htok, pos = next_token(pos)
    stok, pos = next_token(pos)
    try:
        w, h, scale = int(wtok), int(htok), float(stok)
    except ValueError as exc:
        raise ParseError(f"bad PFM header in {path}: {exc}", offset=pos) from exc
    pos += 1  # single whitespace byte after the scale line
    endian = "<" if scale < 0 else ">"
    count = w * h * channels
    expected = count * 4
    if len(blob) - pos < expected:
        raise ParseError(
            f"PFM payload truncated in {path}: need {expected} bytes, "
            f"have {len(blob) - pos}", offset=pos)
    data = np.frombuffer(blob, dtype=f"{endian}f4", count=count, offset=pos)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return np.flipud(data.reshape(shape)).astype(np.float32).copy()


def write_png(path, data: np.ndarray) -> None:
    """Export a float image as 8-bit PNG, clamping to [0, 1] first."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    quant = np.round(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)
    if quant.ndim == 2:
        color_type, rows = 0, quant[:, :, None]
    elif quant.ndim == 3 and quant.shape[2] == 3:
        color_type, rows = 2, quant
    else:
        raise ContractViolation(f"cannot write PNG with shape {data.shape}")
    h, w = rows.shape[0], rows.shape[1]
    # filter byte 0 (None) per scanline
    raw = b"".join(b"\x00" + rows[r].tobytes() for r in range(h))

    def chunk(tag: bytes, body: bytes) -> bytes:
        return (struct.pack(">I", len(body)) + tag + body
                + struct.pack(">I", zlib.crc32(tag + body)))

    ihdr = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    png = (b"\x89PNG\r\n\x1a\n"
           + chunk(b"IHDR", ihdr)
           + chunk(b"IDAT", zlib.compress(raw, 9))
           + chunk(b"IEND", b""))
    Path(path).write_bytes(png)


def load_image(path) -> ImageBuffer:
    return ImageBuffer(read_pfm(path))


def save_image(path, image: ImageBuffer) -> None:
    write_pfm(path, image.data.astype(np.float32))
