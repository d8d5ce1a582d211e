import struct
import zlib

import numpy as np
import pytest

from gsplat_edit.errors import ContractViolation, ParseError
from gsplat_edit.images import (ImageBuffer, read_pfm, write_pfm, write_png)


class TestImageBuffer:
    def test_shape_and_channels(self):
        img = ImageBuffer(np.zeros((4, 6, 3)))
        assert (img.height, img.width, img.channels) == (4, 6, 3)

    def test_grayscale_promoted(self):
        img = ImageBuffer(np.zeros((4, 6)))
        assert img.channels == 1

    def test_nan_rejected(self):
        data = np.zeros((2, 2, 3))
        data[0, 0, 0] = np.nan
        with pytest.raises(ContractViolation):
            ImageBuffer(data)

    def test_bad_channel_count_rejected(self):
        with pytest.raises(ContractViolation):
            ImageBuffer(np.zeros((2, 2, 4)))


class TestPfm:
    def test_roundtrip_color(self, tmp_path):
        rng = np.random.default_rng(0)
        data = rng.uniform(-5, 5, size=(7, 9, 3)).astype(np.float32)
        path = tmp_path / "c.pfm"
        write_pfm(path, data)
        np.testing.assert_array_equal(read_pfm(path), data)

    def test_roundtrip_gray(self, tmp_path):
        rng = np.random.default_rng(1)
        data = rng.uniform(size=(5, 4)).astype(np.float32)
        path = tmp_path / "g.pfm"
        write_pfm(path, data)
        np.testing.assert_array_equal(read_pfm(path), data)

    def test_header_matches_convention(self, tmp_path):
        path = tmp_path / "h.pfm"
        write_pfm(path, np.zeros((2, 3, 3), dtype=np.float32))
        blob = path.read_bytes()
        assert blob.startswith(b"PF\n3 2\n-1.0\n")
        assert len(blob) == len(b"PF\n3 2\n-1.0\n") + 2 * 3 * 3 * 4

    def test_rows_stored_bottom_up(self, tmp_path):
        data = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
        path = tmp_path / "b.pfm"
        write_pfm(path, data)
        blob = path.read_bytes()
        payload = np.frombuffer(blob[len(b"Pf\n2 2\n-1.0\n"):], dtype="<f4")
        np.testing.assert_array_equal(payload, [3.0, 4.0, 1.0, 2.0])

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "t.pfm"
        write_pfm(path, np.zeros((4, 4), dtype=np.float32))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ParseError, match="truncated"):
            read_pfm(path)

    def test_not_pfm_rejected(self, tmp_path):
        path = tmp_path / "x.pfm"
        path.write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
        with pytest.raises(ParseError):
            read_pfm(path)


class TestPng:
    def _decode_idat(self, blob):
        assert blob[:8] == b"\x89PNG\r\n\x1a\n"
        pos = 8
        idat = b""
        while pos < len(blob):
            length, tag = struct.unpack(">I4s", blob[pos:pos + 8])
            body = blob[pos + 8:pos + 8 + length]
            crc = struct.unpack(">I", blob[pos + 8 + length:pos + 12 + length])[0]
            assert crc == zlib.crc32(tag + body)
            if tag == b"IDAT":
                idat += body
            pos += 12 + length
        return zlib.decompress(idat)

    def test_png_pixels_quantized(self, tmp_path):
        data = np.array([[[0.0, 0.5, 1.0]]])
        path = tmp_path / "p.png"
        write_png(path, data)
        raw = self._decode_idat(path.read_bytes())
        assert raw == b"\x00" + bytes([0, 128, 255])

    def test_png_clamps(self, tmp_path):
        data = np.array([[[-1.0, 2.0, 0.25]]])
        path = tmp_path / "q.png"
        write_png(path, data)
        raw = self._decode_idat(path.read_bytes())
        assert raw == b"\x00" + bytes([0, 255, 64])
