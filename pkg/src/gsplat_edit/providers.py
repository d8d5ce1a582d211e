"""Wire-backed segmentation provider speaking the GSGP protocol."""

from __future__ import annotations

import numpy as np

from . import protocol
from .errors import ProtocolError, TransportError
from .images import ImageBuffer
from .localize import MaskBuffer, PointPrompts, SegmentationProvider


class WireSegmenter(SegmentationProvider):
    """Delegates segmentation queries to a remote GSGP endpoint.

    Point prompts cross the wire as (x, y) pixel coordinates; the masks
    come back as soft grids at the view resolution.
    """

    def __init__(self, endpoint: protocol.Endpoint,
                 resolution: tuple[int, int] | None = None):
        self.endpoint = endpoint
        # (height, width) fallback when no image accompanies the query
        self.resolution = resolution

    def _query(self, view_id: int, keyword: str, prompts: PointPrompts | None,
               image: ImageBuffer | None) -> MaskBuffer:
        if image is not None:
            height, width = image.height, image.width
            pixels = image.data
        elif self.resolution is not None:
            height, width = self.resolution
            pixels = None
        else:
            raise TransportError(
                "wire segmentation needs an image or a configured resolution")
        positives = [] if prompts is None else \
            [(c + 0.5, r + 0.5) for r, c in prompts.positives]
        negatives = [] if prompts is None else \
            [(c + 0.5, r + 0.5) for r, c in prompts.negatives]
        frame = protocol.encode_segment_request(
            width, height, view_id, keyword, positives, negatives, pixels)
        msg_type, payload = protocol.call(self.endpoint, frame)
        if msg_type == protocol.MSG_ERROR:
            raise TransportError(
                f"segmentation endpoint error: "
                f"{payload.decode('utf-8', 'replace')}")
        if msg_type != protocol.MSG_SEGMENT_RESPONSE:
            raise ProtocolError(f"unexpected message type {msg_type}")
        mask = protocol.decode_segment_response(payload, width, height)
        return MaskBuffer(grid=np.asarray(mask, dtype=np.float64),
                          view_id=view_id)

    def segment_keyword(self, view_id, keyword, image=None):
        mask = self._query(view_id, keyword, None, image)
        return None if mask.empty else mask

    def segment_points(self, view_id, keyword, prompts, image=None):
        return self._query(view_id, keyword, prompts, image)
