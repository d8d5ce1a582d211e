"""Score-distillation guidance providers and the per-pixel gradient.

A guidance provider turns a rendered view plus a text prompt into a
per-pixel noise residual; the optimizer multiplies it by the timestep
weight and feeds it to the rasterizer backward pass. Two providers ship:
a synthetic oracle whose residual is strength * (image - target), making
descent exactly gradient descent on a scaled L2 objective (closed-form
convergence checks), and a remote provider speaking the GSGP protocol.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import protocol
from .errors import ContractViolation, ProtocolError, TransportError
from .images import ImageBuffer
from .localize import AttentionMap


@dataclass
class NoiseSchedule:
    """Timestep range and weighting for guidance samples.

    The default weight is the constant 1, which keeps oracle-driven test
    objectives exactly analyzable; real diffusion backends may supply any
    nonnegative weighting.
    """

    t_min: int = 20
    t_max: int = 980
    weight_fn: Callable[[int], float] = field(default=lambda t: 1.0)

    def weight(self, t: int) -> float:
        w = float(self.weight_fn(t))
        if not np.isfinite(w) or w < 0:
            raise ContractViolation(f"weight w({t}) = {w} must be finite, >= 0")
        return w

    def sample_t(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.t_min, self.t_max + 1))


@dataclass
class GuidanceRequest:
    image: ImageBuffer
    prompt: str
    timestep: int
    noise_seed: int

    def __post_init__(self):
        if self.image.channels != 3:
            raise ContractViolation("guidance requests carry RGB images")


@dataclass
class GuidanceResponse:
    residual: ImageBuffer
    attention: AttentionMap | None = None


def sds_gradient(response: GuidanceResponse, schedule: NoiseSchedule,
                 t: int) -> ImageBuffer:
    """Per-pixel guidance gradient: the timestep weight times the residual.

    The parameter chain beyond the image is applied downstream by the
    rasterizer backward pass.
    """
    if not schedule.t_min <= t <= schedule.t_max:
        raise ContractViolation(
            f"timestep {t} outside [{schedule.t_min}, {schedule.t_max}]")
    return ImageBuffer(schedule.weight(t) * response.residual.data)


def sds_loss_value(response: GuidanceResponse, schedule: NoiseSchedule,
                   t: int) -> float:
    """Weighted mean squared residual; for logging, not differentiated."""
    return schedule.weight(t) * float(np.mean(response.residual.data ** 2))


def oracle_guidance(request: GuidanceRequest, target: ImageBuffer,
                    strength: float = 1.0) -> GuidanceResponse:
    """Synthetic guidance pulling the render toward a target image.

    residual = strength * (image - target), so following the induced
    gradient descends 0.5 * strength * |I - target|^2 scaled by the
    timestep weight. The attention output is the normalized luminance of
    |image - target|, which lets relocalization run end to end.
    """
    if request.image.data.shape != target.data.shape:
        raise ContractViolation(
            f"target shape {target.data.shape} does not match request "
            f"{request.image.data.shape}")
    diff = request.image.data.astype(np.float64) - target.data
    residual = strength * diff
    lum = np.mean(np.abs(diff), axis=2)
    peak = float(lum.max(initial=0.0))
    attn = lum / peak if peak > 0 else np.zeros_like(lum)
    return GuidanceResponse(
        residual=ImageBuffer(residual),
        attention=AttentionMap(grid=attn, view_id=-1, keyword=""))


def remote_guidance(request: GuidanceRequest, endpoint: protocol.Endpoint
                    ) -> GuidanceResponse:
    """Obtain guidance over the wire; retries once on transport failure."""
    img = request.image
    frame = protocol.encode_guidance_request(
        img.width, img.height, request.timestep, request.noise_seed,
        request.prompt, img.data)
    msg_type, payload = protocol.call(endpoint, frame)
    if msg_type == protocol.MSG_ERROR:
        raise TransportError(
            f"guidance endpoint error: {payload.decode('utf-8', 'replace')}")
    if msg_type != protocol.MSG_GUIDANCE_RESPONSE:
        raise ProtocolError(f"unexpected message type {msg_type}")
    residual, attention = protocol.decode_guidance_response(
        payload, img.width, img.height)
    if residual.shape != img.data.shape:
        raise ContractViolation(
            f"residual shape {residual.shape} != request {img.data.shape}")
    attn_map = None
    if attention is not None:
        attn_map = AttentionMap(grid=attention, view_id=-1,
                                keyword=request.prompt)
    return GuidanceResponse(residual=ImageBuffer(residual), attention=attn_map)


class GuidanceProvider:
    """Callable guidance source bound to run-level configuration."""

    def __call__(self, request: GuidanceRequest, view_id: int
                 ) -> GuidanceResponse:
        raise NotImplementedError


class OracleProvider(GuidanceProvider):
    """Pulls each view toward a fixed per-view target image."""

    def __init__(self, targets: dict[int, ImageBuffer], strength: float = 1.0):
        self.targets = targets
        self.strength = strength

    def __call__(self, request, view_id):
        try:
            target = self.targets[view_id]
        except KeyError:
            raise ContractViolation(f"oracle has no target for view {view_id}")
        response = oracle_guidance(request, target, self.strength)
        if response.attention is not None:
            response.attention.view_id = view_id
        return response

    def attention_map(self, view_id: int, keyword: str,
                      rendered: ImageBuffer) -> AttentionMap:
        """Relocalization hook: attention from the current render."""
        diff = np.mean(np.abs(rendered.data.astype(np.float64)
                              - self.targets[view_id].data), axis=2)
        peak = float(diff.max(initial=0.0))
        grid = diff / peak if peak > 0 else np.zeros_like(diff)
        return AttentionMap(grid=grid, view_id=view_id, keyword=keyword)


class WireProvider(GuidanceProvider):
    """Delegates guidance to a GSGP endpoint."""

    def __init__(self, endpoint: protocol.Endpoint, keyword: str = ""):
        self.endpoint = endpoint
        self.keyword = keyword
        self.last_attention: dict[int, AttentionMap] = {}

    def __call__(self, request, view_id):
        response = remote_guidance(request, self.endpoint)
        if response.attention is not None:
            response.attention.view_id = view_id
            self.last_attention[view_id] = response.attention
        return response

    def attention_map(self, view_id, keyword, rendered):
        cached = self.last_attention.get(view_id)
        if cached is None:
            raise ContractViolation(
                f"no attention cached for view {view_id}; the endpoint did "
                f"not return attention maps")
        return cached
