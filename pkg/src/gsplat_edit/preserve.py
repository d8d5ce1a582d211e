"""Pixel-level detail preservation.

The pseudo ground truth blends the edit region of the current render
with the untouched region of the original render; the preservation loss
(L1 + structural dissimilarity) then pins the render to that composite.
The pseudo-GT is a constant each iteration: inside the mask it equals the
render by construction, so the loss only constrains the region outside
the mask, which is exactly the part that must not drift.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, NumericAbort
from .images import ImageBuffer
from .localize import MaskBuffer
from .scene import PARAM_GROUPS
from .ssim import ssim_and_grad


def _default_anchor_weights() -> dict[str, float]:
    # Gentle by default: the anchor pull must not fight the guidance to a
    # visible equilibrium offset, only damp drift between generations.
    return {group: 1e-5 for group in PARAM_GROUPS}


@dataclass
class LossWeights:
    lambda_sds: float = 1.0
    lambda_l1: float = 0.8
    lambda_ssim: float = 0.2
    lambda_anchor: dict[str, float] = field(default_factory=_default_anchor_weights)

    def __post_init__(self):
        values = [self.lambda_sds, self.lambda_l1, self.lambda_ssim,
                  *self.lambda_anchor.values()]
        if any(not np.isfinite(v) or v < 0 for v in values):
            raise ContractViolation("loss weights must be finite and >= 0")


@dataclass
class LossReport:
    """Unweighted loss components plus the weighted total."""

    sds: float
    preservation_l1: float
    preservation_dssim: float
    anchor: dict[str, float]
    total: float


def compose_pseudo_gt(mask: MaskBuffer, edited: ImageBuffer,
                      original: ImageBuffer) -> ImageBuffer:
    """Per-pixel blend: mask picks the edit, its complement the original."""
    if edited.data.shape != original.data.shape:
        raise ContractViolation(
            f"edited {edited.data.shape} vs original {original.data.shape}")
    if mask.grid.shape != edited.data.shape[:2]:
        raise ContractViolation(
            f"mask {mask.grid.shape} vs image {edited.data.shape[:2]}")
    if not mask.is_binary:
        raise ContractViolation("pseudo-GT composition needs a binary mask")
    m = mask.grid[:, :, None]
    return ImageBuffer(m * edited.data + (1.0 - m) * original.data)


def preservation_loss(edited: ImageBuffer, pseudo_gt: ImageBuffer,
                      weights: LossWeights
                      ) -> tuple[float, float, float, ImageBuffer]:
    """Weighted L1 + D-SSIM against the pseudo-GT, with analytic gradient.

    Returns (weighted loss, unweighted L1, unweighted D-SSIM, gradient
    w.r.t. the edited image). The gradient treats pseudo_gt as constant.
    """
    if edited.data.shape != pseudo_gt.data.shape:
        raise ContractViolation(
            f"edited {edited.data.shape} vs pseudo-GT {pseudo_gt.data.shape}")
    e = np.asarray(edited.data, dtype=np.float64)
    p = np.asarray(pseudo_gt.data, dtype=np.float64)
    diff = e - p
    l1 = float(np.mean(np.abs(diff)))
    grad = weights.lambda_l1 * np.sign(diff) / diff.size

    dssim = 0.0
    if weights.lambda_ssim > 0.0:
        ssim_val, ssim_grad = ssim_and_grad(e, p)
        dssim = (1.0 - ssim_val) / 2.0
        grad = grad + weights.lambda_ssim * (-0.5) * ssim_grad

    loss = weights.lambda_l1 * l1 + weights.lambda_ssim * dssim
    return loss, l1, dssim, ImageBuffer(grad)


def dssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural dissimilarity (1 - SSIM) / 2 without gradients."""
    from .ssim import ssim as _ssim
    return (1.0 - _ssim(a, b)) / 2.0


def total_loss(sds_value: float, preservation_l1: float,
               preservation_dssim: float, anchor_values: dict[str, float],
               weights: LossWeights) -> LossReport:
    """Assemble the full weighted objective into a report."""
    components = [sds_value, preservation_l1, preservation_dssim,
                  *anchor_values.values()]
    if any(not np.isfinite(v) for v in components):
        raise NumericAbort(
            f"non-finite loss component: sds={sds_value} "
            f"l1={preservation_l1} dssim={preservation_dssim} "
            f"anchor={anchor_values}")
    total = (weights.lambda_sds * sds_value
             + weights.lambda_l1 * preservation_l1
             + weights.lambda_ssim * preservation_dssim
             + sum(weights.lambda_anchor.get(group, 0.0) * value
                   for group, value in anchor_values.items()))
    return LossReport(sds=sds_value, preservation_l1=preservation_l1,
                      preservation_dssim=preservation_dssim,
                      anchor=dict(anchor_values), total=total)
