"""Attention-driven localization of the editable region.

Per view: threshold the keyword's attention map, reject outlier pixels
with DBSCAN, pick point prompts (highest-attention pixels inside the
cluster as positives, lowest-attention pixels outside as negatives),
obtain a binary view mask either from the attention itself (Addition)
or from a promptable segmentation provider (EditExisting), then
back-project all view masks onto the Gaussians to assign binary
editability labels.

The segmentation provider is an interface; tests and desk-scale runs use
OracleSegmenter, which reads ground-truth masks from files. A wire-backed
provider lives in `providers`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .camera import Camera
from .dbscan import dbscan_labels
from .errors import (ContractViolation, DataError, LocalizationError,
                     TransportError)
from .images import ImageBuffer, read_pfm
from .rasterizer import contribution_weights, render_view, visible_mass
from .scene import GaussianScene

VISIBILITY_FLOOR = 1e-6


@dataclass
class AttentionMap:
    """Per-view scalar relevance grid for one prompt keyword.

    Values are normalized into [0, 1] at construction when the source
    grid strays outside that range.
    """

    grid: np.ndarray
    view_id: int
    keyword: str

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=np.float64)
        if grid.ndim != 2:
            raise ContractViolation(f"attention grid must be 2D, got {grid.shape}")
        if not np.all(np.isfinite(grid)):
            raise DataError(f"attention map for view {self.view_id} has "
                            f"non-finite values")
        lo, hi = float(grid.min(initial=0.0)), float(grid.max(initial=0.0))
        if lo < 0.0 or hi > 1.0:
            span = hi - lo
            grid = (grid - lo) / span if span > 0 else np.zeros_like(grid)
        self.grid = grid


@dataclass
class MaskBuffer:
    """Per-view scalar mask; soft in [0, 1] before binarization."""

    grid: np.ndarray
    view_id: int

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 2:
            raise ContractViolation(f"mask grid must be 2D, got {self.grid.shape}")

    @property
    def is_binary(self) -> bool:
        return bool(np.all((self.grid == 0.0) | (self.grid == 1.0)))

    def binarize(self, threshold: float = 0.5) -> "MaskBuffer":
        return MaskBuffer(grid=(self.grid >= threshold).astype(np.float64),
                          view_id=self.view_id)

    def nonzero_binary(self) -> "MaskBuffer":
        return MaskBuffer(grid=(self.grid != 0.0).astype(np.float64),
                          view_id=self.view_id)

    @property
    def empty(self) -> bool:
        return not bool(np.any(self.grid))


class LocalizationMode(Enum):
    ADDITION = "addition"
    EDIT_EXISTING = "edit_existing"


@dataclass
class PointPrompts:
    """Segmentation prompts as (row, col) pixel coordinates.

    positives are ordered by descending attention value; negatives by
    ascending. The two sets are disjoint by construction (inside vs
    outside the clustered mask).
    """

    positives: list[tuple[int, int]]
    negatives: list[tuple[int, int]]


@dataclass
class LocalizeParams:
    keyword: str
    attn_threshold: float = 0.5
    dbscan_eps: float = 2.0
    dbscan_min_pts: int = 5
    weight_threshold: float = 0.6
    iou_floor: float = 0.5
    # At 256 px wide the stock eps/min_pts are appropriate; scale both
    # linearly with image width when working far from that resolution.


class SegmentationProvider:
    """Object segmentation interface standing in for a neural segmenter."""

    def segment_keyword(self, view_id: int, keyword: str,
                        image: ImageBuffer | None = None) -> MaskBuffer | None:
        """Language-driven query; None or an empty mask means "not found"."""
        raise NotImplementedError

    def segment_points(self, view_id: int, keyword: str, prompts: PointPrompts,
                       image: ImageBuffer | None = None) -> MaskBuffer:
        """Point-prompted query; returns a soft mask."""
        raise NotImplementedError


class OracleSegmenter(SegmentationProvider):
    """Reads ground-truth masks from {view_id}_{keyword}.pfm files."""

    def __init__(self, masks_dir):
        self.masks_dir = Path(masks_dir)

    def _path(self, view_id: int, keyword: str) -> Path:
        return self.masks_dir / f"{view_id}_{keyword}.pfm"

    def segment_keyword(self, view_id, keyword, image=None):
        path = self._path(view_id, keyword)
        if not path.exists():
            return None
        return MaskBuffer(grid=read_pfm(path).astype(np.float64), view_id=view_id)

    def segment_points(self, view_id, keyword, prompts, image=None):
        path = self._path(view_id, keyword)
        if not path.exists():
            raise LocalizationError(
                f"oracle has no mask for view {view_id}, keyword {keyword!r}")
        return MaskBuffer(grid=read_pfm(path).astype(np.float64), view_id=view_id)


def load_attention(path, view_id: int, keyword: str) -> AttentionMap:
    return AttentionMap(grid=read_pfm(path).astype(np.float64),
                        view_id=view_id, keyword=keyword)


def filter_attention(amap: AttentionMap, threshold: float) -> MaskBuffer:
    """Zero out attention below the threshold; kept pixels keep their value."""
    if not 0.0 <= threshold <= 1.0:
        raise ContractViolation(f"threshold must be in [0, 1], got {threshold}")
    grid = np.where(amap.grid >= threshold, amap.grid, 0.0)
    return MaskBuffer(grid=grid, view_id=amap.view_id)


def cluster_dbscan(mask: MaskBuffer, eps: float, min_pts: int) -> MaskBuffer:
    """Zero the mask pixels DBSCAN labels as noise; keep every cluster."""
    grid = mask.grid.copy()
    coords = np.argwhere(grid != 0.0)
    if coords.shape[0] == 0:
        return MaskBuffer(grid=grid, view_id=mask.view_id)
    labels = dbscan_labels(coords.astype(np.float64), eps, min_pts)
    noise = coords[labels == -1]
    grid[noise[:, 0], noise[:, 1]] = 0.0
    return MaskBuffer(grid=grid, view_id=mask.view_id)


def select_point_prompts(amap: AttentionMap, clustered: MaskBuffer,
                         n_pos: int = 5, n_neg: int = 3) -> PointPrompts:
    """Pick prompt pixels from the attention ranking.

    Positives: up to n_pos highest-attention pixels inside the clustered
    mask. Negatives: up to n_neg lowest-attention pixels of the full map
    outside it. Ties break by row-major pixel order.
    """
    inside = clustered.grid != 0.0
    if not inside.any():
        raise LocalizationError(
            f"view {amap.view_id}: clustered attention mask is empty")
    h, w = amap.grid.shape
    flat_vals = amap.grid.reshape(-1)

    in_idx = np.flatnonzero(inside.reshape(-1))
    order = np.argsort(-flat_vals[in_idx], kind="stable")[:n_pos]
    positives = [(int(i // w), int(i % w)) for i in in_idx[order]]

    out_idx = np.flatnonzero(~inside.reshape(-1))
    order = np.argsort(flat_vals[out_idx], kind="stable")[:n_neg]
    negatives = [(int(i // w), int(i % w)) for i in out_idx[order]]
    return PointPrompts(positives=positives, negatives=negatives)


@dataclass
class ModeDecision:
    mode: LocalizationMode
    refine: bool
    view_ious: dict[int, float] = field(default_factory=dict)

    def __eq__(self, other):
        if isinstance(other, LocalizationMode):
            return self.mode is other
        return NotImplemented


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = a != 0, b != 0
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return float(np.count_nonzero(a & b) / union)


def decide_mode(seg_provider: SegmentationProvider, views: list[int],
                keyword: str, attention: list[AttentionMap],
                iou_floor: float, attn_threshold: float = 0.5,
                images: dict[int, ImageBuffer] | None = None) -> ModeDecision:
    """Choose between adding a new object and editing an existing one.

    Queries the provider with the keyword per view. If the provider mask
    overlaps the filtered attention (IoU >= iou_floor) on a strict
    majority of views, the object exists and provider masks are trusted.
    Empty provider masks everywhere mean the object is absent: Addition.
    Otherwise the object exists but segmentation is unreliable, so
    EditExisting proceeds through point-prompt refinement.
    """
    amaps = {m.view_id: m for m in attention}
    ious: dict[int, float] = {}
    any_mask = False
    errors: list[Exception] = []
    for view_id in views:
        image = images.get(view_id) if images else None
        try:
            provider_mask = seg_provider.segment_keyword(view_id, keyword, image)
        except Exception as exc:
            errors.append(exc)
            continue
        if provider_mask is None or provider_mask.empty:
            ious[view_id] = 0.0
            continue
        any_mask = True
        amap = amaps.get(view_id)
        if amap is None:
            ious[view_id] = 0.0
            continue
        attn_mask = filter_attention(amap, attn_threshold)
        ious[view_id] = mask_iou(provider_mask.binarize(0.5).grid, attn_mask.grid)
    if len(errors) == len(views):
        # A dead endpoint should surface as a transport problem, not as a
        # generic localization failure.
        if any(isinstance(e, TransportError) for e in errors):
            raise errors[-1]
        raise LocalizationError("segmentation provider failed on every view")
    failures = len(errors)

    n_ok = len(views) - failures
    votes = sum(1 for v in ious.values() if v >= iou_floor)
    if any_mask and votes > n_ok / 2:
        return ModeDecision(LocalizationMode.EDIT_EXISTING, refine=False,
                            view_ious=ious)
    if not any_mask:
        return ModeDecision(LocalizationMode.ADDITION, refine=False,
                            view_ious=ious)
    return ModeDecision(LocalizationMode.EDIT_EXISTING, refine=True,
                        view_ious=ious)


def build_view_mask(mode: LocalizationMode, amap: AttentionMap,
                    clustered: MaskBuffer, prompts: PointPrompts,
                    seg_provider: SegmentationProvider,
                    image: ImageBuffer | None = None) -> MaskBuffer:
    """Final binary mask for one view."""
    if clustered.view_id != amap.view_id:
        raise ContractViolation("attention/cluster view ids disagree")
    if mode is LocalizationMode.ADDITION:
        return clustered.nonzero_binary()
    try:
        soft = seg_provider.segment_points(amap.view_id, amap.keyword,
                                           prompts, image)
    except (LocalizationError, TransportError):
        raise
    except Exception as exc:
        raise LocalizationError(
            f"view {amap.view_id}: segmentation provider failed: {exc}") from exc
    if soft.grid.shape != amap.grid.shape:
        raise LocalizationError(
            f"view {amap.view_id}: provider mask shape {soft.grid.shape} "
            f"does not match view {amap.grid.shape}")
    return soft.binarize(0.5)


def backproject_labels(scene: GaussianScene, cameras: list[Camera],
                       masks: list[MaskBuffer], weight_threshold: float
                       ) -> GaussianScene:
    """Assign editability labels from per-view mask contribution weights.

    A Gaussian counts as visible in a view when its total composited
    contribution exceeds 1e-6 there; its aggregate weight is the mean of
    per-view in-mask fractions over visible views (order-independent),
    and the label is aggregate > weight_threshold.
    """
    if len(cameras) == 0:
        raise LocalizationError("backproject_labels needs at least one view")
    if len(cameras) != len(masks):
        raise ContractViolation("one mask per camera required")
    n = len(scene)
    per_view = np.full((len(cameras), n), np.nan)
    for v, (cam, mask) in enumerate(zip(cameras, masks)):
        render = render_view(scene, cam)
        total = visible_mass(render)
        weights = contribution_weights(render, mask)
        visible = total > VISIBILITY_FLOOR
        per_view[v, visible] = weights[visible]
    counts = np.sum(~np.isnan(per_view), axis=0)
    # Sorting makes the reduction bitwise invariant to view permutation.
    ordered = np.sort(per_view, axis=0)
    sums = np.nansum(ordered, axis=0)
    aggregate = np.zeros(n)
    seen = counts > 0
    aggregate[seen] = sums[seen] / counts[seen]
    scene.labels = aggregate > weight_threshold
    scene.backproj_weights = aggregate
    return scene


@dataclass
class ViewLocalization:
    view_id: int
    mask: MaskBuffer
    prompts: PointPrompts


def localize_view(amap: AttentionMap, mode: LocalizationMode,
                  seg_provider: SegmentationProvider, params: LocalizeParams,
                  image: ImageBuffer | None = None) -> ViewLocalization:
    """Run the filter -> cluster -> prompts -> mask chain for one view."""
    soft = filter_attention(amap, params.attn_threshold)
    clustered = cluster_dbscan(soft, params.dbscan_eps, params.dbscan_min_pts)
    prompts = select_point_prompts(amap, clustered)
    mask = build_view_mask(mode, amap, clustered, prompts, seg_provider, image)
    return ViewLocalization(view_id=amap.view_id, mask=mask, prompts=prompts)


@dataclass
class RelocalizeResult:
    masks: dict[int, MaskBuffer]
    labels_updated: bool
    failures: dict[int, str]


def relocalize(scene: GaussianScene, cameras: dict[int, Camera],
               attention_provider, seg_provider: SegmentationProvider,
               mode: LocalizationMode, params: LocalizeParams,
               update_labels: bool = False) -> RelocalizeResult:
    """Re-run localization against freshly rendered views.

    attention_provider(view_id, keyword, rendered_image) must yield an
    AttentionMap. Per-view failures are collected; at least one view must
    succeed. Labels are recomputed only when update_labels is set — this
    is the single point where the label set may change.
    """
    masks: dict[int, MaskBuffer] = {}
    failures: dict[int, str] = {}
    images: dict[int, ImageBuffer] = {}
    for view_id, cam in cameras.items():
        rendered = render_view(scene, cam).image
        images[view_id] = rendered
        try:
            amap = attention_provider(view_id, params.keyword, rendered)
            loc = localize_view(amap, mode, seg_provider, params, rendered)
            masks[view_id] = loc.mask
        except LocalizationError as exc:
            failures[view_id] = str(exc)
    if not masks:
        raise LocalizationError(
            f"relocalization failed on every view: {failures}")
    if update_labels:
        ids = sorted(masks)
        backproject_labels(scene, [cameras[i] for i in ids],
                           [masks[i] for i in ids], params.weight_threshold)
    return RelocalizeResult(masks=masks, labels_updated=update_labels,
                            failures=failures)
