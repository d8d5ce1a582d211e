"""The editing loop: gated adaptive updates, anchor pull, densification
restricted to labeled Gaussians, and the static-to-dynamic mask schedule.

Each iteration renders one randomly chosen training view, assembles the
per-pixel gradient from guidance plus preservation against the
stage-appropriate pseudo-GT, backpropagates through the rasterizer, adds
anchor gradients, zeroes everything belonging to unlabeled Gaussians,
and applies a bias-corrected first/second-moment update per parameter
group. All randomness flows from the single run seed, so identical
configs reproduce bitwise-identical scenes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import Camera
from .errors import ContractViolation, NumericAbort
from .guidance import (GuidanceProvider, GuidanceRequest, NoiseSchedule,
                       sds_gradient, sds_loss_value)
from .images import ImageBuffer
from .localize import (LocalizationMode, LocalizeParams, MaskBuffer,
                       SegmentationProvider, relocalize)
from .preserve import LossReport, LossWeights, compose_pseudo_gt, \
    preservation_loss, total_loss
from .rasterizer import ParamGradients, rasterize_backward, render_view, \
    visible_mass
from .scene import (PARAM_GROUPS, AnchorSnapshot, GaussianScene,
                    quat_normalize, quat_to_rotmat, snapshot_anchor)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15
SPLIT_FACTOR = 1.6


def _default_learning_rates() -> dict[str, float]:
    return {"position": 1.6e-4, "log_scale": 5e-3, "rotation": 1e-3,
            "opacity_logit": 5e-2, "color": 2.5e-3}


@dataclass
class EditConfig:
    iterations: int
    prompt: str = ""
    static_mask_iterations: int = 2000
    relocalize_interval: int = 500
    learning_rates: dict[str, float] = field(default_factory=_default_learning_rates)
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    split_scale_threshold: float | None = None  # None: 1% of scene extent
    prune_opacity_threshold: float = 0.005
    anchor_interval: int = 500
    lambda_growth: float = 1.5
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    noise_schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    relocalize_labels: bool = False
    oracle_strength: float = 1.0

    def __post_init__(self):
        if self.iterations < 0:
            raise ContractViolation("iterations must be >= 0")
        if self.lambda_growth < 1.0:
            raise ContractViolation("lambda_growth must be >= 1")
        missing = set(PARAM_GROUPS) - set(self.learning_rates)
        if missing:
            raise ContractViolation(f"learning_rates missing groups {missing}")


@dataclass
class TrainState:
    scene: GaussianScene
    anchors: list[AnchorSnapshot]
    static_masks: dict[int, MaskBuffer]
    dynamic_masks: dict[int, MaskBuffer]
    iteration: int
    rng: np.random.Generator


def anchor_loss(scene: GaussianScene, anchors: list[AnchorSnapshot],
                lambda_growth: float
                ) -> tuple[dict[str, float], ParamGradients]:
    """Quadratic pull toward every saved generation.

    Generation i is weighted lambda_growth**i, so later anchors bind
    harder. Gaussians created after a snapshot have no entry in its
    index_map and contribute nothing to that term. Returns unweighted
    per-group loss values and their exact gradients.
    """
    n = len(scene)
    grads = ParamGradients.zeros(n)
    values = {group: 0.0 for group in PARAM_GROUPS}
    current = {
        "position": scene.positions, "log_scale": scene.log_scales,
        "rotation": scene.rotations, "opacity_logit": scene.opacity_logits,
        "color": scene.colors,
    }
    grad_arrays = {
        "position": grads.position, "log_scale": grads.log_scale,
        "rotation": grads.rotation, "opacity_logit": grads.opacity_logit,
        "color": grads.color,
    }
    for order, snap in enumerate(anchors):
        lam = lambda_growth ** order
        present = snap.index_map >= 0
        if not present.any():
            continue
        cur_idx = np.nonzero(present)[0]
        snap_idx = snap.index_map[cur_idx]
        saved = {
            "position": snap.positions, "log_scale": snap.log_scales,
            "rotation": snap.rotations, "opacity_logit": snap.opacity_logits,
            "color": snap.colors,
        }
        for group in PARAM_GROUPS:
            diff = current[group][cur_idx] - saved[group][snap_idx]
            values[group] += lam * float(np.sum(diff * diff))
            grad_arrays[group][cur_idx] += 2.0 * lam * diff
    return values, grads


def gate_gradients(grads: ParamGradients, scene: GaussianScene
                   ) -> ParamGradients:
    """Zero every gradient of unlabeled Gaussians, all groups, in place."""
    blocked = ~scene.labels
    grads.position[blocked] = 0.0
    grads.log_scale[blocked] = 0.0
    grads.rotation[blocked] = 0.0
    grads.opacity_logit[blocked] = 0.0
    grads.color[blocked] = 0.0
    grads.mean2d[blocked] = 0.0
    return grads


@dataclass
class DensifyStats:
    """Screen-space gradient norms accumulated between densify steps."""

    norm2d_sum: np.ndarray
    pos_grad_sum: np.ndarray
    seen: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(norm2d_sum=np.zeros(n), pos_grad_sum=np.zeros((n, 3)),
                   seen=np.zeros(n))

    def accumulate(self, grads: ParamGradients, visible: np.ndarray) -> None:
        self.norm2d_sum += np.linalg.norm(grads.mean2d, axis=1)
        self.pos_grad_sum += grads.position
        self.seen += visible.astype(np.float64)


def densify_and_prune(scene: GaussianScene, stats: DensifyStats,
                      config: EditConfig, rng: np.random.Generator,
                      position_lr: float, split_scale_threshold: float
                      ) -> np.ndarray:
    """Clone/split high-gradient labeled Gaussians; prune transparent ones.

    Clone when the Gaussian is small (copy, nudged one learning-rate step
    along the accumulated descent direction); split when large (two
    children inside the parent's one-sigma ellipsoid, scales divided by
    1.6, parent removed). Only labeled Gaussians participate. Returns the
    index remap (new index -> old index, -1 for newborns).
    """
    n = len(scene)
    seen = np.maximum(stats.seen, 1.0)
    mean_norm = stats.norm2d_sum / seen
    over = scene.labels & (mean_norm > config.densify_grad_threshold)
    max_scale = scene.scales.max(axis=1)
    clone_mask = over & (max_scale < split_scale_threshold)
    split_mask = over & ~clone_mask
    prune_mask = scene.labels & (scene.opacities < config.prune_opacity_threshold)
    # Parents of splits disappear; pruning applies to survivors.
    keep_mask = ~(split_mask | prune_mask)
    keep = np.nonzero(keep_mask)[0]

    new_positions, new_log_scales, new_rotations = [], [], []
    new_logits, new_colors = [], []

    mean_grad = stats.pos_grad_sum / seen[:, None]
    for g in np.nonzero(clone_mask & keep_mask)[0]:
        new_positions.append(scene.positions[g] - position_lr * mean_grad[g])
        new_log_scales.append(scene.log_scales[g].copy())
        new_rotations.append(scene.rotations[g].copy())
        new_logits.append(scene.opacity_logits[g])
        new_colors.append(scene.colors[g].copy())

    for g in np.nonzero(split_mask)[0]:
        R = quat_to_rotmat(scene.rotations[g])
        s = np.exp(scene.log_scales[g])
        for _ in range(2):
            direction = rng.normal(size=3)
            norm = np.linalg.norm(direction)
            direction = direction / norm if norm > 0 else np.array([1.0, 0, 0])
            radius = rng.uniform() ** (1.0 / 3.0)
            offset = R @ (s * (radius * direction))
            new_positions.append(scene.positions[g] + offset)
            new_log_scales.append(scene.log_scales[g] - np.log(SPLIT_FACTOR))
            new_rotations.append(scene.rotations[g].copy())
            new_logits.append(scene.opacity_logits[g])
            new_colors.append(scene.colors[g].copy())

    newborn = None
    if new_positions:
        count = len(new_positions)
        newborn = GaussianScene(
            positions=np.array(new_positions),
            log_scales=np.array(new_log_scales),
            rotations=np.array(new_rotations),
            opacity_logits=np.array(new_logits),
            colors=np.array(new_colors),
            labels=np.ones(count, dtype=bool),
            backproj_weights=np.ones(count),
            generations=np.full(count, scene.current_generation,
                                dtype=np.int64),
        )
    if newborn is None and keep.shape[0] == n:
        return np.arange(n, dtype=np.int64)
    return scene.restructure(keep, newborn)


class _AdamState:
    def __init__(self, n: int):
        self.step = 0
        self.m = {"position": np.zeros((n, 3)), "log_scale": np.zeros((n, 3)),
                  "rotation": np.zeros((n, 4)), "opacity_logit": np.zeros(n),
                  "color": np.zeros((n, 3))}
        self.v = {k: np.zeros_like(v) for k, v in self.m.items()}

    def apply_remap(self, remap: np.ndarray) -> None:
        alive = remap >= 0
        for store in (self.m, self.v):
            for key, arr in store.items():
                shape = (remap.shape[0],) + arr.shape[1:]
                fresh = np.zeros(shape)
                fresh[alive] = arr[remap[alive]]
                store[key] = fresh

    def update(self, scene: GaussianScene, grads: ParamGradients,
               learning_rates: dict[str, float]) -> None:
        self.step += 1
        c1 = 1.0 - ADAM_BETA1 ** self.step
        c2 = 1.0 - ADAM_BETA2 ** self.step
        params = {"position": scene.positions, "log_scale": scene.log_scales,
                  "rotation": scene.rotations,
                  "opacity_logit": scene.opacity_logits,
                  "color": scene.colors}
        grad_arrays = {"position": grads.position, "log_scale": grads.log_scale,
                       "rotation": grads.rotation,
                       "opacity_logit": grads.opacity_logit,
                       "color": grads.color}
        for group in PARAM_GROUPS:
            g = grad_arrays[group]
            m = self.m[group]
            v = self.v[group]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            step = learning_rates[group] * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
            params[group] -= step


@dataclass
class EditResult:
    scene: GaussianScene
    reports: list[LossReport]
    state: TrainState
    origin_index: np.ndarray
    ever_labeled: np.ndarray  # over the initial scene's indices


@dataclass
class EditProviders:
    guidance: GuidanceProvider
    segmentation: SegmentationProvider | None = None
    attention: object | None = None  # callable(view_id, keyword, image)

    def attention_source(self):
        if self.attention is not None:
            return self.attention
        return getattr(self.guidance, "attention_map", None)


def run_edit(initial_scene: GaussianScene, cameras: list[Camera],
             originals: dict[int, ImageBuffer],
             static_masks: dict[int, MaskBuffer],
             providers: EditProviders, config: EditConfig,
             localize_params: LocalizeParams | None = None,
             mode: LocalizationMode = LocalizationMode.ADDITION,
             dump_dir: str | None = None) -> EditResult:
    """Run the full editing loop; labels must already be assigned.

    The scene is copied; the input is never mutated. Stage 1 composes
    pseudo-GT images with the static masks; once static_mask_iterations
    have elapsed the localization chain re-runs against fresh renders at
    every relocalize_interval, refreshing the dynamic masks (labels too
    only when config.relocalize_labels is set). A non-finite loss aborts
    with a diagnostic dump.
    """
    scene = initial_scene.copy()
    rng = np.random.default_rng(config.seed)
    n0 = len(scene)
    origin_index = np.arange(n0, dtype=np.int64)
    ever_labeled = scene.labels.copy()

    anchors = [snapshot_anchor(scene)]
    adam = _AdamState(n0)
    stats = DensifyStats.zeros(n0)
    split_threshold = config.split_scale_threshold
    if split_threshold is None:
        split_threshold = 0.01 * max(scene.extent, 1e-12)

    state = TrainState(scene=scene, anchors=anchors,
                       static_masks=dict(static_masks), dynamic_masks={},
                       iteration=0, rng=rng)
    reports: list[LossReport] = []
    schedule = config.noise_schedule
    weights = config.weights
    n_views = len(cameras)
    if n_views == 0:
        raise ContractViolation("run_edit needs at least one camera")
    effective_static = min(config.static_mask_iterations, config.iterations)

    def stage_mask(view: int, iteration: int) -> MaskBuffer:
        if iteration >= effective_static and view in state.dynamic_masks:
            return state.dynamic_masks[view]
        mask = state.static_masks.get(view)
        if mask is None:
            raise ContractViolation(f"no static mask for view {view}")
        return mask

    def do_relocalize() -> None:
        attention_source = providers.attention_source()
        if (providers.segmentation is None or attention_source is None
                or localize_params is None):
            return  # no providers to re-run localization against
        cam_map = {i: cam for i, cam in enumerate(cameras)}
        result = relocalize(scene, cam_map, attention_source,
                            providers.segmentation, mode, localize_params,
                            update_labels=config.relocalize_labels)
        state.dynamic_masks.update(result.masks)
        if config.relocalize_labels:
            fresh = scene.labels & (origin_index >= 0)
            ever_labeled[origin_index[fresh]] = True

    for it in range(config.iterations):
        state.iteration = it
        view = int(rng.integers(0, n_views))
        camera = cameras[view]
        render = render_view(scene, camera)
        timestep = schedule.sample_t(rng)
        noise_seed = int(rng.integers(0, np.iinfo(np.int64).max))
        request = GuidanceRequest(image=render.image, prompt=config.prompt,
                                  timestep=timestep, noise_seed=noise_seed)
        response = providers.guidance(request, view)
        sds_val = sds_loss_value(response, schedule, timestep)
        guide_grad = sds_gradient(response, schedule, timestep)

        mask = stage_mask(view, it)
        pseudo_gt = compose_pseudo_gt(mask, render.image, originals[view])
        _, l1_val, dssim_val, pres_grad = preservation_loss(
            render.image, pseudo_gt, weights)

        pixel_grad = ImageBuffer(weights.lambda_sds * guide_grad.data
                                 + pres_grad.data)
        grads = rasterize_backward(render, pixel_grad, scene, camera)
        anchor_vals, anchor_grads = anchor_loss(scene, anchors,
                                                config.lambda_growth)
        grads.add(_scale_anchor(anchor_grads, weights.lambda_anchor))
        gate_gradients(grads, scene)

        try:
            report = total_loss(sds_val, l1_val, dssim_val, anchor_vals, weights)
        except NumericAbort as exc:
            path = _write_dump(dump_dir, it, view, sds_val, l1_val, dssim_val,
                               anchor_vals, scene)
            raise NumericAbort(str(exc), dump_path=path) from exc
        reports.append(report)

        stats.accumulate(grads, visible_mass(render) > 0)
        adam.update(scene, grads, config.learning_rates)
        _renormalize_labeled_rotations(scene)

        done = it + 1
        if config.anchor_interval > 0 and done % config.anchor_interval == 0:
            anchors.append(snapshot_anchor(scene))
        if config.densify_interval > 0 and done % config.densify_interval == 0:
            remap = densify_and_prune(scene, stats, config, rng,
                                      config.learning_rates["position"],
                                      split_threshold)
            if remap.shape[0] != len(origin_index) or np.any(remap != np.arange(remap.shape[0])):
                for snap in anchors:
                    snap.apply_remap(remap)
                adam.apply_remap(remap)
                alive = remap >= 0
                fresh_origin = np.full(remap.shape[0], -1, dtype=np.int64)
                fresh_origin[alive] = origin_index[remap[alive]]
                origin_index = fresh_origin
            stats = DensifyStats.zeros(len(scene))
        if done == effective_static and done < config.iterations:
            do_relocalize()
        elif (done > effective_static and config.relocalize_interval > 0
              and (done - effective_static) % config.relocalize_interval == 0
              and done < config.iterations):
            do_relocalize()

    state.iteration = config.iterations
    return EditResult(scene=scene, reports=reports, state=state,
                      origin_index=origin_index, ever_labeled=ever_labeled)


def _renormalize_labeled_rotations(scene: GaussianScene,
                                   tolerance: float = 1e-12) -> None:
    """Re-unitize quaternions of labeled Gaussians that actually moved.

    Skipping rows already within tolerance keeps untouched parameters
    bitwise stable (a fixed-point run must not churn the scene), while
    any real optimizer step drifts the norm far beyond the tolerance and
    triggers renormalization, keeping it within 1e-6 of unit.
    """
    labeled = np.nonzero(scene.labels)[0]
    if labeled.size == 0:
        return
    norms = np.linalg.norm(scene.rotations[labeled], axis=1)
    off = np.abs(norms - 1.0) > tolerance
    if off.any():
        rows = labeled[off]
        scene.rotations[rows] = quat_normalize(scene.rotations[rows])


def _scale_anchor(grads: ParamGradients, lambda_anchor: dict[str, float]
                  ) -> ParamGradients:
    return ParamGradients(
        position=grads.position * lambda_anchor.get("position", 0.0),
        log_scale=grads.log_scale * lambda_anchor.get("log_scale", 0.0),
        rotation=grads.rotation * lambda_anchor.get("rotation", 0.0),
        opacity_logit=grads.opacity_logit * lambda_anchor.get("opacity_logit", 0.0),
        color=grads.color * lambda_anchor.get("color", 0.0),
        mean2d=grads.mean2d * 0.0,
    )


def _write_dump(dump_dir, iteration, view, sds_val, l1_val, dssim_val,
                anchor_vals, scene) -> str:
    directory = Path(dump_dir) if dump_dir else Path.cwd()
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"abort_iter{iteration:06d}.json"
    payload = {
        "iteration": iteration,
        "view": view,
        "sds": sds_val,
        "preservation_l1": l1_val,
        "preservation_dssim": dssim_val,
        "anchor": anchor_vals,
        "n_gaussians": len(scene),
        "n_labeled": int(np.count_nonzero(scene.labels)),
        "position_range": [float(np.nanmin(scene.positions)),
                           float(np.nanmax(scene.positions))]
        if len(scene) else [0.0, 0.0],
    }
    path.write_text(json.dumps(payload, indent=2))
    return str(path)


def reports_to_csv(reports: list[LossReport], path) -> None:
    """Loss series as CSV: iteration, sds, l1, dssim, anchor_*, total."""
    groups = list(PARAM_GROUPS)
    header = "iteration,sds,l1,dssim," \
        + ",".join(f"anchor_{g}" for g in groups) + ",total"
    lines = [header]
    for i, rep in enumerate(reports):
        anchor_cols = ",".join(repr(rep.anchor.get(g, 0.0)) for g in groups)
        lines.append(f"{i},{rep.sds!r},{rep.preservation_l1!r},"
                     f"{rep.preservation_dssim!r},{anchor_cols},{rep.total!r}")
    Path(path).write_text("\n".join(lines) + "\n")
