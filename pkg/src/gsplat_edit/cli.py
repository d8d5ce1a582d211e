"""Command-line surface: render, localize, edit, eval.

All commands read a JSON run configuration (unknown keys rejected, flags
win over file values) and are deterministic given the config and seed;
re-running a command overwrites byte-identical artifacts except for the
started_at stamp confined to summary JSON files.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric abort,
5 transport error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import protocol
from .camera import Camera, load_cameras
from .errors import (ConfigError, DataError, GsplatError, LocalizationError,
                     NumericAbort, TransportError)
from .guidance import GuidanceProvider, OracleProvider, WireProvider
from .images import ImageBuffer, read_pfm, save_image, write_pfm, write_png
from .localize import (AttentionMap, LocalizationMode, LocalizeParams,
                       MaskBuffer, OracleSegmenter, SegmentationProvider,
                       backproject_labels, decide_mode, load_attention,
                       localize_view)
from .optimizer import EditConfig, EditProviders, reports_to_csv, run_edit
from .ply import load_scene, save_scene
from .preserve import LossWeights
from .providers import WireSegmenter
from .rasterizer import render_view
from .scene import PARAM_GROUPS, GaussianScene
from .ssim import WINDOW_SIZE, ssim_map

_TOP_KEYS = {"scene", "cameras", "images_dir", "attention_dir", "masks_dir",
             "static_masks_dir", "targets_dir", "output_dir", "provider",
             "keyword", "prompt", "mode_override", "seed", "edit", "localize"}
_EDIT_KEYS = {"iterations", "static_mask_iterations", "relocalize_interval",
              "learning_rates", "densify_interval", "densify_grad_threshold",
              "split_scale_threshold", "prune_opacity_threshold",
              "anchor_interval", "lambda_growth", "relocalize_labels",
              "oracle_strength", "lambda_sds", "lambda_l1", "lambda_ssim",
              "lambda_anchor"}
_LOCALIZE_KEYS = {"attn_threshold", "dbscan_eps", "dbscan_min_pts",
                  "weight_threshold", "iou_floor"}


@dataclass
class RunConfig:
    scene: Path
    cameras: Path
    output_dir: Path
    keyword: str = ""
    prompt: str = ""
    provider: str = "oracle"
    images_dir: Path | None = None
    attention_dir: Path | None = None
    masks_dir: Path | None = None
    static_masks_dir: Path | None = None
    targets_dir: Path | None = None
    mode_override: LocalizationMode | None = None
    seed: int = 0
    edit: dict = field(default_factory=dict)
    localize: dict = field(default_factory=dict)

    def localize_params(self) -> LocalizeParams:
        return LocalizeParams(keyword=self.keyword, **self.localize)

    def edit_config(self, iterations_override: int | None = None) -> EditConfig:
        opts = dict(self.edit)
        weights_kwargs = {}
        for key in ("lambda_sds", "lambda_l1", "lambda_ssim", "lambda_anchor"):
            if key in opts:
                weights_kwargs[key] = opts.pop(key)
        if "lambda_anchor" in weights_kwargs:
            base = {group: 0.01 for group in PARAM_GROUPS}
            base.update(weights_kwargs["lambda_anchor"])
            weights_kwargs["lambda_anchor"] = base
        iterations = opts.pop("iterations", 0)
        if iterations_override is not None:
            iterations = iterations_override
        try:
            return EditConfig(iterations=int(iterations), prompt=self.prompt,
                              seed=self.seed, weights=LossWeights(**weights_kwargs),
                              **opts)
        except (TypeError, GsplatError) as exc:
            raise ConfigError(f"bad edit configuration: {exc}") from exc


def _reject_unknown(obj: dict, allowed: set, where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


def load_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown(raw, _TOP_KEYS, "config")
    _reject_unknown(raw.get("edit", {}), _EDIT_KEYS, "edit")
    _reject_unknown(raw.get("localize", {}), _LOCALIZE_KEYS, "localize")
    overrides = overrides or {}

    base = path.parent

    def resolve(key, required=False):
        value = overrides.get(key, raw.get(key))
        if value is None:
            if required:
                raise ConfigError(f"config missing required path {key!r}")
            return None
        p = Path(value)
        return p if p.is_absolute() else base / p

    scene = resolve("scene", required=True)
    cameras = resolve("cameras", required=True)
    for name, p in (("scene", scene), ("cameras", cameras)):
        if not p.exists():
            raise DataError(f"{name} path does not exist: {p}")
    optional = {}
    for key in ("images_dir", "attention_dir", "masks_dir",
                "static_masks_dir", "targets_dir"):
        p = resolve(key)
        if p is not None and not p.exists():
            raise DataError(f"{key} does not exist: {p}")
        optional[key] = p

    mode_override = raw.get("mode_override")
    if mode_override is not None:
        try:
            mode_override = LocalizationMode(mode_override)
        except ValueError as exc:
            raise ConfigError(f"bad mode_override {mode_override!r}") from exc

    out = overrides.get("output_dir", raw.get("output_dir"))
    if out is None:
        digest = hashlib.sha256(
            json.dumps(raw, sort_keys=True).encode()).hexdigest()[:12]
        out_path = base / "runs" / digest
    else:
        out_path = Path(out) if Path(out).is_absolute() else base / out
    seed = overrides.get("seed", raw.get("seed", 0))

    cfg = RunConfig(scene=scene, cameras=cameras, output_dir=out_path,
                    keyword=raw.get("keyword", ""), prompt=raw.get("prompt", ""),
                    provider=raw.get("provider", "oracle"),
                    mode_override=mode_override, seed=int(seed),
                    edit=dict(raw.get("edit", {})),
                    localize=dict(raw.get("localize", {})), **optional)
    for key in ("attn_threshold", "dbscan_eps", "dbscan_min_pts",
                "weight_threshold", "iou_floor"):
        if overrides.get(key) is not None:
            cfg.localize[key] = overrides[key]
    if overrides.get("relocalize_labels"):
        cfg.edit["relocalize_labels"] = True
    if overrides.get("iterations") is not None:
        cfg.edit["iterations"] = overrides["iterations"]
    return cfg


def _guidance_provider(cfg: RunConfig) -> GuidanceProvider:
    if cfg.provider == "oracle":
        if cfg.targets_dir is None:
            raise ConfigError("oracle guidance needs targets_dir")
        targets = {}
        for pfm in sorted(cfg.targets_dir.glob("view_*.pfm")):
            view = int(pfm.stem.split("_")[1])
            targets[view] = ImageBuffer(read_pfm(pfm))
        if not targets:
            raise DataError(f"no view_*.pfm targets in {cfg.targets_dir}")
        strength = float(cfg.edit.get("oracle_strength", 1.0))
        return OracleProvider(targets, strength=strength)
    if cfg.provider.startswith("wire:"):
        endpoint = protocol.Endpoint.parse(cfg.provider[len("wire:"):])
        return WireProvider(endpoint, keyword=cfg.keyword)
    raise ConfigError(f"unknown provider {cfg.provider!r}; "
                      f"expected 'oracle' or 'wire:<host:port>'")


def _segmentation_provider(cfg: RunConfig) -> SegmentationProvider:
    if cfg.provider == "oracle":
        if cfg.masks_dir is None:
            raise ConfigError("oracle segmentation needs masks_dir")
        return OracleSegmenter(cfg.masks_dir)
    endpoint = protocol.Endpoint.parse(cfg.provider[len("wire:"):])
    return WireSegmenter(endpoint)


def _load_scene_cameras(cfg: RunConfig) -> tuple[GaussianScene, list[Camera]]:
    scene = load_scene(cfg.scene)
    cameras = load_cameras(cfg.cameras)
    if not cameras:
        raise DataError(f"no cameras in {cfg.cameras}")
    return scene, cameras


def _render_all(scene: GaussianScene, cameras: list[Camera]
                ) -> dict[int, ImageBuffer]:
    return {i: render_view(scene, cam).image for i, cam in enumerate(cameras)}


def cmd_render(cfg: RunConfig, view_ids: list[int] | None) -> int:
    scene, cameras = _load_scene_cameras(cfg)
    views = view_ids if view_ids else list(range(len(cameras)))
    out_dir = cfg.output_dir / "renders"
    out_dir.mkdir(parents=True, exist_ok=True)
    for view in views:
        if not 0 <= view < len(cameras):
            raise DataError(f"unknown view id {view}; have 0..{len(cameras)-1}")
        image = render_view(scene, cameras[view]).image
        write_pfm(out_dir / f"view_{view:03d}.pfm", image.data.astype(np.float32))
        write_png(out_dir / f"view_{view:03d}.png", image.data)
    print(f"wrote {len(views)} renders to {out_dir}")
    return 0


@dataclass
class LocalizeArtifacts:
    scene: GaussianScene
    masks: dict[int, MaskBuffer]
    mode: LocalizationMode
    summary: dict


def run_localize(cfg: RunConfig, scene: GaussianScene, cameras: list[Camera]
                 ) -> LocalizeArtifacts:
    if cfg.attention_dir is None:
        raise ConfigError("localize needs attention_dir")
    if not cfg.keyword:
        raise ConfigError("localize needs a keyword")
    params = cfg.localize_params()
    seg = _segmentation_provider(cfg)
    renders = _render_all(scene, cameras)

    attention: list[AttentionMap] = []
    for view in range(len(cameras)):
        path = cfg.attention_dir / f"{view}_{cfg.keyword}.pfm"
        if path.exists():
            attention.append(load_attention(path, view, cfg.keyword))
    if not attention:
        raise DataError(f"no attention maps for keyword {cfg.keyword!r} "
                        f"in {cfg.attention_dir}")

    if cfg.mode_override is not None:
        mode = cfg.mode_override
        decision_info = {"mode": mode.value, "overridden": True}
    else:
        decision = decide_mode(seg, [m.view_id for m in attention],
                               cfg.keyword, attention, params.iou_floor,
                               params.attn_threshold, renders)
        mode = decision.mode
        decision_info = {"mode": mode.value, "overridden": False,
                         "refine": decision.refine,
                         "view_ious": {str(k): v for k, v
                                       in decision.view_ious.items()}}

    masks: dict[int, MaskBuffer] = {}
    per_view = []
    failures = {}
    for amap in attention:
        try:
            loc = localize_view(amap, mode, seg, params,
                                renders.get(amap.view_id))
        except LocalizationError as exc:
            failures[amap.view_id] = str(exc)
            continue
        masks[amap.view_id] = loc.mask
        per_view.append({
            "view": amap.view_id,
            "positives": [list(p) for p in loc.prompts.positives],
            "negatives": [list(p) for p in loc.prompts.negatives],
            "mask_pixels": int(np.count_nonzero(loc.mask.grid)),
        })
    if not masks:
        raise LocalizationError(f"localization failed on every view: {failures}")

    ids = sorted(masks)
    backproject_labels(scene, [cameras[i] for i in ids],
                       [masks[i] for i in ids], params.weight_threshold)
    summary = {
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "decision": decision_info,
        "keyword": cfg.keyword,
        "labeled_count": int(np.count_nonzero(scene.labels)),
        "per_view": per_view,
        "failed_views": {str(k): v for k, v in failures.items()},
        "params": {
            "attn_threshold": params.attn_threshold,
            "dbscan_eps": params.dbscan_eps,
            "dbscan_min_pts": params.dbscan_min_pts,
            "weight_threshold": params.weight_threshold,
            "iou_floor": params.iou_floor,
        },
    }
    return LocalizeArtifacts(scene=scene, masks=masks, mode=mode,
                             summary=summary)


def cmd_localize(cfg: RunConfig) -> int:
    scene, cameras = _load_scene_cameras(cfg)
    artifacts = run_localize(cfg, scene, cameras)
    out = cfg.output_dir
    (out / "masks").mkdir(parents=True, exist_ok=True)
    save_scene(artifacts.scene, out / "localized.ply")
    for view, mask in artifacts.masks.items():
        write_pfm(out / "masks" / f"{view}_{cfg.keyword}.pfm",
                  mask.grid.astype(np.float32))
    (out / "localize_summary.json").write_text(
        json.dumps(artifacts.summary, indent=2))
    print(f"labeled {artifacts.summary['labeled_count']} of {len(scene)} "
          f"gaussians; artifacts in {out}")
    return 0


def cmd_edit(cfg: RunConfig, auto_localize: bool) -> int:
    scene, cameras = _load_scene_cameras(cfg)
    mode = cfg.mode_override or LocalizationMode.EDIT_EXISTING

    if auto_localize or not scene.labels.any():
        if not auto_localize:
            raise DataError("scene has no labeled gaussians; run localize "
                            "first or pass --auto-localize")
        artifacts = run_localize(cfg, scene, cameras)
        scene = artifacts.scene
        static_masks = artifacts.masks
        mode = artifacts.mode
    else:
        masks_root = cfg.static_masks_dir
        if masks_root is None:
            raise ConfigError("edit without --auto-localize needs "
                              "static_masks_dir from a previous localize run")
        static_masks = {}
        for view in range(len(cameras)):
            path = masks_root / f"{view}_{cfg.keyword}.pfm"
            if path.exists():
                static_masks[view] = MaskBuffer(
                    grid=read_pfm(path).astype(np.float64), view_id=view)
        if not static_masks:
            raise DataError(f"no static masks in {masks_root}")

    if cfg.images_dir is not None:
        originals = {}
        for view in range(len(cameras)):
            path = cfg.images_dir / f"view_{view:03d}.pfm"
            if not path.exists():
                raise DataError(f"missing original render {path}")
            originals[view] = ImageBuffer(read_pfm(path))
    else:
        originals = _render_all(scene, cameras)

    # Views without a mask fall back to an empty edit region.
    for view in range(len(cameras)):
        if view not in static_masks:
            h, w = cameras[view].height, cameras[view].width
            static_masks[view] = MaskBuffer(grid=np.zeros((h, w)), view_id=view)

    guidance = _guidance_provider(cfg)
    segmentation = _segmentation_provider(cfg)
    edit_config = cfg.edit_config()
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)

    before_dir = out / "before"
    before_dir.mkdir(exist_ok=True)
    for view, image in originals.items():
        write_pfm(before_dir / f"view_{view:03d}.pfm",
                  image.data.astype(np.float32))

    result = run_edit(scene, cameras, originals, static_masks,
                      EditProviders(guidance=guidance,
                                    segmentation=segmentation),
                      edit_config, cfg.localize_params(), mode,
                      dump_dir=str(out))

    save_scene(result.scene, out / "final.ply")
    checkpoint_dir = out / "checkpoints"
    checkpoint_dir.mkdir(exist_ok=True)
    save_scene(result.scene, checkpoint_dir / "final.ply")
    anchor_files = []
    for i, snap in enumerate(result.state.anchors):
        anchor_path = checkpoint_dir / f"anchor_{i:03d}.npz"
        np.savez(anchor_path, generation=snap.generation,
                 positions=snap.positions, log_scales=snap.log_scales,
                 rotations=snap.rotations, opacity_logits=snap.opacity_logits,
                 colors=snap.colors, index_map=snap.index_map)
        anchor_files.append(anchor_path.name)
    sidecar = {
        "iteration": result.state.iteration,
        "rng_state": _jsonable(result.state.rng.bit_generator.state),
        "anchors": anchor_files,
    }
    (checkpoint_dir / "final.json").write_text(json.dumps(sidecar, indent=2))
    # Which final Gaussian came from which initial one, and which initial
    # ones were ever editable: lets audits verify the frozen background.
    np.savez(checkpoint_dir / "provenance.npz",
             origin_index=result.origin_index,
             ever_labeled=result.ever_labeled)
    reports_to_csv(result.reports, out / "losses.csv")

    after_dir = out / "after"
    after_dir.mkdir(exist_ok=True)
    for view, cam in enumerate(cameras):
        image = render_view(result.scene, cam).image
        write_pfm(after_dir / f"view_{view:03d}.pfm",
                  image.data.astype(np.float32))
        write_png(after_dir / f"view_{view:03d}.png", image.data)
    print(f"edit finished after {edit_config.iterations} iterations; "
          f"artifacts in {out}")
    return 0


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def _psnr(mse: float) -> float | str:
    if mse <= 0.0:
        return "inf"
    return float(10.0 * np.log10(1.0 / mse))


def cmd_eval(cfg: RunConfig, before_dir: Path, after_dir: Path,
             masks_dir: Path | None, targets_dir: Path | None) -> int:
    before_files = sorted(Path(before_dir).glob("view_*.pfm"))
    if not before_files:
        raise DataError(f"no view_*.pfm files in {before_dir}")
    per_view = []
    sq_sum, sq_count = 0.0, 0
    in_abs_sum, in_count = 0.0, 0
    ssim_sum, ssim_count = 0.0, 0
    for bf in before_files:
        view = int(bf.stem.split("_")[1])
        af = Path(after_dir) / bf.name
        if not af.exists():
            raise DataError(f"after image missing for {bf.name}")
        before = read_pfm(bf).astype(np.float64)
        after = read_pfm(af).astype(np.float64)
        if before.shape != after.shape:
            raise DataError(f"{bf.name}: before/after shapes differ")
        h, w = before.shape[:2]
        mask = np.zeros((h, w))
        if masks_dir is not None:
            mpath = Path(masks_dir) / f"{view}_{cfg.keyword}.pfm"
            if mpath.exists():
                mask = (read_pfm(mpath) != 0).astype(np.float64)
        outside = mask == 0

        diff2 = (after - before) ** 2
        view_sq = float(diff2[outside].sum())
        view_n = int(outside.sum()) * before.shape[2]
        sq_sum += view_sq
        sq_count += view_n
        view_mse = view_sq / view_n if view_n else 0.0

        smap = ssim_map(before, after)
        pad = WINDOW_SIZE // 2
        outside_centers = outside[pad:h - pad, pad:w - pad]
        view_ssim_vals = smap[outside_centers]
        ssim_sum += float(view_ssim_vals.sum())
        ssim_count += view_ssim_vals.size

        entry = {"view": view, "outside_psnr": _psnr(view_mse),
                 "outside_ssim": float(view_ssim_vals.mean())
                 if view_ssim_vals.size else None}
        if targets_dir is not None and mask.any():
            tpath = Path(targets_dir) / bf.name
            if tpath.exists():
                target = read_pfm(tpath).astype(np.float64)
                inside = mask != 0
                view_abs = float(np.abs(after - target)[inside].sum())
                view_in_n = int(inside.sum()) * before.shape[2]
                in_abs_sum += view_abs
                in_count += view_in_n
                entry["inside_l1_to_target"] = view_abs / view_in_n
        per_view.append(entry)

    metrics = {
        "outside_psnr": _psnr(sq_sum / sq_count if sq_count else 0.0),
        "outside_ssim": ssim_sum / ssim_count if ssim_count else None,
        "inside_l1_to_target": (in_abs_sum / in_count) if in_count else None,
        "per_view": per_view,
    }
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    out_path = cfg.output_dir / "eval_metrics.json"
    out_path.write_text(json.dumps(metrics, indent=2))
    print(json.dumps(metrics, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gsplat-edit",
        description="Localized text-driven editing of Gaussian splat scenes")
    parser.add_argument("--config", required=True, help="run config JSON")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--threads", type=int, default=1,
                        help="accepted for interface compatibility; the "
                             "math is deterministic and single-threaded")
    sub = parser.add_subparsers(dest="command", required=True)

    p_render = sub.add_parser("render", help="render configured views")
    p_render.add_argument("views", nargs="*", type=int)

    p_loc = sub.add_parser("localize", help="attention-based localization")
    for p in (p_loc,):
        p.add_argument("--attn-threshold", type=float, default=None)
        p.add_argument("--dbscan-eps", type=float, default=None)
        p.add_argument("--dbscan-minpts", type=int, default=None)
        p.add_argument("--weight-threshold", type=float, default=None)
        p.add_argument("--iou-floor", type=float, default=None)

    p_edit = sub.add_parser("edit", help="run the optimization loop")
    p_edit.add_argument("--auto-localize", action="store_true")
    p_edit.add_argument("--relocalize-labels", action="store_true")
    p_edit.add_argument("--iterations", type=int, default=None)

    p_eval = sub.add_parser("eval", help="region-split metrics")
    p_eval.add_argument("--before", required=True)
    p_eval.add_argument("--after", required=True)
    p_eval.add_argument("--masks", default=None)
    p_eval.add_argument("--targets", default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides = {"seed": args.seed, "output_dir": args.out}
        for attr, key in (("attn_threshold", "attn_threshold"),
                          ("dbscan_eps", "dbscan_eps"),
                          ("dbscan_minpts", "dbscan_min_pts"),
                          ("weight_threshold", "weight_threshold"),
                          ("iou_floor", "iou_floor"),
                          ("iterations", "iterations")):
            if hasattr(args, attr):
                overrides[key] = getattr(args, attr)
        if getattr(args, "relocalize_labels", False):
            overrides["relocalize_labels"] = True
        overrides = {k: v for k, v in overrides.items() if v is not None}
        cfg = load_config(args.config, overrides)
        if args.command == "render":
            return cmd_render(cfg, args.views)
        if args.command == "localize":
            return cmd_localize(cfg)
        if args.command == "edit":
            return cmd_edit(cfg, args.auto_localize)
        if args.command == "eval":
            masks = Path(args.masks) if args.masks else None
            targets = Path(args.targets) if args.targets else None
            return cmd_eval(cfg, Path(args.before), Path(args.after),
                            masks, targets)
        raise ConfigError(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, LocalizationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericAbort as exc:
        print(f"numeric abort: {exc} (dump: {exc.dump_path})", file=sys.stderr)
        return 4
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
