"""Command-line entry point: ``bevgrid <command> ...``.

Exit codes: 0 success, 2 contract violation or unreadable input (a JSON error object goes to stderr).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import formats, losses, metrics
from .fusion import C_TO_D, D_TO_C, FusionAdapter, FusionConfig, load_adapters, modality_fuse
from .gradcheck import check_gradient
from .pipeline import PipelineConfig, StageError, format_trace, frame_features, occupancy_target, run_forward
from .scenegen import SceneConfig, generate_scene
from .view_transform import lift_splat
from .voxelizer import binary_occupancy, semantic_occupancy


class ContractError(Exception):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except ValueError as e:
        raise formats.ParseError(f"invalid JSON ({e})", None, "config", path) from None


# --------------------------------------------------------------------------- commands


def cmd_voxelize(args) -> dict:
    spec = formats.load_spec(args.spec)
    cloud = formats.load_points(args.points)
    if args.mode == "bo":
        grid = binary_occupancy(spec, cloud.points)
        formats.save_binary_grid(args.out, grid, spec)
        occupied = int(grid.values.sum())
    else:
        grid = semantic_occupancy(spec, cloud)
        formats.save_semantic_grid(args.out, grid, spec)
        occupied = int(grid.labeled_mask.sum())
    return {"out": args.out, "dims": list(spec.dims), "occupied_voxels": occupied, "mode": args.mode}


def cmd_lift_splat(args) -> dict:
    scene = formats.load_scene(args.scene)
    spec = formats.load_spec(args.grid)
    cfg = PipelineConfig(grid=spec, feature_hw=tuple(args.feature_hw), c_bev=args.channels,
                         head_seed=args.seed, threads=args.threads)
    feats, depth = frame_features(scene, scene.cloud, cfg)
    bev = lift_splat(feats, depth, scene.rig, spec, threads=args.threads)
    formats.save_grid(args.out, bev.values, "bev", spec)
    return {"out": args.out, "shape": list(bev.values.shape)}


def _load_bev(path) -> np.ndarray:
    arr, header = formats.load_grid(path)
    if arr.ndim != 3:
        raise ContractError(f"{path}: expected a C x X x Y feature grid, got shape {arr.shape}")
    return arr.astype(np.float64), header["spec"]


def cmd_fuse(args) -> dict:
    od, spec = _load_bev(args.od)
    oc, _ = _load_bev(args.oc)
    if args.adapters:
        a_cd, a_dc = load_adapters(args.adapters)[args.step]
    else:
        a_cd = FusionAdapter(np.eye(od.shape[0], oc.shape[0]), C_TO_D)
        a_dc = FusionAdapter(np.eye(oc.shape[0], od.shape[0]), D_TO_C)
    out_od, out_oc = modality_fuse(od, oc, a_cd, a_dc, FusionConfig(args.lam))
    formats.save_grid(args.out_od, out_od, "bev", spec)
    formats.save_grid(args.out_oc, out_oc, "bev", spec)
    return {"out_od": args.out_od, "out_oc": args.out_oc, "lambda": args.lam}


_LOSS_INPUTS = {
    "focal": ("heatmap", "target"),
    "l1": ("boxes", "target_boxes"),
    "ce": ("logits", "labels"),
    "lovasz": ("probs", "labels"),
    "total": ("heatmap", "target", "boxes", "target_boxes", "logits", "labels"),
}


def _load_labels(path):
    arr, header = formats.load_grid(path)
    if header["kind"] in ("semantic", "binary"):
        return formats.load_occupancy(path)[0]
    return arr.astype(np.int64)


def cmd_loss(args) -> dict:
    names = _LOSS_INPUTS[args.kind]
    if len(args.inputs) != len(names):
        raise ContractError(f"--kind {args.kind} takes {len(names)} inputs: {' '.join(names)}")
    vals = {}
    for name, path in zip(names, args.inputs):
        if name == "labels":
            vals[name] = _load_labels(path)
        else:
            vals[name] = formats.load_grid(path)[0].astype(np.float64)
    cfg = losses.LossConfig.for_variant(args.variant)
    if args.kind == "focal":
        h = losses.clamp_heatmap(vals["heatmap"])
        loss, grad = losses.gaussian_focal_loss(h, vals["target"], cfg)
        grads = {"heatmap": (h, grad, lambda x: losses.gaussian_focal_loss(x, vals["target"], cfg)[0])}
    elif args.kind == "l1":
        loss, grad = losses.l1_box_loss(vals["boxes"], vals["target_boxes"])
        grads = {"boxes": (vals["boxes"], grad, lambda x: losses.l1_box_loss(x, vals["target_boxes"])[0])}
    elif args.kind == "ce":
        if len(cfg.class_weights) != vals["logits"].shape[0]:
            cfg = losses.LossConfig(class_weights=(1.0,) * vals["logits"].shape[0])
        loss, grad = losses.weighted_cross_entropy(vals["logits"], vals["labels"], cfg)
        grads = {"logits": (vals["logits"], grad,
                            lambda x: losses.weighted_cross_entropy(x, vals["labels"], cfg)[0])}
    elif args.kind == "lovasz":
        loss, grad = losses.lovasz_softmax(vals["probs"], vals["labels"])
        grads = {"probs": (vals["probs"], grad,
                           lambda x: losses.lovasz_softmax(x, vals["labels"], check=False)[0])}
    else:
        h = losses.clamp_heatmap(vals["heatmap"])
        loss, g = losses.total_objective(h, vals["target"], vals["boxes"], vals["target_boxes"],
                                         vals["logits"], vals["labels"], cfg)

        def total_wrt(key):
            def fn(x):
                kw = {"heatmap": h, "boxes": vals["boxes"], "logits": vals["logits"], key: x}
                return losses.total_objective(kw["heatmap"], vals["target"], kw["boxes"], vals["target_boxes"],
                                              kw["logits"], vals["labels"], cfg)[0]
            return fn

        grads = {"heatmap": (h, g["heatmap"], total_wrt("heatmap")),
                 "boxes": (vals["boxes"], g["boxes"], total_wrt("boxes")),
                 "logits": (vals["logits"], g["logits"], total_wrt("logits"))}
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = {"kind": args.kind, "loss": loss, "gradients": {}}
    for name, (x, grad, fn) in grads.items():
        path = out_dir / f"grad_{name}.grid"
        formats.save_grid(path, grad, "gradient", meta={"wrt": name})
        entry = {"file": str(path)}
        if args.grad_check:
            entry["fd_check"] = check_gradient(fn, x, grad, samples=args.samples, seed=args.seed).to_dict()
        report["gradients"][name] = entry
    return report


def cmd_eval_det(args) -> dict:
    preds = formats.load_boxes(args.pred)
    gts = formats.load_boxes(args.gt)
    report = metrics.evaluate_detections(preds, gts).to_dict()
    report["tp_averaging"] = "TP errors averaged over true positives matched at 2.0 m"
    if args.out:
        Path(args.out).write_text(_dump(report) + "\n")
    return report


def cmd_eval_occ(args) -> dict:
    pred, _ = formats.load_occupancy(args.pred)
    gt, _ = formats.load_occupancy(args.gt)
    iou, miou = metrics.voxel_miou(pred, gt, ignore_index=0 if args.ignore_empty else None)
    report = {"mIoU": miou, "per_class_iou": {str(k): v for k, v in iou.items()},
              "ignore_empty": bool(args.ignore_empty)}
    if args.out:
        Path(args.out).write_text(_dump(report) + "\n")
    return report


def cmd_gen_scene(args) -> dict:
    cfg = SceneConfig.from_dict(_read_json(args.config)) if args.config else SceneConfig()
    scene = generate_scene(args.seed, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    formats.save_scene(scene, out / "scene.txt")
    spec = cfg.grid
    formats.save_semantic_grid(out / "occupancy_se.grid", semantic_occupancy(spec, scene.cloud), spec)
    formats.save_binary_grid(out / "occupancy_bo.grid", binary_occupancy(spec, scene.cloud.points), spec)
    formats.save_boxes(out / "boxes_gt.txt", [scene.boxes])
    return {"out": str(out), "points": len(scene.cloud), "boxes": len(scene.boxes), "seed": args.seed}


def cmd_pipeline(args) -> dict:
    scene = formats.load_scene(args.scene)
    doc = _read_json(args.config) if args.config else {}
    if args.variant:
        doc["variant"] = args.variant
    if args.lam is not None:
        doc["lam"] = args.lam
    if args.threads is not None:
        doc["threads"] = args.threads
    try:
        cfg = PipelineConfig.from_dict(doc)
    except (TypeError, ValueError) as e:
        raise ContractError(f"pipeline config: {e}") from None
    res = run_forward(scene, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.grid
    formats.save_grid(out / "heatmap.grid", res.heatmap, "heatmap", spec)
    formats.save_grid(out / "regression.grid", res.regression, "regression", spec)
    formats.save_grid(out / "bev_temporal.grid", res.intermediates["bev_temporal"].values, "bev", spec)
    formats.save_semantic_grid(out / "occupancy.grid", res.occupancy, spec)
    formats.save_boxes(out / "boxes.txt", [res.boxes])
    (out / "trace.txt").write_text(format_trace(res.trace))
    det = metrics.evaluate_detections([res.boxes], [scene.boxes]).to_dict()
    _, miou = metrics.voxel_miou(res.occupancy, occupancy_target(scene, cfg))
    config = cfg.to_dict()
    del config["threads"]  # execution detail; keeps the report identical across thread counts
    report = {"config": config, "detections": len(res.boxes), "NDS": det["NDS"], "mAP": det["mAP"],
              "mIoU": miou, "trace": [{"stage": s, "shape": list(shp)} for s, shp in res.trace]}
    (out / "report.json").write_text(_dump(report) + "\n")
    return {"out": str(out), "detections": len(res.boxes), "stages": len(res.trace)}


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bevgrid", description="BEV occupancy/detection geometry toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("voxelize", help="point cloud -> occupancy grid file")
    s.add_argument("--spec", required=True, help="grid spec JSON")
    s.add_argument("--points", required=True, help="points text file or scene file")
    s.add_argument("--mode", choices=("bo", "se"), default="se")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_voxelize)

    s = sub.add_parser("lift-splat", help="scene -> BEV feature grid (oracle depth, seeded image features)")
    s.add_argument("--scene", required=True)
    s.add_argument("--grid", required=True, help="grid spec JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--feature-hw", type=int, nargs=2, default=(16, 44), metavar=("H", "W"))
    s.add_argument("--channels", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_lift_splat)

    s = sub.add_parser("fuse", help="lambda-weighted exchange of two feature grids")
    s.add_argument("--od", required=True)
    s.add_argument("--oc", required=True)
    s.add_argument("--lambda", dest="lam", type=float, default=0.9)
    s.add_argument("--adapters", help="adapter JSON file (identity if omitted)")
    s.add_argument("--step", type=int, default=0, help="which adapter step to use")
    s.add_argument("--out-od", required=True)
    s.add_argument("--out-oc", required=True)
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("loss", help="evaluate a loss, write its gradient, optionally FD-check it")
    s.add_argument("--kind", choices=tuple(_LOSS_INPUTS), required=True)
    s.add_argument("--inputs", nargs="+", required=True,
                   help="grid files; focal: heatmap target | l1: boxes target | ce: logits labels | "
                        "lovasz: probs labels | total: all six")
    s.add_argument("--variant", choices=("bo", "se"), default="se")
    s.add_argument("--grad-check", action="store_true")
    s.add_argument("--samples", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=".", help="directory for gradient files")
    s.set_defaults(func=cmd_loss)

    s = sub.add_parser("eval-det", help="detection mAP / TP errors / NDS")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval_det)

    s = sub.add_parser("eval-occ", help="voxel mIoU")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--ignore-empty", action="store_true", help="leave class 0 out of the mean")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval_occ)

    s = sub.add_parser("gen-scene", help="synthetic scene + ground-truth grids")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--config", help="scene config JSON")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_scene)

    s = sub.add_parser("pipeline", help="full forward pass with shape trace")
    s.add_argument("--scene", required=True)
    s.add_argument("--config", help="pipeline config JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--variant", choices=("bo", "se"))
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--threads", type=int)
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except formats.ParseError as e:
        print(_dump(e.to_dict()), file=sys.stderr)
        return 2
    except StageError as e:
        print(_dump({"error": "stage", "stage": e.stage, "message": str(e)}), file=sys.stderr)
        return 2
    except (ContractError, ValueError, IndexError) as e:
        print(_dump({"error": "contract", "message": str(e)}), file=sys.stderr)
        return 2
    except OSError as e:
        print(_dump({"error": "io", "message": str(e)}), file=sys.stderr)
        return 2
    print(_dump(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
