"""Command-line pipeline: segmentation, sampling, losses and evaluation.

Flag defaults reproduce the reference inference settings (temperature 0.1,
64 pairs per mask, voxel 0.002, outlier radius 0.004 with 1 neighbor,
16-neighbor point graph, 200 kept components, 5-neighbor label transfer
within 0.005, threshold sweep 0.01..0.50 in 50 steps, 100 trials per mask,
masks under 20 pixels excluded). Machine-readable JSON goes to stdout or
--out; diagnostics go to stderr.

Exit codes: 0 success, 1 usage, 2 file/I-O, 3 format or validation.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import io_formats as iof
from .graphs import (
    FeatureMap,
    Metric,
    grid_graph,
    knn_graph,
    radius_outlier_filter,
    sample_pixel_ids,
    sampled_pixel_graph,
    voxel_downsample,
)
from .hierarchy import build_bpt
from .losses import (
    ContrastiveConfig,
    DepthPatchBatch,
    depth_continuity_loss,
    feature_loss,
    reweight_graph,
)
from .mask_forest import build_mask_tree, sample_pairs
from .metrics import (
    CameraModel,
    TrialConfig,
    ViewData,
    mask_iou,
    nc_score,
    si_score,
    vc_score,
)
from .parallel import thread_count
from .segmentation import Segmenter, segment_2d, segment_3d, transfer_labels

EXIT_USAGE = 1
EXIT_IO = 2
EXIT_VALIDATION = 3


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _emit(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _sweep(args) -> np.ndarray:
    return np.linspace(args.sweep_min, args.sweep_max, args.sweep_count)


def _label_sizes(labels: np.ndarray) -> dict:
    ids, counts = np.unique(labels[labels > 0], return_counts=True)
    return {int(i): int(c) for i, c in zip(ids, counts)}


def cmd_segment2d(args) -> int:
    fmap = FeatureMap(iof.read_tensor(args.features, role="features"))
    lm = segment_2d(fmap, args.t, args.min_pixels, Metric.parse(args.metric))
    if args.out:
        iof.write_labelmap_png(args.out, lm.labels)
    sizes = _label_sizes(lm.labels)
    _emit({"components": len(sizes), "sizes": sizes,
           "unlabeled": int((lm.labels == 0).sum())}, args.report)
    return 0


def cmd_segment3d(args) -> int:
    cloud = iof.read_ply(args.cloud)
    n_in = len(cloud)
    cloud = voxel_downsample(cloud, args.voxel)
    cloud = radius_outlier_filter(cloud, args.outlier_radius, args.outlier_min)
    if len(cloud) == 0:
        print("error: point cloud empty after preprocessing", file=sys.stderr)
        return EXIT_VALIDATION
    labeled = segment_3d(cloud, args.t, args.k_graph, args.keep, Metric.parse(args.metric))
    if args.out:
        iof.write_ply(args.out, labeled)
    sizes = _label_sizes(labeled.labels)
    _emit({"points_in": n_in, "points_used": len(labeled),
           "components": len(sizes), "sizes": sizes}, args.report)
    return 0


def cmd_transfer(args) -> int:
    cloud = iof.read_ply(args.cloud)
    if cloud.labels is None:
        print("error: cloud carries no labels", file=sys.stderr)
        return EXIT_VALIDATION
    depth = iof.read_tensor(args.depth, role="depth").astype(np.float64)
    cam = iof.read_camera(args.camera)
    lm = transfer_labels(cloud, depth, cam, args.k_query, args.d_max,
                         threads=thread_count(args.threads))
    if args.out:
        iof.write_labelmap_png(args.out, lm.labels)
    _emit({"labeled": int((lm.labels > 0).sum()),
           "unlabeled": int((lm.labels == 0).sum())}, args.report)
    return 0


def cmd_masktree(args) -> int:
    ms = iof.read_masks(args.masks)
    for idx, reason in ms.decode_errors:
        print(f"mask {idx} skipped: {reason}", file=sys.stderr)
    tree = build_mask_tree(ms, args.p_in, args.p_iou)
    payload = {
        "view_id": ms.view_id,
        "nodes": [
            {"id": n.index, "parent": n.parent, "area": n.area,
             "source_index": n.source_index}
            for n in tree.nodes
        ],
        "dropped": [{"source_index": i, "reason": r} for i, r in tree.dropped],
    }
    _emit(payload, args.out)
    return 0


def cmd_samplepairs(args) -> int:
    ms = iof.read_masks(args.masks)
    tree = build_mask_tree(ms, args.p_in, args.p_iou)
    batch = sample_pairs(tree, args.pairs, args.seed)
    payload = {
        "levels": [
            {
                "level": lv,
                "positives": [[list(a), list(b)] for a, b in batch.positives[lv]],
                "negatives": [[list(a), list(b)] for a, b in batch.negatives[lv]],
            }
            for lv in range(batch.level_count)
        ],
        "skipped_negatives": [{"node": n, "level": lv} for n, lv in batch.skipped_negatives],
    }
    _emit(payload, args.out)
    return 0


def _loss_graph(args, fmap: FeatureMap):
    metric = Metric.parse(args.metric)
    if args.graph == "grid":
        return grid_graph(fmap, metric)
    ids = sample_pixel_ids(fmap, args.sample_pixels, args.seed)
    k = min(args.knn, len(ids) - 1)
    return sampled_pixel_graph(fmap, ids, k, metric, args.seed)


def _grad_check_features(fmap, graph, bpt, batch, cfg, metric) -> float:
    base = feature_loss(fmap.data, graph, bpt, batch, cfg)

    def value_of(buf):
        g = reweight_graph(graph, buf, metric)
        return feature_loss(buf, g, build_bpt(g), batch, cfg).value

    h = 1e-5
    buf = fmap.data.copy()
    flat = buf.ravel()
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = value_of(buf)
        flat[i] = old - h
        down = value_of(buf)
        flat[i] = old
        fd[i] = (up - down) / (2 * h)
    a = base.gradient.ravel()
    return float(np.linalg.norm(a - fd) / max(np.linalg.norm(a), np.linalg.norm(fd), 1e-12))


def cmd_loss(args) -> int:
    fmap = FeatureMap(iof.read_tensor(args.features, role="features"))
    ms = iof.read_masks(args.masks)
    if (ms.height, ms.width) != (fmap.height, fmap.width):
        print("error: mask grid does not match feature map", file=sys.stderr)
        return EXIT_VALIDATION
    cfg = ContrastiveConfig(args.tau, args.alpha, args.exponent_sign, args.variant)
    metric = Metric.parse(args.metric)
    tree = build_mask_tree(ms, args.p_in, args.p_iou)
    batch = sample_pairs(tree, args.pairs, args.seed)
    graph = _loss_graph(args, fmap)
    bpt = build_bpt(graph)
    result = feature_loss(fmap.data, graph, bpt, batch, cfg)
    payload = {"feature_loss": {"value": result.value, "skipped": len(result.skipped)}}

    if args.depth:
        depth = iof.read_tensor(args.depth, role="depth").astype(np.float64)
        patches = _sample_depth_patches(depth, ms, args.patches, args.seed)
        dbatch = DepthPatchBatch(patches, args.dtheta, args.hinge)
        dres = depth_continuity_loss(dbatch)
        payload["depth_loss"] = {"value": dres.value, "skipped": len(dres.skipped)}

    if args.check_grad:
        err = _grad_check_features(fmap, graph, bpt, batch, cfg, metric)
        payload["grad_check"] = {"max_rel_error": err}
        if args.depth:
            derr = _grad_check_depth(args)
            payload["grad_check"]["depth_rel_error"] = derr
            err = max(err, derr)
        _emit(payload, args.out)
        print(f"max relative finite-difference error: {err:.3e}", file=sys.stderr)
        return 0 if err < 1e-4 else EXIT_VALIDATION
    _emit(payload, args.out)
    return 0


def _sample_depth_patches(depth: np.ndarray, ms, count: int, seed: int) -> np.ndarray:
    """Random 4x4 windows, each inside one of the finest (leaf-area) masks."""
    rng = np.random.default_rng(seed)
    h, w = depth.shape
    patches = []
    eligible = []
    for mask in ms.masks:
        rows, cols = np.nonzero(mask)
        for r, c in zip(rows, cols):
            if r + 4 <= h and c + 4 <= w and mask[r:r + 4, c:c + 4].all():
                eligible.append((r, c))
    if not eligible:
        raise ValueError("no mask admits a full 4x4 patch")
    eligible = np.asarray(eligible)
    picks = eligible[rng.integers(len(eligible), size=count)]
    for r, c in picks:
        patches.append(depth[r:r + 4, c:c + 4])
    return np.asarray(patches)


def _grad_check_depth(args) -> float:
    depth = iof.read_tensor(args.depth, role="depth").astype(np.float64)
    ms = iof.read_masks(args.masks)
    patches = _sample_depth_patches(depth, ms, args.patches, args.seed)
    batch = DepthPatchBatch(patches.copy(), args.dtheta, args.hinge)
    res = depth_continuity_loss(batch)
    h = 1e-5
    flat = patches.ravel()
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = depth_continuity_loss(DepthPatchBatch(patches, args.dtheta, args.hinge)).value
        flat[i] = old - h
        down = depth_continuity_loss(DepthPatchBatch(patches, args.dtheta, args.hinge)).value
        flat[i] = old
        fd[i] = (up - down) / (2 * h)
    a = res.gradient.ravel()
    return float(np.linalg.norm(a - fd) / max(np.linalg.norm(a), np.linalg.norm(fd), 1e-12))


def _read_mask_arrays(paths) -> list[np.ndarray]:
    masks = []
    for path in paths:
        ms = iof.read_masks(path)
        masks.extend(ms.masks)
    return masks


def cmd_eval_nc(args) -> int:
    gt = _read_mask_arrays(args.gt)
    pred = _read_mask_arrays(args.pred)
    score = nc_score(gt, pred)
    per_mask = [
        {"mask": i, "score": max((mask_iou(g, p) for p in pred), default=0.0)}
        for i, g in enumerate(gt)
    ]
    _emit({"score": score, "per_mask": per_mask, "per_view": [], "skipped": [],
           "config": {}}, args.out)
    return 0


def _segmenter_from_tensor(path, metric, min_pixels) -> tuple[Segmenter, FeatureMap]:
    fmap = FeatureMap(iof.read_tensor(path, role="features"))
    return Segmenter.from_feature_map(fmap, metric, min_size=min_pixels), fmap


def _placeholder_view(height: int, width: int, gt_masks) -> ViewData:
    cam = CameraModel(1.0, 1.0, (width - 1) / 2, (height - 1) / 2, width, height, np.eye(4))
    return ViewData(cam, np.ones((height, width)), gt_masks)


def cmd_eval_si(args) -> int:
    seg, fmap = _segmenter_from_tensor(args.features, Metric.parse(args.metric), args.min_pixels)
    gt = [iof.read_masks(p) for p in args.gt]
    view = _placeholder_view(fmap.height, fmap.width, gt)
    cfg = TrialConfig(args.trials, args.seed, _sweep(args))
    report = si_score([seg], [view], cfg, threads=thread_count(args.threads))
    _emit(report.to_json(), args.out)
    return 0


def _view_from_files(feat_path, depth_path, cam_path, gt_paths, vis_path, metric, min_pixels):
    seg, fmap = _segmenter_from_tensor(feat_path, metric, min_pixels)
    depth = iof.read_tensor(depth_path, role="depth").astype(np.float64)
    cam = iof.read_camera(cam_path)
    gt = [iof.read_masks(p) for p in gt_paths] if gt_paths else []
    vis = None
    if vis_path:
        vis_set = iof.read_masks(vis_path)
        vis = vis_set.masks[0]
    return seg, ViewData(cam, depth, gt, vis)


def cmd_eval_vc(args) -> int:
    metric = Metric.parse(args.metric)
    seg_src, src = _view_from_files(args.src_features, args.src_depth, args.src_camera,
                                    args.gt, args.src_visibility, metric, args.min_pixels)
    seg_dst, dst = _view_from_files(args.dst_features, args.dst_depth, args.dst_camera,
                                    None, args.dst_visibility, metric, args.min_pixels)
    cfg = TrialConfig(args.trials, args.seed, _sweep(args))
    report = vc_score(seg_src, seg_dst, src, dst, cfg, vis_tol=args.vis_tol,
                      threads=thread_count(args.threads))
    report.config["baseline_translation"] = float(
        np.linalg.norm(src.camera.translation - dst.camera.translation))
    _emit(report.to_json(), args.out)
    return 0


def cmd_bpt_export(args) -> int:
    metric = Metric.parse(args.metric)
    if bool(args.features) == bool(args.cloud):
        print("error: provide exactly one of --features / --cloud", file=sys.stderr)
        return EXIT_USAGE
    if args.features:
        fmap = FeatureMap(iof.read_tensor(args.features, role="features"))
        graph = grid_graph(fmap, metric)
    else:
        graph = knn_graph(iof.read_ply(args.cloud), args.k_graph, metric)
    iof.write_dendrogram_json(args.out, build_bpt(graph))
    print(f"dendrogram written to {args.out}", file=sys.stderr)
    return 0


def _hash_color(label: int) -> tuple[int, int, int]:
    # splitmix-style integer scramble; stable across runs by construction
    x = (label * 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x ^= x >> 27
    return (64 + (x & 0x7F), 64 + ((x >> 8) & 0x7F), 64 + ((x >> 16) & 0x7F))


def cmd_render_labels(args) -> int:
    from PIL import Image

    labels = iof.read_labelmap_png(args.labels)
    rgb = np.zeros((*labels.shape, 3), dtype=np.uint8)
    for label in np.unique(labels):
        if label == 0:
            continue
        rgb[labels == label] = _hash_color(int(label))
    Image.fromarray(rgb).save(args.out, format="PNG")
    print(f"rendering written to {args.out}", file=sys.stderr)
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metric", choices=["l2", "cosine"], default="l2")
    p.add_argument("--threads", type=int, default=None,
                   help="worker pool size (default: UMSEG_THREADS or 1)")


def _add_sweep(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sweep-min", type=float, default=0.01)
    p.add_argument("--sweep-max", type=float, default=0.50)
    p.add_argument("--sweep-count", type=int, default=50)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--min-pixels", type=int, default=20)


def build_parser() -> CliParser:
    parser = CliParser(prog="umseg", description=__doc__,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment2d", help="threshold-cut a feature map")
    p.add_argument("--features", required=True)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--min-pixels", type=int, default=20)
    p.add_argument("--out")
    p.add_argument("--report", help="write the JSON summary here instead of stdout")
    _add_common(p)
    p.set_defaults(func=cmd_segment2d)

    p = sub.add_parser("segment3d", help="preprocess and threshold-cut a point cloud")
    p.add_argument("--cloud", required=True)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--k-graph", type=int, default=16)
    p.add_argument("--keep", type=int, default=200)
    p.add_argument("--voxel", type=float, default=0.002)
    p.add_argument("--outlier-radius", type=float, default=0.004)
    p.add_argument("--outlier-min", type=int, default=1)
    p.add_argument("--out")
    p.add_argument("--report")
    _add_common(p)
    p.set_defaults(func=cmd_segment3d)

    p = sub.add_parser("transfer", help="transfer cloud labels into a novel view")
    p.add_argument("--cloud", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--k-query", type=int, default=5)
    p.add_argument("--d-max", type=float, default=0.005)
    p.add_argument("--out")
    p.add_argument("--report")
    _add_common(p)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("masktree", help="organize masks into an inclusion tree")
    p.add_argument("--masks", required=True)
    p.add_argument("--p-in", type=float, default=0.95)
    p.add_argument("--p-iou", type=float, default=0.85)
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(func=cmd_masktree)

    p = sub.add_parser("samplepairs", help="hierarchical positive/negative pair sampling")
    p.add_argument("--masks", required=True)
    p.add_argument("--pairs", type=int, default=64)
    p.add_argument("--p-in", type=float, default=0.95)
    p.add_argument("--p-iou", type=float, default=0.85)
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(func=cmd_samplepairs)

    p = sub.add_parser("loss", help="evaluate the feature and depth losses")
    p.add_argument("--features", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--pairs", type=int, default=64)
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--variant", choices=["two_term", "softplus"], default="two_term")
    p.add_argument("--exponent-sign", choices=["corrected", "as_printed"], default="corrected")
    p.add_argument("--p-in", type=float, default=0.95)
    p.add_argument("--p-iou", type=float, default=0.85)
    p.add_argument("--graph", choices=["grid", "sampled"], default="grid")
    p.add_argument("--sample-pixels", type=int, default=4096)
    p.add_argument("--knn", type=int, default=10)
    p.add_argument("--depth")
    p.add_argument("--patches", type=int, default=16)
    p.add_argument("--dtheta", type=float, default=1e-3)
    p.add_argument("--hinge", type=float, default=0.0)
    p.add_argument("--check-grad", action="store_true")
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("eval-nc", help="Normalized Covering score")
    p.add_argument("--gt", nargs="+", required=True)
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(func=cmd_eval_nc)

    p = sub.add_parser("eval-si", help="Segmentation Injectivity score")
    p.add_argument("--features", required=True)
    p.add_argument("--gt", nargs="+", required=True)
    p.add_argument("--out")
    _add_sweep(p)
    _add_common(p)
    p.set_defaults(func=cmd_eval_si)

    p = sub.add_parser("eval-vc", help="View Consistency score")
    p.add_argument("--src-features", required=True)
    p.add_argument("--dst-features", required=True)
    p.add_argument("--src-depth", required=True)
    p.add_argument("--dst-depth", required=True)
    p.add_argument("--src-camera", required=True)
    p.add_argument("--dst-camera", required=True)
    p.add_argument("--gt", nargs="+", required=True, help="source-view mask files")
    p.add_argument("--src-visibility")
    p.add_argument("--dst-visibility")
    p.add_argument("--vis-tol", type=float, default=0.01)
    p.add_argument("--out")
    _add_sweep(p)
    _add_common(p)
    p.set_defaults(func=cmd_eval_vc)

    p = sub.add_parser("bpt-export", help="export the partition tree as JSON")
    p.add_argument("--features")
    p.add_argument("--cloud")
    p.add_argument("--k-graph", type=int, default=16)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_bpt_export)

    p = sub.add_parser("render-labels", help="color-render a label map")
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_render_labels)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except IsADirectoryError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except iof.FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
