"""Analytic two-plane scene for end-to-end validation and demos.

Two textured planes: a near rectangle floating in front of an infinite far
plane, both fronto-parallel, rendered into two cameras separated by a pure
x-translation chosen so every pixel center of either view lands exactly on
a shared world-space texel lattice. Depth maps, hierarchical masks (scene /
object / part) and cross-view correspondence are all closed-form, which
makes the scene a fixture factory: features live in a per-texel atlas, each
view renders by texel lookup, and per-pixel loss gradients scatter back
into the atlas, standing in for the out-of-scope volumetric renderer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .graphs import FeatureMap, grid_graph
from .hierarchy import build_bpt
from .losses import ContrastiveConfig, feature_loss, reweight_graph
from .mask_forest import MaskSet, MaskTree, build_mask_tree, sample_pairs
from .metrics import CameraModel, ViewData


@dataclass
class SceneView:
    name: str
    camera: CameraModel
    depth: np.ndarray
    mask_set: MaskSet           # object + part masks, tree-buildable
    gt_levels: list[MaskSet]    # [scene], [objects], [parts]
    texel_index: np.ndarray     # (h, w) -> atlas row

    def view_data(self) -> ViewData:
        return ViewData(self.camera, self.depth, self.gt_levels)

    def mask_tree(self) -> MaskTree:
        return build_mask_tree(self.mask_set)


@dataclass
class TwoPlaneScene:
    views: list[SceneView]
    texel_count: int

    def render(self, view: SceneView, atlas: np.ndarray) -> FeatureMap:
        return FeatureMap(atlas[view.texel_index])


def build_two_plane_scene(
    size: int = 48,
    shift: float = 0.25,
    near_z: float = 2.0,
    far_z: float = 3.0,
    rect_x: tuple[float, float] = (-0.6, 0.2),
    rect_y: tuple[float, float] = (-0.5, 0.5),
    split_x: float = -0.2,
    far_rect_x: tuple[float, float] = (0.35, 1.15),
    far_rect_y: tuple[float, float] = (-0.6, 0.6),
) -> TwoPlaneScene:
    """Build the scene; shift must put both views on one texel lattice.

    Objects are two compact textured rectangles: one on the near plane
    (splitting into left/right parts at split_x) and one painted on the
    far plane clear of the near rectangle's shadow in both views
    (splitting into top/bottom parts at y=0). The remaining far-plane
    backdrop belongs only to the scene root. Compact masks keep the fixed
    per-mask sampling budget dense enough to converge to exact recovery.
    """
    fl = float(size)
    cx = cy = (size - 1) / 2.0
    pitches = (near_z / fl, far_z / fl)
    for pitch in pitches:
        ratio = shift / pitch
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("camera shift must be an integer number of texels per plane")

    texel_of: dict[tuple[int, int, int], int] = {}
    views: list[SceneView] = []
    for name, tx in (("src", 0.0), ("dst", shift)):
        pose = np.eye(4)
        pose[0, 3] = tx
        cam = CameraModel(fl, fl, cx, cy, size, size, pose)

        cols, rows = np.meshgrid(np.arange(size), np.arange(size))
        dx = (cols - cx) / fl
        dy = -(rows - cy) / fl
        near_x = tx + dx * near_z
        near_y = dy * near_z
        near = (
            (near_x >= rect_x[0]) & (near_x < rect_x[1])
            & (near_y >= rect_y[0]) & (near_y < rect_y[1])
        )
        depth = np.where(near, near_z, far_z)
        world_x = np.where(near, near_x, tx + dx * far_z)
        world_y = np.where(near, near_y, dy * far_z)

        plane = np.where(near, 0, 1)
        pitch = np.where(near, pitches[0], pitches[1])
        qx = world_x / pitch - 0.5
        qy = world_y / pitch - 0.5
        if max(np.abs(qx - np.rint(qx)).max(), np.abs(qy - np.rint(qy)).max()) > 1e-6:
            raise ValueError("pixel centers do not land on the texel lattice")
        qx = np.rint(qx).astype(np.int64)
        qy = np.rint(qy).astype(np.int64)

        texel_index = np.empty((size, size), dtype=np.int64)
        for r in range(size):
            for c in range(size):
                key = (int(plane[r, c]), int(qx[r, c]), int(qy[r, c]))
                if key not in texel_of:
                    texel_of[key] = len(texel_of)
                texel_index[r, c] = texel_of[key]

        far_rect = (
            ~near
            & (world_x >= far_rect_x[0]) & (world_x < far_rect_x[1])
            & (world_y >= far_rect_y[0]) & (world_y < far_rect_y[1])
        )
        near_left = near & (world_x < split_x)
        near_right = near & (world_x >= split_x)
        far_top = far_rect & (world_y >= 0)
        far_bottom = far_rect & (world_y < 0)
        backdrop = ~(near | far_rect)
        objects = [near, far_rect]
        parts = [near_left, near_right, far_top, far_bottom]
        # the backdrop trains (keeping its features coherent) but is not a
        # ground-truth segment, mirroring how training masks and gt differ
        train_masks = objects + parts + [backdrop]
        views.append(
            SceneView(
                name=name,
                camera=cam,
                depth=depth,
                mask_set=MaskSet(name, size, size, [m.copy() for m in train_masks]),
                gt_levels=[
                    MaskSet(f"{name}/scene", size, size, [np.ones((size, size), bool)]),
                    MaskSet(f"{name}/object", size, size, [m.copy() for m in objects]),
                    MaskSet(f"{name}/part", size, size, [m.copy() for m in parts]),
                ],
                texel_index=texel_index,
            )
        )
    return TwoPlaneScene(views, len(texel_of))


def train_features(
    scene: TwoPlaneScene,
    dim: int = 4,
    steps: int = 1000,
    lr: float = 6e-4,
    lr_final: float = 1e-4,
    pairs_per_mask: int = 64,
    cfg: ContrastiveConfig | None = None,
    seed: int = 0,
    init_scale: float = 0.005,
) -> np.ndarray:
    """Plain gradient descent on the feature loss, into the shared atlas.

    Per step and view: render the atlas, reweight the fixed grid topology,
    rebuild the partition tree, sample a fresh hierarchical pair batch and
    accumulate per-pixel gradients back into atlas rows. The learning rate
    decays geometrically to lr_final; sampled pushes put single pixels on
    a random walk whose stationary spread scales with the step size, so
    the annealing is what settles the last strays into their segments.
    The default temperature is small so the contrastive margins (a few
    multiples of it) leave frozen, well-separated weight bands.
    """
    if cfg is None:
        cfg = ContrastiveConfig(temperature=0.02, euclid_weight=1.0, variant="softplus")
    rng = np.random.default_rng(seed)
    atlas = rng.normal(0.0, init_scale, (scene.texel_count, dim))
    trees = [v.mask_tree() for v in scene.views]
    topologies = [grid_graph(scene.render(v, atlas)) for v in scene.views]
    for step in range(steps):
        frac = step / max(1, steps - 1)
        rate = lr * (lr_final / lr) ** frac  # geometric decay
        grad = np.zeros_like(atlas)
        for vi, view in enumerate(scene.views):
            fmap = scene.render(view, atlas)
            g = reweight_graph(topologies[vi], fmap.data)
            bpt = build_bpt(g)
            batch = sample_pairs(trees[vi], pairs_per_mask, seed=seed * 100003 + step * 7 + vi)
            result = feature_loss(fmap.data, g, bpt, batch, cfg)
            flat = result.gradient.reshape(-1, dim)
            np.add.at(grad, view.texel_index.ravel(), flat)
        atlas -= rate * grad
    return atlas


def scale_to_sweep(scene: TwoPlaneScene, atlas: np.ndarray, target_max: float = 0.42) -> np.ndarray:
    """Scale the atlas so every view's scene-merge altitude hits target_max.

    The anchor is the partition-tree root altitude (the largest minimax
    level any cut can see), not the largest raw edge: stray heavy edges
    inside a segment never affect a cut. Distances are homogeneous in the
    features, so scaling preserves every cut while placing all
    granularities inside the evaluation sweep.
    """
    peak = 0.0
    for view in scene.views:
        bpt = build_bpt(grid_graph(scene.render(view, atlas)))
        if bpt.internal_count:
            peak = max(peak, float(bpt.altitude.max()))
    if peak == 0.0:
        return atlas.copy()
    return atlas * (target_max / peak)


def sweep_prediction_masks(seg, sweep, min_pixels: int = 20) -> list[np.ndarray]:
    """All threshold-cut components over the sweep, as 2D masks."""
    preds = []
    for t in sweep:
        labels = seg.cut(float(t))
        for comp in np.unique(labels):
            m = labels == comp
            if m.sum() >= min_pixels:
                preds.append(m.reshape(seg.shape))
    return preds


def scene_point_cloud(scene: TwoPlaneScene, atlas: np.ndarray) -> "PointCloud":
    """Back-project every pixel of every view into one featurized cloud."""
    from .graphs import PointCloud

    positions = []
    feats = []
    for view in scene.views:
        h, w = view.depth.shape
        pix = np.argwhere(np.ones((h, w), bool)).astype(np.float64)
        world = view.camera.back_project(pix, view.depth.ravel())
        positions.append(world)
        feats.append(atlas[view.texel_index].reshape(-1, atlas.shape[1]))
    return PointCloud(np.vstack(positions), np.vstack(feats))


def run_pipeline(
    steps: int = 1000,
    seed: int = 3,
    trials: int = 100,
    size: int = 48,
    threads: int = 1,
    out_dir=None,
) -> dict:
    """Full desk-scale flow: masks -> sampling -> training -> 2D/3D cuts ->
    label transfer -> NC/SI/VC evaluation. Returns the score summary; when
    out_dir is given, every intermediate artifact is also written to disk
    in the package's file formats.
    """
    from pathlib import Path

    from .graphs import radius_outlier_filter, voxel_downsample
    from .metrics import TrialConfig, default_sweep, nc_score, si_score, vc_score
    from .segmentation import CloudViewSegmenter, Segmenter, transfer_labels

    scene = build_two_plane_scene(size=size)
    atlas = train_features(scene, steps=steps, seed=seed)
    atlas = scale_to_sweep(scene, atlas)
    sweep = default_sweep()

    segs = []
    views = []
    fmaps = []
    for view in scene.views:
        fmap = scene.render(view, atlas)
        fmaps.append(fmap)
        segs.append(Segmenter.from_feature_map(fmap, min_size=20))
        views.append(view.view_data())

    nc_per_view = []
    for view, seg in zip(scene.views, segs):
        preds = sweep_prediction_masks(seg, sweep)
        levels = [nc_score(ms.masks, preds) for ms in view.gt_levels]
        nc_per_view.append({"levels": levels, "mean": float(np.mean(levels))})
    nc_mean = float(np.mean([v["mean"] for v in nc_per_view]))

    cfg = TrialConfig(trials_per_mask=trials, seed=seed, threshold_sweep=sweep)
    si = si_score(segs, views, cfg, threads=threads)

    # 3D path: cloud from both views, preprocess, shared partition. All
    # views query one partition, so cross-view consistency is structural;
    # this is the view-consistent inference mode that VC evaluates.
    cloud = scene_point_cloud(scene, atlas)
    spacing = scene.views[0].depth.min() / scene.views[0].camera.fl_x
    cloud = voxel_downsample(cloud, voxel=0.5 * spacing)
    cloud = radius_outlier_filter(cloud, radius=3.0 * spacing, min_neighbors=1)
    seg3d = Segmenter.from_point_cloud(cloud, k_graph=16, min_size=1)
    view_segs = [
        CloudViewSegmenter(seg3d, cloud, v.camera, v.depth,
                           k_query=5, d_max=0.25 * spacing, min_size=20)
        for v in scene.views
    ]
    vc = vc_score(view_segs[0], view_segs[1], views[0], views[1], cfg, threads=threads)
    src_view = scene.views[0]
    part_masks = src_view.gt_levels[2].masks
    nc_3d = 0.0
    t_3d = None
    for t in sweep[::5]:
        labels3 = seg3d.cut(float(t))
        order = np.argsort(-np.bincount(labels3), kind="stable")[:200]
        relabeled = np.zeros(len(cloud), dtype=np.int64)
        for rank, comp in enumerate(order):
            relabeled[labels3 == comp] = rank + 1
        labeled_cloud = type(cloud)(cloud.positions, cloud.features, relabeled)
        lm = transfer_labels(labeled_cloud, src_view.depth, src_view.camera,
                             k_query=5, d_max=0.25 * spacing, threads=threads)
        masks3 = [lm.labels == i for i in np.unique(lm.labels) if i > 0]
        masks3 = [m for m in masks3 if m.sum() >= 20]
        if masks3:
            score = nc_score(part_masks, masks3)
            if score > nc_3d:
                nc_3d, t_3d = score, float(t)

    results = {
        "nc_mean": nc_mean,
        "nc_per_view": nc_per_view,
        "si": si.score,
        "vc": vc.score,
        "nc_3d_parts": nc_3d,
        "t_3d": t_3d,
        "cloud_points": len(cloud),
        "config": {"steps": steps, "seed": seed, "trials": trials, "size": size},
    }

    if out_dir is not None:
        from . import io_formats as iof

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for view, fmap, seg in zip(scene.views, fmaps, segs):
            iof.write_tensor(out / f"{view.name}_features.uft", fmap.data)
            iof.write_tensor(out / f"{view.name}_depth.uft", view.depth.astype(np.float64))
            iof.write_camera(out / f"{view.name}_camera.json", view.camera)
            iof.write_masks(out / f"{view.name}_train_masks.json", view.mask_set)
            for level, ms in zip(("scene", "object", "part"), view.gt_levels):
                iof.write_masks(out / f"{view.name}_gt_{level}.json", ms)
            if t_3d is not None:
                from .segmentation import segment_2d

                lm = segment_2d(fmap, t_3d, min_pixels=20)
                iof.write_labelmap_png(out / f"{view.name}_labels.png", lm.labels)
        iof.write_ply(out / "cloud.ply", cloud)
        (out / "results.json").write_text(
            json.dumps(results, sort_keys=True, indent=2, default=float))
    return results


def edge_weight_bands(scene: TwoPlaneScene, atlas: np.ndarray) -> dict[str, tuple[float, float]]:
    """(min, max) grid-edge weight within parts, across parts, across objects."""
    bands = {"within_part": [], "part_boundary": [], "object_boundary": []}
    for view in scene.views:
        parts = view.gt_levels[2].masks
        objects = view.gt_levels[1].masks
        part_id = np.zeros(view.depth.shape, dtype=np.int64)
        for i, m in enumerate(parts):
            part_id[m] = i
        obj_id = np.zeros(view.depth.shape, dtype=np.int64)
        for i, m in enumerate(objects):
            obj_id[m] = i
        g = grid_graph(scene.render(view, atlas))
        pu = part_id.ravel()[g.edges_u]
        pv = part_id.ravel()[g.edges_v]
        ou = obj_id.ravel()[g.edges_u]
        ov = obj_id.ravel()[g.edges_v]
        bands["within_part"].append(g.weights[pu == pv])
        bands["part_boundary"].append(g.weights[(pu != pv) & (ou == ov)])
        bands["object_boundary"].append(g.weights[ou != ov])
    return {
        name: (float(np.concatenate(ws).min()), float(np.concatenate(ws).max()))
        for name, ws in bands.items()
    }
