"""Segmentation quality scores and the camera geometry they rely on.

Cameras follow the Blender convention: the camera looks along -Z with +X
right and +Y up; cam_to_world is a row-major 4x4. "Depth" is the positive
distance along the optical axis. Pixel coordinates are (row, col) with
integer pixel centers.

Scores: Normalized Covering (mean best IoU per ground-truth mask),
Segmentation Injectivity (mask agreement for two queries inside one
ground-truth segment at matched granularity) and View Consistency (IoU of
independently predicted masks after depth warping, on mutually visible
pixels). SI and VC search the granularity per trial by sweeping thresholds
anchored at the first query point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mask_forest import MaskSet
from .parallel import parallel_map


@dataclass
class CameraModel:
    fl_x: float
    fl_y: float
    cx: float
    cy: float
    width: int
    height: int
    cam_to_world: np.ndarray

    def __post_init__(self):
        self.cam_to_world = np.asarray(self.cam_to_world, dtype=np.float64)
        if self.cam_to_world.shape != (4, 4):
            raise ValueError("cam_to_world must be 4x4")
        if self.fl_x <= 0 or self.fl_y <= 0:
            raise ValueError("focal lengths must be positive")
        r = self.cam_to_world[:3, :3]
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-6:
            raise ValueError("rotation block is not orthonormal within 1e-6")

    @property
    def rotation(self) -> np.ndarray:
        return self.cam_to_world[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.cam_to_world[:3, 3]

    def back_project(self, pixels: np.ndarray, depths: np.ndarray) -> np.ndarray:
        """(n, 2) row/col pixels at positive depths -> (n, 3) world points."""
        pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        depths = np.asarray(depths, dtype=np.float64)
        x = (pixels[:, 1] - self.cx) / self.fl_x * depths
        y = -(pixels[:, 0] - self.cy) / self.fl_y * depths
        z = -depths
        cam = np.column_stack([x, y, z])
        return cam @ self.rotation.T + self.translation

    def project(self, world: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points -> ((n, 2) row/col pixels, (n,) depths).

        Depth <= 0 marks a point behind the camera; its pixel is NaN.
        """
        world = np.atleast_2d(np.asarray(world, dtype=np.float64))
        cam = (world - self.translation) @ self.rotation
        depth = -cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            col = self.cx + self.fl_x * cam[:, 0] / depth
            row = self.cy - self.fl_y * cam[:, 1] / depth
        pixels = np.column_stack([row, col])
        pixels[depth <= 0] = np.nan
        return pixels, depth


@dataclass
class ViewData:
    camera: CameraModel
    depth: np.ndarray
    gt_masks: list[MaskSet] = field(default_factory=list)
    visibility: np.ndarray | None = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.shape != (self.camera.height, self.camera.width):
            raise ValueError(
                f"depth shape {self.depth.shape} does not match camera "
                f"({self.camera.height}, {self.camera.width})"
            )


def default_sweep() -> np.ndarray:
    return np.linspace(0.01, 0.50, 50)


@dataclass
class TrialConfig:
    trials_per_mask: int = 100
    seed: int = 0
    threshold_sweep: np.ndarray = field(default_factory=default_sweep)

    def __post_init__(self):
        if self.trials_per_mask < 1:
            raise ValueError("trials_per_mask must be >= 1")
        self.threshold_sweep = np.asarray(self.threshold_sweep, dtype=np.float64)
        if len(self.threshold_sweep) == 0:
            raise ValueError("threshold sweep must be nonempty")
        if np.any(np.diff(self.threshold_sweep) < 0):
            raise ValueError("threshold sweep must be ascending")


@dataclass
class MetricReport:
    score: float
    per_mask: list = field(default_factory=list)
    per_view: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "score": self.score,
            "per_mask": self.per_mask,
            "per_view": self.per_view,
            "skipped": self.skipped,
            "config": self.config,
        }


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = int(np.logical_and(a, b).sum())
    union = int(np.logical_or(a, b).sum())
    return inter / union if union else 0.0


def nc_score(gt: list[np.ndarray], pred: list[np.ndarray]) -> float:
    """Mean over ground-truth masks of the best IoU with any prediction."""
    if not gt:
        raise ValueError("ground truth mask list is empty")
    if not pred:
        return 0.0
    shape = gt[0].shape
    for m in (*gt, *pred):
        if m.shape != shape:
            raise ValueError("all masks must share one grid")
    best = [max(mask_iou(g, p) for p in pred) for g in gt]
    return float(np.mean(best))


def best_threshold(seg, gt_mask: np.ndarray, anchor, sweep: np.ndarray) -> float | None:
    """Sweep threshold maximizing IoU(gt, query at anchor); ties to smallest.

    Returns None when every query along the sweep comes back empty.
    """
    best_t = None
    best_iou = -1.0
    for t in sweep:
        m = seg.query(anchor, float(t))
        if not m.any():
            continue
        iou = mask_iou(gt_mask, m)
        if iou > best_iou:
            best_iou = iou
            best_t = float(t)
    return best_t


def _mask_pixels(mask: np.ndarray) -> np.ndarray:
    rows, cols = np.nonzero(mask)
    return np.column_stack([rows, cols])


def _iter_masks(views: list[ViewData]):
    for vi, view in enumerate(views):
        mi = 0
        for ms in view.gt_masks:
            for mask in ms.masks:
                yield vi, mi, view, mask
                mi += 1


def si_score(segs, views: list[ViewData], cfg: TrialConfig, threads: int = 1) -> MetricReport:
    """Segmentation Injectivity over per-view segmenters.

    segs is one segmenter per view (a single segmenter is broadcast). Per
    trial: anchor the threshold search at p1, query at p1 and p2 drawn from
    the same ground-truth mask, and take the IoU of the two masks. Masks
    evaluate independently on per-mask RNG substreams, so the result does
    not depend on the thread count.
    """
    if not isinstance(segs, (list, tuple)):
        segs = [segs] * len(views)
    if len(segs) != len(views):
        raise ValueError("need one segmenter per view")
    entries = list(_iter_masks(views))
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(entries))

    def run_mask(job):
        (vi, mi, _view, mask), ss = job
        pixels = _mask_pixels(mask)
        if len(pixels) < 2:
            return vi, mi, [], [{"view": vi, "mask": mi, "reason": "mask smaller than 2 pixels"}]
        rng = np.random.default_rng(ss)
        seg = segs[vi]
        trial_scores = []
        skipped = []
        for _ in range(cfg.trials_per_mask):
            p1 = tuple(pixels[rng.integers(len(pixels))])
            p2 = tuple(pixels[rng.integers(len(pixels))])
            t = best_threshold(seg, mask, p1, cfg.threshold_sweep)
            if t is None:
                skipped.append({"view": vi, "mask": mi, "reason": "all queries empty"})
                continue
            m1 = seg.query(p1, t)
            m2 = seg.query(p2, t)
            trial_scores.append(mask_iou(m1, m2) if (m1.any() or m2.any()) else 0.0)
        return vi, mi, trial_scores, skipped

    results = parallel_map(run_mask, zip(entries, seeds), threads)
    scores: list[float] = []
    per_mask = []
    per_view: dict[int, list[float]] = {}
    skipped = []
    for vi, mi, trial_scores, mask_skipped in results:
        skipped.extend(mask_skipped)
        if trial_scores:
            scores.extend(trial_scores)
            per_mask.append({"view": vi, "mask": mi, "score": float(np.mean(trial_scores))})
            per_view.setdefault(vi, []).extend(trial_scores)
    score = float(np.mean(scores)) if scores else 0.0
    return MetricReport(
        score=score,
        per_mask=per_mask,
        per_view=[{"view": vi, "score": float(np.mean(v))} for vi, v in sorted(per_view.items())],
        skipped=skipped,
        config={"trials_per_mask": cfg.trials_per_mask, "seed": cfg.seed,
                "sweep": cfg.threshold_sweep.tolist()},
    )


def warp_pixels(
    pixels: np.ndarray, depths: np.ndarray, src: CameraModel, dst: CameraModel
) -> tuple[np.ndarray, np.ndarray]:
    """Warp (n, 2) row/col pixels with source depths into dst.

    Returns (pixels', depths'); points behind dst carry NaN pixels and a
    nonpositive depth.
    """
    world = src.back_project(pixels, depths)
    return dst.project(world)


def warp_pixel(p, depth: float, src: CameraModel, dst: CameraModel):
    """Scalar warp; (nan, nan) marks a point behind the destination camera."""
    if depth <= 0:
        raise ValueError("depth must be positive")
    pixels, _ = warp_pixels(np.array([p], dtype=np.float64), np.array([depth]), src, dst)
    return float(pixels[0, 0]), float(pixels[0, 1])


def visibility_mask(src: ViewData, dst: ViewData, tol: float = 0.01) -> np.ndarray:
    """Pixels of src whose warp lands in dst and agrees with dst's depth.

    A reprojection test substitutes for ray-cast ground truth: a source
    pixel is visible iff its warped position is inside the destination
    image and the warped point's depth matches the destination depth map
    within the relative tolerance. A precomputed src.visibility overrides.
    """
    if src.visibility is not None:
        return np.asarray(src.visibility, dtype=bool)
    h, w = src.depth.shape
    visible = np.zeros((h, w), dtype=bool)
    valid = np.isfinite(src.depth) & (src.depth > 0)
    if not valid.any():
        return visible
    pix = np.argwhere(valid)
    warped, z = warp_pixels(pix.astype(np.float64), src.depth[valid], src.camera, dst.camera)
    ok = np.isfinite(warped).all(axis=1) & (z > 0)
    r = np.full(len(pix), -1, dtype=np.int64)
    c = np.full(len(pix), -1, dtype=np.int64)
    r[ok] = np.rint(warped[ok, 0]).astype(np.int64)
    c[ok] = np.rint(warped[ok, 1]).astype(np.int64)
    dh, dw = dst.depth.shape
    inb = ok & (r >= 0) & (r < dh) & (c >= 0) & (c < dw)
    dst_depth = np.zeros(len(pix))
    dst_depth[inb] = dst.depth[r[inb], c[inb]]
    agree = inb & (dst_depth > 0) & (np.abs(z - dst_depth) <= tol * dst_depth)
    visible[pix[agree, 0], pix[agree, 1]] = True
    return visible


def _warp_mask(mask: np.ndarray, src: ViewData, dst: ViewData) -> np.ndarray:
    """Rasterize a source-view mask into the destination grid (nearest px)."""
    out = np.zeros(dst.depth.shape, dtype=bool)
    pix = np.argwhere(mask & (src.depth > 0))
    if not len(pix):
        return out
    warped, z = warp_pixels(pix.astype(np.float64), src.depth[pix[:, 0], pix[:, 1]],
                            src.camera, dst.camera)
    ok = np.isfinite(warped).all(axis=1) & (z > 0)
    r = np.rint(warped[ok, 0]).astype(np.int64)
    c = np.rint(warped[ok, 1]).astype(np.int64)
    inb = (r >= 0) & (r < out.shape[0]) & (c >= 0) & (c < out.shape[1])
    out[r[inb], c[inb]] = True
    return out


def vc_score(
    seg_src,
    seg_dst,
    src: ViewData,
    dst: ViewData,
    cfg: TrialConfig,
    vis_tol: float = 0.01,
    retry_cap: int = 20,
    threads: int = 1,
) -> MetricReport:
    """View Consistency between independently segmented nearby views.

    Per trial: p1 is drawn from a ground-truth mask of the source view
    (resampled up to retry_cap until visible in the destination), the
    granularity is matched by the source-view threshold sweep anchored at
    p1, and the source mask is warped into the destination for an IoU with
    the destination query, restricted to mutually visible pixels.
    """
    src_vis = visibility_mask(src, dst, vis_tol)   # src pixels visible in dst
    dst_vis = visibility_mask(dst, src, vis_tol)   # dst pixels visible in src
    entries = list(_iter_masks([src]))
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(entries))

    def run_mask(job):
        (_, mi, _, mask), ss = job
        pixels = _mask_pixels(mask)
        if not len(pixels):
            return mi, [], [{"mask": mi, "reason": "empty mask"}]
        rng = np.random.default_rng(ss)
        trial_scores = []
        skipped = []
        for _ in range(cfg.trials_per_mask):
            p1 = None
            for _ in range(retry_cap):
                cand = tuple(pixels[rng.integers(len(pixels))])
                if src_vis[cand]:
                    p1 = cand
                    break
            if p1 is None:
                skipped.append({"mask": mi, "reason": "no visible sample within retry cap"})
                continue
            t = best_threshold(seg_src, mask, p1, cfg.threshold_sweep)
            if t is None:
                skipped.append({"mask": mi, "reason": "all queries empty"})
                continue
            row2, col2 = warp_pixel(p1, float(src.depth[p1]), src.camera, dst.camera)
            p2 = (int(round(row2)), int(round(col2)))
            a1 = seg_src.query(p1, t)
            a2 = seg_dst.query(p2, t)
            warped_a1 = _warp_mask(a1, src, dst)
            num = int((warped_a1 & a2 & dst_vis).sum())
            den = int(((warped_a1 | a2) & dst_vis).sum())
            trial_scores.append(num / den if den else 0.0)
        return mi, trial_scores, skipped

    results = parallel_map(run_mask, zip(entries, seeds), threads)
    scores: list[float] = []
    per_mask = []
    skipped = []
    for mi, trial_scores, mask_skipped in results:
        skipped.extend(mask_skipped)
        if trial_scores:
            scores.extend(trial_scores)
            per_mask.append({"mask": mi, "score": float(np.mean(trial_scores))})
    score = float(np.mean(scores)) if scores else 0.0
    return MetricReport(
        score=score,
        per_mask=per_mask,
        per_view=[],
        skipped=skipped,
        config={"trials_per_mask": cfg.trials_per_mask, "seed": cfg.seed,
                "sweep": cfg.threshold_sweep.tolist(), "vis_tol": vis_tol},
    )


def depth_error(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean absolute depth difference over valid (finite, gt > 0) pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("depth maps must share dimensions")
    valid = np.isfinite(pred) & np.isfinite(gt) & (gt > 0)
    if not valid.any():
        raise ValueError("no valid pixels")
    return float(np.mean(np.abs(pred[valid] - gt[valid])))
