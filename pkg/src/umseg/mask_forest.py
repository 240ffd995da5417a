"""Per-view mask hierarchies and hierarchical pair sampling.

Input masks (multi-granular, overlapping) are organized into a tree by
inclusion ratio: mask A becomes a child of the smallest-area mask B with
|A∩B|/|A| > p_in and |A∩B|/|A∪B| < p_iou. A synthetic all-positive root
covers every pixel. The sampler walks each leaf's root path, emitting one
positive pair per level and sampling a fresh negative pair across the
current mask's boundary inside its parent; the negative is carried upward
and becomes the next level's positive.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Pixel = tuple[int, int]
PixelPair = tuple[Pixel, Pixel]


@dataclass
class MaskSet:
    view_id: str
    height: int
    width: int
    masks: list[np.ndarray]
    decode_errors: list[tuple[int, str]] = field(default_factory=list)

    def __post_init__(self):
        for i, m in enumerate(self.masks):
            m = np.asarray(m, dtype=bool)
            if m.shape != (self.height, self.width):
                raise ValueError(f"mask {i} shape {m.shape} != ({self.height}, {self.width})")
            if not m.any():
                raise ValueError(f"mask {i} is empty")
            self.masks[i] = m


@dataclass
class MaskTreeNode:
    index: int                  # node id in the tree
    mask: np.ndarray
    parent: int                 # -1 for the root
    children: list[int] = field(default_factory=list)
    source_index: int | None = None  # position in the input MaskSet; None for root

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class MaskTree:
    height: int
    width: int
    nodes: list[MaskTreeNode]
    dropped: list[tuple[int, str]] = field(default_factory=list)

    @property
    def root(self) -> MaskTreeNode:
        return self.nodes[0]

    def leaves(self) -> list[MaskTreeNode]:
        return [n for n in self.nodes if not n.children and n.parent >= 0]

    def validate(self) -> None:
        """Structural check: single root, acyclic, parent links in range."""
        roots = [n for n in self.nodes if n.parent < 0]
        if len(roots) != 1 or roots[0].index != 0:
            raise ValueError("tree must have exactly one root at index 0")
        for n in self.nodes:
            seen = set()
            x = n.index
            while self.nodes[x].parent >= 0:
                if x in seen:
                    raise ValueError(f"cycle through node {n.index}")
                seen.add(x)
                x = self.nodes[x].parent


@dataclass
class PairBatch:
    """Level-indexed positive/negative pixel pairs; level 0 is the leaves."""

    positives: list[list[PixelPair]]
    negatives: list[list[PixelPair]]
    skipped_negatives: list[tuple[int, int]] = field(default_factory=list)  # (node, level)

    @property
    def level_count(self) -> int:
        return len(self.positives)


def inclusion_stats(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """(|A∩B|/|A|, |A∩B|/|A∪B|) for two masks on one grid."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError("masks must share a grid")
    area_a = int(a.sum())
    if area_a == 0:
        raise ValueError("mask A is empty")
    inter = int(np.logical_and(a, b).sum())
    union = int(np.logical_or(a, b).sum())
    return inter / area_a, inter / union


def build_mask_tree(ms: MaskSet, p_in: float = 0.95, p_iou: float = 0.85) -> MaskTree:
    """Organize masks by the inclusion predicate under a synthetic full root.

    Near-duplicates (iou >= p_iou with an already-placed mask) are dropped
    and reported. Each surviving mask attaches to its smallest strictly
    larger qualifying mask, or to the root when none qualifies; the area
    constraint keeps the parent relation acyclic for any thresholds.
    """
    root_mask = np.ones((ms.height, ms.width), dtype=bool)
    nodes = [MaskTreeNode(index=0, mask=root_mask, parent=-1)]
    dropped: list[tuple[int, str]] = []

    placed: list[MaskTreeNode] = []
    for src_idx, mask in enumerate(ms.masks):
        dup = None
        for other in placed:
            _, iou = inclusion_stats(mask, other.mask)
            if iou >= p_iou:
                dup = other
                break
        if dup is not None:
            dropped.append((src_idx, f"near-duplicate of mask {dup.source_index} (iou >= {p_iou})"))
            continue
        node = MaskTreeNode(index=len(nodes), mask=mask, parent=-1, source_index=src_idx)
        nodes.append(node)
        placed.append(node)

    for node in placed:
        best = None
        for other in placed:
            if other.index == node.index or other.area <= node.area:
                continue
            in_ratio, iou = inclusion_stats(node.mask, other.mask)
            if in_ratio > p_in and iou < p_iou:
                if best is None or other.area < best.area:
                    best = other
        node.parent = best.index if best is not None else 0
        nodes[node.parent].children.append(node.index)

    tree = MaskTree(ms.height, ms.width, nodes, dropped)
    tree.validate()
    return tree


def _mask_pixels(mask: np.ndarray) -> np.ndarray:
    rows, cols = np.nonzero(mask)
    return np.column_stack([rows, cols])


def _draw(pixels: np.ndarray, rng: np.random.Generator) -> Pixel:
    i = int(rng.integers(len(pixels)))
    return (int(pixels[i, 0]), int(pixels[i, 1]))


def sample_pairs(tree: MaskTree, pairs_per_mask: int, seed: int) -> PairBatch:
    """Leaf-to-root pair sampling, run pairs_per_mask times per leaf.

    Each walk starts with a positive pair inside the leaf; at every level
    the carried pair is emitted as that level's positive, a negative pair
    (one pixel in the mask, one in parent-minus-mask) is emitted, and the
    negative is carried upward. A level whose parent fully covers the mask
    has no boundary to straddle; its negative is skipped and reported, and
    the carried pair survives to the next level.
    """
    if pairs_per_mask < 1:
        raise ValueError("pairs_per_mask must be >= 1")
    tree.validate()
    rng = np.random.default_rng(seed)

    pixels = {n.index: _mask_pixels(n.mask) for n in tree.nodes}
    ring: dict[int, np.ndarray] = {}  # node -> pixels of parent-minus-mask
    for n in tree.nodes:
        if n.parent >= 0:
            ring[n.index] = _mask_pixels(tree.nodes[n.parent].mask & ~n.mask)

    positives: list[list[PixelPair]] = []
    negatives: list[list[PixelPair]] = []
    skipped: list[tuple[int, int]] = []

    def at_level(store: list[list[PixelPair]], level: int) -> list[PixelPair]:
        while len(store) <= level:
            store.append([])
        return store[level]

    def draw_many(source: np.ndarray, count: int) -> list[Pixel]:
        picks = source[rng.integers(len(source), size=count)]
        return [(int(r), int(c)) for r, c in picks]

    # all walks of one leaf advance in lockstep; draws are vectorized per level
    for leaf in tree.leaves():
        node = leaf.index
        first = draw_many(pixels[node], pairs_per_mask)
        second = draw_many(pixels[node], pairs_per_mask)
        carried = list(zip(first, second))
        level = 0
        while tree.nodes[node].parent >= 0:
            at_level(positives, level).extend(carried)
            boundary = ring[node]
            if len(boundary):
                carried = list(zip(draw_many(pixels[node], pairs_per_mask),
                                   draw_many(boundary, pairs_per_mask)))
                at_level(negatives, level).extend(carried)
            else:
                skipped.append((node, level))
            node = tree.nodes[node].parent
            level += 1

    while len(negatives) < len(positives):
        negatives.append([])
    return PairBatch(positives, negatives, skipped)
