import numpy as np
import pytest

from umseg.mask_forest import (
    MaskSet,
    build_mask_tree,
    inclusion_stats,
    sample_pairs,
)


def rect(h, w, r0, r1, c0, c1):
    m = np.zeros((h, w), dtype=bool)
    m[r0:r1, c0:c1] = True
    return m


class TestInclusionStats:
    def test_half_in_full(self):
        a = rect(4, 4, 0, 2, 0, 4)
        b = np.ones((4, 4), bool)
        assert inclusion_stats(a, b) == (1.0, 0.5)

    def test_identical_masks(self):
        a = rect(4, 4, 1, 3, 1, 3)
        assert inclusion_stats(a, a) == (1.0, 1.0)

    def test_disjoint_masks(self):
        a = rect(4, 4, 0, 2, 0, 2)
        b = rect(4, 4, 2, 4, 2, 4)
        assert inclusion_stats(a, b) == (0.0, 0.0)

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            inclusion_stats(np.zeros((2, 2), bool), np.ones((2, 2), bool))

    def test_grid_mismatch_rejected(self):
        with pytest.raises(ValueError):
            inclusion_stats(np.ones((2, 2), bool), np.ones((3, 3), bool))


class TestBuildMaskTree:
    def test_nested_chain_recovered(self):
        h = w = 16
        small = rect(h, w, 5, 8, 5, 8)
        medium = rect(h, w, 2, 13, 2, 13)
        full = np.ones((h, w), bool)
        # verify the construction premises with inclusion_stats itself
        assert inclusion_stats(small, medium)[0] == 1.0
        assert inclusion_stats(small, medium)[1] < 0.85
        assert inclusion_stats(medium, full)[1] < 0.85
        tree = build_mask_tree(MaskSet("v", h, w, [medium, full, small]))
        by_src = {n.source_index: n for n in tree.nodes if n.source_index is not None}
        assert by_src[1].parent == 0                      # full-image mask under the root
        assert by_src[0].parent == by_src[1].index        # medium under full
        assert by_src[2].parent == by_src[0].index        # small under medium

    def test_disjoint_masks_attach_to_root(self):
        a = rect(8, 8, 0, 3, 0, 3)
        b = rect(8, 8, 5, 8, 5, 8)
        tree = build_mask_tree(MaskSet("v", 8, 8, [a, b]))
        assert all(n.parent == 0 for n in tree.nodes if n.source_index is not None)

    def test_exact_duplicate_dropped(self):
        a = rect(8, 8, 0, 4, 0, 8)
        tree = build_mask_tree(MaskSet("v", 8, 8, [a, a.copy()]))
        assert len(tree.dropped) == 1
        assert tree.dropped[0][0] == 1
        assert len(tree.nodes) == 2  # root + first copy

    def test_parent_predicate_holds_posthoc(self, rng):
        h = w = 24
        masks = []
        for _ in range(12):
            r0, c0 = rng.integers(0, 12, 2)
            r1 = r0 + rng.integers(4, 12)
            c1 = c0 + rng.integers(4, 12)
            masks.append(rect(h, w, r0, min(r1, h), c0, min(c1, w)))
        tree = build_mask_tree(MaskSet("v", h, w, masks))
        tree.validate()
        for node in tree.nodes:
            if node.source_index is None or node.parent == 0:
                continue
            in_ratio, iou = inclusion_stats(node.mask, tree.nodes[node.parent].mask)
            assert in_ratio > 0.95 and iou < 0.85


class TestSamplePairs:
    def chain_tree(self):
        h = w = 16
        small = rect(h, w, 5, 9, 5, 9)
        medium = rect(h, w, 2, 13, 2, 13)
        return build_mask_tree(MaskSet("v", h, w, [small, medium]))

    def test_levels_and_boundary_membership(self):
        tree = self.chain_tree()
        batch = sample_pairs(tree, 8, seed=42)
        assert batch.level_count == 2
        by_src = {n.source_index: n for n in tree.nodes if n.source_index is not None}
        small, medium = by_src[0], by_src[1]
        root = tree.root
        # level-0 negatives straddle the small mask's boundary inside medium
        for (r1, c1), (r2, c2) in batch.negatives[0]:
            assert small.mask[r1, c1]
            assert medium.mask[r2, c2] and not small.mask[r2, c2]
        # level-1 negatives straddle medium's boundary inside the image
        for (r1, c1), (r2, c2) in batch.negatives[1]:
            assert medium.mask[r1, c1]
            assert root.mask[r2, c2] and not medium.mask[r2, c2]

    def test_positive_pairs_lie_inside_one_mask(self):
        tree = self.chain_tree()
        batch = sample_pairs(tree, 8, seed=1)
        node_masks = [n.mask for n in tree.nodes]
        for level in range(batch.level_count):
            for (r1, c1), (r2, c2) in batch.positives[level]:
                assert any(m[r1, c1] and m[r2, c2] for m in node_masks)

    def test_negatives_become_positives_one_level_up(self):
        tree = self.chain_tree()
        batch = sample_pairs(tree, 16, seed=3)
        # every level-0 negative lies entirely inside the level-1 mask, so the
        # carried pair is a legitimate positive there
        medium = next(n for n in tree.nodes if n.source_index == 1)
        for (r1, c1), (r2, c2) in batch.negatives[0]:
            assert medium.mask[r1, c1] and medium.mask[r2, c2]
        assert batch.positives[1] == batch.negatives[0]

    def test_root_only_tree_emits_nothing(self):
        tree = build_mask_tree(MaskSet("v", 4, 4, []))
        batch = sample_pairs(tree, 4, seed=0)
        assert batch.level_count == 0

    def test_full_coverage_child_skips_negative(self):
        full = np.ones((6, 6), bool)
        inner = rect(6, 6, 1, 5, 1, 5)
        tree = build_mask_tree(MaskSet("v", 6, 6, [full, inner]))
        batch = sample_pairs(tree, 4, seed=0)
        # the full-image mask has an empty ring against the root
        assert any(level == 1 for _, level in batch.skipped_negatives)
        assert len(batch.negatives[1]) == 0

    def test_determinism(self):
        tree = self.chain_tree()
        a = sample_pairs(tree, 8, seed=99)
        b = sample_pairs(tree, 8, seed=99)
        assert a.positives == b.positives and a.negatives == b.negatives
        c = sample_pairs(tree, 8, seed=100)
        assert a.positives != c.positives

    def test_pairs_per_mask_rejects_zero(self):
        with pytest.raises(ValueError):
            sample_pairs(self.chain_tree(), 0, seed=0)
