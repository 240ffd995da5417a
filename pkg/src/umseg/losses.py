"""Contrastive and depth-continuity losses with hand-derived gradients.

No autodiff: every gradient here is closed-form and checked against central
finite differences in the test suite. The pairwise loss is a binary cross
entropy over a (positive, negative) distance couple; its printed two-term
form collapses algebraically to a linear function of the distance gap. The
ultrametric distance only differentiates through its bottleneck edge, so
its gradient is routed to that edge's endpoint features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graphs import Metric, WeightedGraph, feature_distance
from .hierarchy import BinaryPartitionTree, active_edge, ultrametric_distance

AS_PRINTED = "as_printed"
CORRECTED = "corrected"
TWO_TERM = "two_term"
SOFTPLUS = "softplus"


@dataclass
class ContrastiveConfig:
    temperature: float = 0.1
    euclid_weight: float = 1.0
    exponent_sign: str = CORRECTED
    variant: str = TWO_TERM

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.euclid_weight < 0:
            raise ValueError("euclid_weight must be >= 0")
        if self.exponent_sign not in (AS_PRINTED, CORRECTED):
            raise ValueError(f"exponent_sign must be {AS_PRINTED} or {CORRECTED}")
        if self.variant not in (TWO_TERM, SOFTPLUS):
            raise ValueError(f"variant must be {TWO_TERM} or {SOFTPLUS}")


@dataclass
class LossResult:
    value: float
    gradient: np.ndarray
    skipped: list = field(default_factory=list)


def _softplus(x: float) -> float:
    return max(x, 0.0) + np.log1p(np.exp(-abs(x)))


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


def euclid_pair_distance(
    features: np.ndarray, i: int, j: int
) -> tuple[float, np.ndarray, np.ndarray]:
    """L2 feature distance and its gradients wrt f_i and f_j (zero at d=0)."""
    diff = features[i] - features[j]
    d = float(np.sqrt(np.dot(diff, diff)))
    if d == 0.0:
        zero = np.zeros_like(diff)
        return 0.0, zero, zero.copy()
    g = diff / d
    return d, g, -g


def ultra_pair_distance(
    features: np.ndarray,
    graph: WeightedGraph,
    bpt: BinaryPartitionTree,
    i: int,
    j: int,
) -> tuple[float, tuple[int, int] | None, np.ndarray, np.ndarray]:
    """Ultrametric distance with its subgradient routed to the active edge.

    features must be per graph node and the graph's weights must be the L2
    distances of those features; the distance then equals the active edge's
    feature distance and differentiates like it. Returns
    (d, (u, v) or None, grad_f_u, grad_f_v).
    """
    if i == j:
        zero = np.zeros(features.shape[1])
        return 0.0, None, zero, zero.copy()
    d = ultrametric_distance(bpt, i, j)
    if not np.isfinite(d):
        raise ValueError(f"nodes {i} and {j} are disconnected")
    u, v, _ = active_edge(bpt, graph, i, j)
    _, gu, gv = euclid_pair_distance(features, u, v)
    return d, (u, v), gu, gv


def pair_contrastive_loss(
    d_p: float, d_n: float, cfg: ContrastiveConfig
) -> tuple[float, float, float]:
    """Binary cross entropy on one (positive, negative) distance couple.

    Returns (loss, dloss/dd_p, dloss/dd_n). With the corrected exponent
    sign the two-term form is algebraically (d_p - d_n)/temperature; the
    softplus variant keeps only the first cross-entropy term, computed
    overflow-safely. as_printed flips the exponent signs for auditing.
    """
    if d_p < 0 or d_n < 0:
        raise ValueError("distances must be >= 0")
    sign = 1.0 if cfg.exponent_sign == AS_PRINTED else -1.0
    tau = cfg.temperature
    z_p = sign * d_p / tau
    z_n = sign * d_n / tau
    x = z_n - z_p
    if cfg.variant == TWO_TERM:
        lse = np.logaddexp(z_p, z_n)
        value = -(z_p - lse) + (z_n - lse)
        return float(value), -sign / tau, sign / tau
    s = _sigmoid(x)
    return float(_softplus(x)), s * sign / tau * -1.0, s * sign / tau


def _pair_losses_vec(d_p: np.ndarray, d_n: np.ndarray, cfg: ContrastiveConfig):
    """Vectorized pair_contrastive_loss over distance arrays."""
    sign = 1.0 if cfg.exponent_sign == AS_PRINTED else -1.0
    tau = cfg.temperature
    z_p = sign * d_p / tau
    z_n = sign * d_n / tau
    if cfg.variant == TWO_TERM:
        lse = np.logaddexp(z_p, z_n)
        values = (z_n - lse) - (z_p - lse)
        ones = np.ones_like(values)
        return values, (-sign / tau) * ones, (sign / tau) * ones
    x = z_n - z_p
    values = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    s[~pos] = e / (1.0 + e)
    return values, -s * sign / tau, s * sign / tau


def _unit_diffs(node_feats: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Distances and unit difference vectors f_a - f_b (zero at d = 0)."""
    diff = node_feats[a] - node_feats[b]
    d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    unit = np.zeros_like(diff)
    nz = d > 0
    unit[nz] = diff[nz] / d[nz, None]
    return d, unit


def feature_loss(
    features: np.ndarray,
    graph: WeightedGraph,
    bpt: BinaryPartitionTree,
    batch,
    cfg: ContrastiveConfig,
) -> LossResult:
    """Combined ultrametric + Euclidean contrastive loss over a PairBatch.

    features is the (h, w, d) buffer the graph's weights were computed
    from; graph nodes are flat pixel indices (or a sampled subset via the
    graph's node_ids). Couples are matched positive-to-negative by emission
    order within each level; couples touching pixels outside the graph or
    disconnected pairs are excluded and reported.
    """
    h, w, dim = features.shape
    flat = features.reshape(-1, dim)
    if graph.node_ids is None:
        if graph.node_count != h * w:
            raise ValueError("graph without node_ids must cover every pixel")
        node_feats = flat
        pixel_to_node = None
    else:
        node_feats = flat[graph.node_ids]
        pixel_to_node = np.full(h * w, -1, dtype=np.int64)
        pixel_to_node[graph.node_ids] = np.arange(graph.node_count)

    # flatten couples across levels, keeping (level, index) for reports
    quads = []
    where = []
    for level in range(batch.level_count):
        pos = batch.positives[level]
        neg = batch.negatives[level] if level < len(batch.negatives) else []
        for ci, (sp, sn) in enumerate(zip(pos, neg)):
            quads.append((sp[0][0] * w + sp[0][1], sp[1][0] * w + sp[1][1],
                          sn[0][0] * w + sn[0][1], sn[1][0] * w + sn[1][1]))
            where.append((level, ci))
    grad_nodes = np.zeros_like(node_feats)
    skipped: list[tuple[int, int, str]] = []
    if not quads:
        return LossResult(0.0, np.zeros_like(flat).reshape(h, w, dim), skipped)

    quad = np.asarray(quads, dtype=np.int64)
    if pixel_to_node is None:
        nodes = quad
        known = np.ones(len(quad), dtype=bool)
    else:
        nodes = pixel_to_node[quad]
        known = (nodes >= 0).all(axis=1)
    for k in np.nonzero(~known)[0]:
        skipped.append((*where[k], "pixel not in graph"))
    nodes = nodes[known]
    where = [wh for wh, ok in zip(where, known) if ok]

    lca_p = bpt.lca_batch(nodes[:, 0], nodes[:, 1])
    lca_n = bpt.lca_batch(nodes[:, 2], nodes[:, 3])
    connected = ((lca_p >= 0) | (nodes[:, 0] == nodes[:, 1])) & (
        (lca_n >= 0) | (nodes[:, 2] == nodes[:, 3])
    )
    for k in np.nonzero(~connected)[0]:
        skipped.append((*where[k], "disconnected pair"))
    nodes, lca_p, lca_n = nodes[connected], lca_p[connected], lca_n[connected]
    if not len(nodes):
        return LossResult(0.0, np.zeros_like(flat).reshape(h, w, dim), skipped)

    value = 0.0
    # ultrametric term: distance is the LCA altitude, gradient goes to the
    # recorded bottleneck edge's endpoints (none for identical endpoints)
    d_p = np.where(nodes[:, 0] == nodes[:, 1], 0.0, bpt.altitude[np.maximum(lca_p, 0)])
    d_n = np.where(nodes[:, 2] == nodes[:, 3], 0.0, bpt.altitude[np.maximum(lca_n, 0)])
    values, g_p, g_n = _pair_losses_vec(d_p, d_n, cfg)
    value += float(values.sum())
    for lca, coeff, self_pair in (
        (lca_p, g_p, nodes[:, 0] == nodes[:, 1]),
        (lca_n, g_n, nodes[:, 2] == nodes[:, 3]),
    ):
        has_edge = ~self_pair
        edges = bpt.merge_edge[lca[has_edge] - bpt.leaf_count]
        eu = graph.edges_u[edges]
        ev = graph.edges_v[edges]
        _, unit = _unit_diffs(node_feats, eu, ev)
        scaled = coeff[has_edge, None] * unit
        np.add.at(grad_nodes, eu, scaled)
        np.add.at(grad_nodes, ev, -scaled)

    if cfg.euclid_weight > 0:
        de_p, unit_p = _unit_diffs(node_feats, nodes[:, 0], nodes[:, 1])
        de_n, unit_n = _unit_diffs(node_feats, nodes[:, 2], nodes[:, 3])
        values, g_p, g_n = _pair_losses_vec(de_p, de_n, cfg)
        a = cfg.euclid_weight
        value += a * float(values.sum())
        np.add.at(grad_nodes, nodes[:, 0], a * g_p[:, None] * unit_p)
        np.add.at(grad_nodes, nodes[:, 1], -a * g_p[:, None] * unit_p)
        np.add.at(grad_nodes, nodes[:, 2], a * g_n[:, None] * unit_n)
        np.add.at(grad_nodes, nodes[:, 3], -a * g_n[:, None] * unit_n)

    gradient = np.zeros_like(flat)
    if graph.node_ids is None:
        gradient += grad_nodes
    else:
        np.add.at(gradient, graph.node_ids, grad_nodes)
    return LossResult(value, gradient.reshape(h, w, dim), skipped)


@dataclass
class DepthPatchBatch:
    """4x4 depth patches with the ray-angle step and hinge threshold."""

    patches: np.ndarray          # (k, 4, 4) depths
    delta_theta: float
    hinge: float = 0.0

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=np.float64)
        if self.patches.ndim != 3 or self.patches.shape[1:] != (4, 4):
            raise ValueError(f"patches must be (k, 4, 4), got {self.patches.shape}")
        if self.delta_theta <= 0:
            raise ValueError("delta_theta must be positive")

    @property
    def patch_count(self) -> int:
        return len(self.patches)


_THIRD_DIFF = np.array([1.0, -3.0, 3.0, -1.0])


def _line_term(line: np.ndarray, dtheta: float, hinge: float):
    """Hinged third-difference curvature term for one 4-pixel line.

    Returns (contribution, gradient over the 4 depths). The normalizing
    max depth is selected at its argmax (ties to the lowest index) and
    differentiated through, so the analytic gradient matches finite
    differences away from ties.
    """
    delta3 = float(_THIRD_DIFF @ line)
    m = int(np.argmax(line))
    denom = (line[m] * dtheta) ** 3
    ratio = abs(delta3) / denom
    grad = np.zeros(4)
    if ratio - hinge <= 0.0:
        return 0.0, grad
    s = np.sign(delta3)
    grad = s * _THIRD_DIFF / denom
    grad[m] += -3.0 * abs(delta3) / (line[m] ** 4 * dtheta**3)
    return ratio - hinge, grad


def depth_continuity_loss(batch: DepthPatchBatch) -> LossResult:
    """Sum of hinged third-difference terms over every patch row and column.

    Linear and quadratic depth ramps are annihilated exactly. Patches
    containing a nonpositive depth are skipped and reported.
    """
    value = 0.0
    grad = np.zeros_like(batch.patches)
    skipped: list[tuple[int, str]] = []
    for p in range(batch.patch_count):
        patch = batch.patches[p]
        if np.any(patch <= 0):
            skipped.append((p, "nonpositive depth"))
            continue
        for r in range(4):
            v, g = _line_term(patch[r, :], batch.delta_theta, batch.hinge)
            value += v
            grad[p, r, :] += g
        for c in range(4):
            v, g = _line_term(patch[:, c], batch.delta_theta, batch.hinge)
            value += v
            grad[p, :, c] += g
    return LossResult(value, grad, skipped)


def reweight_graph(
    graph: WeightedGraph, features: np.ndarray, metric: Metric = Metric.EUCLIDEAN
) -> WeightedGraph:
    """Recompute edge weights from a (h, w, d) buffer on fixed topology.

    The edge list (and therefore tie order) is preserved; only weights
    change. Used by training loops and finite-difference harnesses, where
    the graph topology is geometric and fixed while features move.
    """
    dim = features.shape[-1]
    flat = features.reshape(-1, dim)
    node_feats = flat if graph.node_ids is None else flat[graph.node_ids]
    w = feature_distance(node_feats[graph.edges_u], node_feats[graph.edges_v], metric)
    return WeightedGraph(graph.node_count, graph.edges_u, graph.edges_v, w, graph.node_ids)
