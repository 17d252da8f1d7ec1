"""Randomized space-partitioning trees: RP, k-d, PCA and multinomial classification trees.

Every tree is stored as flat node arrays.  A child code ``c >= 0`` points to
internal node ``c``; ``c < 0`` points to leaf ``-c - 1``.  Routing is
``left`` iff the node's projection is ``<= threshold``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .core import GroundTruth, UsageError, _as_vectorset

TREE_TYPES = ("rp", "kd", "pca", "classification")

MAX_DEPTH = 64
POWER_TOL = 1e-6
POWER_MAX_ITER = 100


@dataclass(frozen=True)
class TreeBuildParams:
    max_leaf_size: int = 128
    tree_type: str = "rp"
    mtry: Optional[int] = None  # a; classification only, default ceil(sqrt(d))
    seed: int = 0
    k: int = 10
    randomize: bool = True
    # fraction of node points the PCA direction is estimated from
    pca_sample: float = 0.5

    def __post_init__(self):
        if self.tree_type not in TREE_TYPES:
            raise UsageError(f"unknown tree type {self.tree_type!r}")
        if self.max_leaf_size < 1:
            raise UsageError("max_leaf_size must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise UsageError("mtry must be >= 1")
        if not 0.0 < self.pca_sample <= 1.0:
            raise UsageError("pca_sample must be in (0, 1]")

    def mtry_for(self, d: int) -> int:
        a = self.mtry if self.mtry is not None else math.ceil(math.sqrt(d))
        if a > d:
            raise UsageError(f"mtry={a} exceeds dimension d={d}")
        return a


@dataclass(frozen=True)
class SplitRule:
    kind: str  # "axis" or "direction"
    threshold: float
    axis: int = -1
    direction: Optional[np.ndarray] = None

    def project(self, x) -> float:
        x = np.asarray(x)
        if self.kind == "axis":
            return float(x[self.axis])
        return float(_kernels.project_rows(np.atleast_2d(x).astype(np.float32),
                                           np.zeros(1, np.int64), self.direction)[0])

    def goes_left(self, x) -> bool:
        return self.project(x) <= self.threshold


@dataclass(frozen=True)
class PartitionTree:
    d: int
    root: int
    axis: np.ndarray
    dir_id: np.ndarray
    directions: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_depth: np.ndarray
    tree_type: str
    tree_id: int
    diagnostics: dict = field(default_factory=dict, compare=False)
    # leaf label tables, attached by model.fit_leaf_tables
    tables: object = None

    @property
    def n_nodes(self) -> int:
        return len(self.threshold)

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_depth)

    def split_rule(self, node: int) -> SplitRule:
        if self.axis[node] >= 0:
            return SplitRule("axis", float(self.threshold[node]), axis=int(self.axis[node]))
        return SplitRule("direction", float(self.threshold[node]),
                         direction=self.directions[self.dir_id[node]])

    def leaf_of(self, x) -> int:
        return route(self, x)

    def leaf_table(self, leaf: int):
        if self.tables is None:
            raise UsageError("tree has no fitted leaf tables")
        return self.tables.table(leaf)

    def with_tables(self, tables) -> "PartitionTree":
        return dataclasses.replace(self, tables=tables)


def route(tree: PartitionTree, x) -> int:
    """Leaf index that ``x`` falls into."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.shape != (tree.d,):
        raise UsageError(f"expected a vector of dimension {tree.d}, got shape {x.shape}")
    return int(_kernels.route_one(x, tree.root, tree.axis, tree.dir_id, tree.directions,
                                  tree.threshold, tree.left, tree.right))


def route_many(tree: PartitionTree, X) -> np.ndarray:
    X = _as_vectorset(X).data
    if X.shape[1] != tree.d:
        raise UsageError(f"expected dimension {tree.d}, got {X.shape[1]}")
    return _kernels.route_many(X, tree.root, tree.axis, tree.dir_id, tree.directions,
                               tree.threshold, tree.left, tree.right)


class _Builder:
    """Accumulates nodes in pre-order while a tree is grown."""

    def __init__(self, d: int):
        self.d = d
        self.axis: list[int] = []
        self.dir_id: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.directions: list[np.ndarray] = []
        self.leaf_depth: list[int] = []
        self.leaf_points: list[np.ndarray] = []

    def leaf(self, idx: np.ndarray, depth: int) -> int:
        self.leaf_depth.append(depth)
        self.leaf_points.append(idx)
        return -len(self.leaf_depth)

    def node(self, axis: int, dir_id: int, threshold: float) -> int:
        self.axis.append(axis)
        self.dir_id.append(dir_id)
        self.threshold.append(threshold)
        self.left.append(0)
        self.right.append(0)
        return len(self.threshold) - 1

    def grow(self, idx: np.ndarray, choose, max_leaf_size: int):
        """Grow from the root; ``choose(idx, depth)`` returns ``None`` or a split.

        A split is ``(axis, dir_id, threshold, left_mask)``.
        """
        # explicit stack instead of recursion; children are attached on pop
        root_code = None
        stack = [(idx, 0, None, None)]
        while stack:
            node_idx, depth, parent, side = stack.pop()
            split = None
            if len(node_idx) > max_leaf_size and depth < MAX_DEPTH:
                split = choose(node_idx, depth)
            if split is None:
                code = self.leaf(node_idx, depth)
            else:
                axis, dir_id, thr, mask = split
                code = self.node(axis, dir_id, thr)
                stack.append((node_idx[~mask], depth + 1, code, "right"))
                stack.append((node_idx[mask], depth + 1, code, "left"))
            if parent is None:
                root_code = code
            elif side == "left":
                self.left[parent] = code
            else:
                self.right[parent] = code
        return root_code

    def finish(self, root: int, tree_type: str, tree_id: int, diagnostics: dict) -> PartitionTree:
        directions = (np.vstack(self.directions) if self.directions
                      else np.zeros((0, self.d), dtype=np.float64))
        tree = PartitionTree(
            d=self.d,
            root=int(root),
            axis=np.asarray(self.axis, dtype=np.int64),
            dir_id=np.asarray(self.dir_id, dtype=np.int64),
            directions=np.ascontiguousarray(directions, dtype=np.float64),
            threshold=np.asarray(self.threshold, dtype=np.float64),
            left=np.asarray(self.left, dtype=np.int64),
            right=np.asarray(self.right, dtype=np.int64),
            leaf_depth=np.asarray(self.leaf_depth, dtype=np.int64),
            tree_type=tree_type,
            tree_id=tree_id,
            diagnostics=diagnostics,
        )
        tree.diagnostics["leaf_members"] = self.leaf_points
        for arr in (tree.axis, tree.dir_id, tree.directions, tree.threshold,
                    tree.left, tree.right, tree.leaf_depth):
            arr.setflags(write=False)
        return tree


def median_cut(proj: np.ndarray):
    """Threshold splitting ``proj`` into halves; ``None`` if a side would be empty.

    The left side receives ``ceil(n/2)`` points; the cut sits halfway between
    the two middle order statistics so no training point lies on it unless the
    middle values tie.
    """
    n = len(proj)
    s = np.sort(proj)
    h = (n + 1) // 2
    lo, hi = s[h - 1], s[h]
    thr = 0.5 * (lo + hi) if lo < hi else lo
    mask = proj <= thr
    if mask.all() or not mask.any():
        return None
    return float(thr), mask


def build_rp_tree(points, params: TreeBuildParams) -> PartitionTree:
    """Median splits along standard-normal directions, one direction per level."""
    X = _as_vectorset(points).data
    n, d = X.shape
    rng = np.random.default_rng(params.seed)
    b = _Builder(d)

    def choose(idx, depth):
        while len(b.directions) <= depth:
            b.directions.append(rng.standard_normal(d))
        proj = _kernels.project_rows(X, idx, b.directions[depth])
        cut = median_cut(proj)
        if cut is None:
            return None
        return -1, depth, cut[0], cut[1]

    root = b.grow(np.arange(n, dtype=np.int64), choose, params.max_leaf_size)
    return b.finish(root, "rp", params.seed, {})


def _top_variance_axis(X: np.ndarray, idx: np.ndarray, rng, randomize: bool) -> int:
    var = _kernels.column_variance(X, idx)
    if var.max() <= 0.0:
        return -1
    if not randomize:
        return int(np.argmax(var))
    d = X.shape[1]
    top = min(math.ceil(d / 10), int(np.count_nonzero(var > 0)))
    # stable order so ties between equal variances resolve by lower axis
    candidates = np.argsort(-var, kind="stable")[:top]
    return int(candidates[rng.integers(top)])


def build_kd_tree(points, params: TreeBuildParams) -> PartitionTree:
    """Median splits on one of the highest-variance coordinate axes."""
    X = _as_vectorset(points).data
    n, d = X.shape
    rng = np.random.default_rng(params.seed)
    b = _Builder(d)

    def choose(idx, depth):
        axis = _top_variance_axis(X, idx, rng, params.randomize)
        if axis < 0:
            return None
        cut = median_cut(X[idx, axis].astype(np.float64))
        if cut is None:
            return None
        return axis, -1, cut[0], cut[1]

    root = b.grow(np.arange(n, dtype=np.int64), choose, params.max_leaf_size)
    return b.finish(root, "kd", params.seed, {})


def principal_direction(points: np.ndarray, rng, tol: float = POWER_TOL,
                        max_iter: int = POWER_MAX_ITER) -> tuple[np.ndarray, bool]:
    """Top eigenvector of the sample covariance by power iteration.

    Returns ``(unit vector, converged)``.  Convergence means successive
    iterates differ by less than ``tol`` in Euclidean norm, up to sign.
    """
    P = np.asarray(points, dtype=np.float64)
    centered = np.ascontiguousarray(P - P.mean(axis=0))
    v = rng.standard_normal(P.shape[1])
    v /= np.linalg.norm(v)
    if 2 * P.shape[0] < P.shape[1]:
        return _kernels.power_iteration_rows(centered, v, tol, max_iter)
    cov = np.ascontiguousarray(centered.T @ centered)
    return _kernels.power_iteration(cov, v, tol, max_iter)


def build_pca_tree(points, params: TreeBuildParams) -> PartitionTree:
    """Median splits along the principal direction of (a random subsample of) the node points.

    Falls back to the max-variance axis when power iteration does not
    converge; ``diagnostics["pca_fallbacks"]`` counts those nodes.
    """
    X = _as_vectorset(points).data
    n, d = X.shape
    rng = np.random.default_rng(params.seed)
    b = _Builder(d)
    diag = {"pca_fallbacks": 0, "pca_splits": 0}

    def choose(idx, depth):
        sample = idx
        if params.pca_sample < 1.0:
            size = max(2, math.ceil(params.pca_sample * len(idx)))
            sample = np.sort(rng.choice(idx, size=size, replace=False))
        direction, converged = principal_direction(X[sample], rng)
        if converged:
            proj = _kernels.project_rows(X, idx, direction)
            cut = median_cut(proj)
            if cut is not None:
                b.directions.append(direction)
                diag["pca_splits"] += 1
                return -1, len(b.directions) - 1, cut[0], cut[1]
        diag["pca_fallbacks"] += 1
        axis = _top_variance_axis(X, idx, rng, randomize=False)
        if axis < 0:
            return None
        cut = median_cut(X[idx, axis].astype(np.float64))
        if cut is None:
            return None
        return axis, -1, cut[0], cut[1]

    root = b.grow(np.arange(n, dtype=np.int64), choose, params.max_leaf_size)
    return b.finish(root, "pca", params.seed, diag)


def xlogx_table(max_count: int) -> np.ndarray:
    c = np.arange(max_count + 1, dtype=np.float64)
    out = np.zeros_like(c)
    out[1:] = c[1:] * np.log(c[1:])
    return out


def split_criterion(left_labels: np.ndarray, right_labels: np.ndarray) -> float:
    """Multinomial log-likelihood of a two-way split, from the label rows of each side.

    ``sum_j vL_j log(vL_j / (k NL)) + sum_j vR_j log(vR_j / (k NR))`` with
    ``0 log 0 = 0``.  Plain, non-incremental evaluation.
    """
    total = 0.0
    for side in (left_labels, right_labels):
        if side.size == 0:
            continue
        _, counts = np.unique(side, return_counts=True)
        counts = counts.astype(np.float64)
        total += float(np.sum(counts * np.log(counts / side.size)))
    return total


def improves(best: float, parent: float) -> bool:
    return best > parent + 1e-9 * (abs(parent) + 1.0)


class ClassificationSplitter:
    """Per-tree scratch for the multinomial split sweep."""

    def __init__(self, X: np.ndarray, labels: np.ndarray, n_labels: int):
        self.X = X
        self.labels = labels
        self.xlogx = xlogx_table(labels.shape[0] * labels.shape[1])
        self.cnt_parent = np.zeros(n_labels, dtype=np.int64)
        self.cnt_left = np.zeros(n_labels, dtype=np.int64)
        self.touched = np.zeros(n_labels, dtype=np.int64)

    def best(self, idx: np.ndarray, dims: np.ndarray):
        return _kernels.best_split(self.X, idx, self.labels, dims, self.xlogx,
                                   self.cnt_parent, self.cnt_left, self.touched)


def build_classification_tree(points, labels: GroundTruth, params: TreeBuildParams,
                              n_labels: Optional[int] = None) -> PartitionTree:
    """Greedy multinomial-likelihood tree with ``a`` dimensions sampled per node."""
    X = _as_vectorset(points).data
    n, d = X.shape
    if len(labels) != n:
        raise UsageError(f"{len(labels)} label rows for {n} points")
    if labels.k != params.k:
        raise UsageError(f"labels have k={labels.k}, params have k={params.k}")
    a = params.mtry_for(d)
    lab = np.ascontiguousarray(labels.indices, dtype=np.int64)
    if n_labels is None:
        n_labels = int(lab.max()) + 1
    splitter = ClassificationSplitter(X, lab, n_labels)
    rng = np.random.default_rng(params.seed)
    b = _Builder(d)

    def choose(idx, depth):
        dims = np.sort(rng.choice(d, size=a, replace=False)).astype(np.int64)
        dim, thr, crit, parent = splitter.best(idx, dims)
        if dim < 0 or not improves(crit, parent):
            return None
        mask = X[idx, dim].astype(np.float64) <= thr
        return int(dim), -1, float(thr), mask

    root = b.grow(np.arange(n, dtype=np.int64), choose, params.max_leaf_size)
    return b.finish(root, "classification", params.seed, {})


def build_tree(points, params: TreeBuildParams, labels: Optional[GroundTruth] = None,
               n_labels: Optional[int] = None) -> PartitionTree:
    if params.tree_type == "rp":
        return build_rp_tree(points, params)
    if params.tree_type == "kd":
        return build_kd_tree(points, params)
    if params.tree_type == "pca":
        return build_pca_tree(points, params)
    if labels is None:
        raise UsageError("classification trees need ground-truth labels")
    return build_classification_tree(points, labels, params, n_labels=n_labels)


def mean_depth(tree: PartitionTree, leaf_counts: Optional[np.ndarray] = None) -> float:
    """Mean leaf depth, weighted by ``leaf_counts`` (training points per leaf) if given."""
    if leaf_counts is None:
        return float(tree.leaf_depth.mean())
    return float(np.average(tree.leaf_depth, weights=leaf_counts))
