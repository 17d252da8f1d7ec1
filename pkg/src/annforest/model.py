"""Leaf label tables, ensemble label scores and threshold-based candidate selection.

A leaf table stores, for every corpus index ``j`` seen in the leaf, the count
``v_j`` of training points in the leaf having ``j`` among their ``k`` nearest
neighbors, plus the leaf's training count ``N``.  ``v_j / N`` is the maximum
likelihood Bernoulli estimate and ``v_j / (k N)`` the multinomial one, so a
single table serves both.

Voting (and lookup) search is the special case where the corpus is the
training set and each point's only label is itself.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .core import GroundTruth, UsageError, VectorSet, _as_vectorset
from .trees import PartitionTree, route_many

SCALES = ("mean_probability", "raw_count")
MODES = ("classification", "voting")


@dataclass(frozen=True)
class LeafLabelTable:
    leaf_count: int
    labels: np.ndarray
    counts: np.ndarray

    def theta(self) -> np.ndarray:
        """Bernoulli MLE ``v / N`` for the stored labels."""
        return self.counts / self.leaf_count

    def alpha(self, k: int) -> np.ndarray:
        """Multinomial MLE ``v / (k N)`` for the stored labels."""
        return self.counts / (k * self.leaf_count)

    def as_dict(self) -> dict[int, int]:
        return {int(j): int(c) for j, c in zip(self.labels, self.counts)}

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class LeafTables:
    """CSR storage of all leaf tables of one tree, labels sorted within each leaf."""

    leaf_n: np.ndarray
    ptr: np.ndarray
    labels: np.ndarray
    counts: np.ndarray

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_n)

    def table(self, leaf: int) -> LeafLabelTable:
        lo, hi = self.ptr[leaf], self.ptr[leaf + 1]
        return LeafLabelTable(int(self.leaf_n[leaf]), self.labels[lo:hi], self.counts[lo:hi])

    @classmethod
    def from_assignments(cls, leaf_of_point: np.ndarray, label_rows: np.ndarray,
                         n_leaves: int) -> "LeafTables":
        leaf_of_point = np.asarray(leaf_of_point, dtype=np.int64)
        label_rows = np.asarray(label_rows, dtype=np.int64)
        leaf_n = np.bincount(leaf_of_point, minlength=n_leaves).astype(np.int64)
        stride = int(label_rows.max()) + 1 if label_rows.size else 1
        keys = (np.repeat(leaf_of_point, label_rows.shape[1]) * stride + label_rows.ravel())
        uniq, counts = np.unique(keys, return_counts=True)
        leaves = uniq // stride
        ptr = np.zeros(n_leaves + 1, dtype=np.int64)
        np.cumsum(np.bincount(leaves, minlength=n_leaves), out=ptr[1:])
        return cls(leaf_n, ptr, (uniq % stride).astype(np.int64), counts.astype(np.int64))

    @classmethod
    def from_tables(cls, tables: Sequence[LeafLabelTable]) -> "LeafTables":
        leaf_n = np.array([t.leaf_count for t in tables], dtype=np.int64)
        sizes = np.array([len(t) for t in tables], dtype=np.int64)
        ptr = np.zeros(len(tables) + 1, dtype=np.int64)
        np.cumsum(sizes, out=ptr[1:])
        cat = lambda parts: (np.concatenate(parts).astype(np.int64) if parts
                             else np.zeros(0, np.int64))
        return cls(leaf_n, ptr, cat([t.labels for t in tables]), cat([t.counts for t in tables]))


@dataclass(frozen=True)
class SelectionParams:
    tau: float = 0.0
    scale: str = "mean_probability"
    max_candidates: Optional[int] = None

    def __post_init__(self):
        if self.tau < 0:
            raise UsageError("tau must be >= 0")
        if self.scale not in SCALES:
            raise UsageError(f"unknown scale {self.scale!r}")
        if self.max_candidates is not None and self.max_candidates < 1:
            raise UsageError("max_candidates must be >= 1")


def fit_leaf_tables(tree: PartitionTree, train, labels: GroundTruth) -> PartitionTree:
    """Count, per leaf, how many training points have each corpus index as a neighbor."""
    train = _as_vectorset(train)
    if len(labels) != train.n:
        raise UsageError(f"{len(labels)} label rows for {train.n} training points")
    leaves = route_many(tree, train)
    return tree.with_tables(LeafTables.from_assignments(leaves, labels.indices, tree.n_leaves))


class _Forest:
    """All trees of an ensemble flattened into single arrays for the kernels."""

    def __init__(self, trees: Sequence[PartitionTree]):
        node_off = leaf_off = dir_off = 0
        parts = {name: [] for name in ("axis", "dir_id", "threshold", "left", "right",
                                       "directions", "roots", "leaf_n", "labels", "counts",
                                       "sizes")}

        def shift(codes):
            codes = np.asarray(codes, dtype=np.int64)
            return np.where(codes >= 0, codes + node_off, codes - leaf_off)

        for tree in trees:
            parts["axis"].append(tree.axis)
            parts["dir_id"].append(np.where(tree.dir_id >= 0, tree.dir_id + dir_off, -1))
            parts["threshold"].append(tree.threshold)
            parts["left"].append(shift(tree.left))
            parts["right"].append(shift(tree.right))
            parts["directions"].append(tree.directions)
            parts["roots"].append(shift([tree.root]))
            tables: LeafTables = tree.tables
            parts["leaf_n"].append(tables.leaf_n)
            parts["labels"].append(tables.labels)
            parts["counts"].append(tables.counts)
            parts["sizes"].append(np.diff(tables.ptr))
            node_off += tree.n_nodes
            leaf_off += tree.n_leaves
            dir_off += len(tree.directions)

        cat = lambda key, dtype: np.ascontiguousarray(np.concatenate(parts[key]), dtype=dtype)
        self.axis = cat("axis", np.int64)
        self.dir_id = cat("dir_id", np.int64)
        self.threshold = cat("threshold", np.float64)
        self.left = cat("left", np.int64)
        self.right = cat("right", np.int64)
        self.directions = np.ascontiguousarray(np.vstack(parts["directions"]), dtype=np.float64)
        self.roots = cat("roots", np.int64)
        self.leaf_n = cat("leaf_n", np.float64)
        self.labels = cat("labels", np.int64)
        self.counts = cat("counts", np.int64)
        self.ptr = np.zeros(leaf_off + 1, dtype=np.int64)
        np.cumsum(np.concatenate(parts["sizes"]), out=self.ptr[1:])
        self.leaf_offsets = np.cumsum([0] + [t.n_leaves for t in trees])[:-1]

    def route(self, x: np.ndarray) -> np.ndarray:
        return _kernels.route_forest(x, self.roots, self.axis, self.dir_id, self.directions,
                                     self.threshold, self.left, self.right)


class ScoreAccumulator:
    """Dense score array plus a touched list; reset costs only the touched labels."""

    def __init__(self, m: int):
        self.acc = np.zeros(m, dtype=np.float64)
        self.touched = np.zeros(m, dtype=np.int64)

    def collect(self, forest: _Forest, leaves: np.ndarray, raw: bool):
        n = _kernels.accumulate_scores(leaves, forest.ptr, forest.labels, forest.counts,
                                       forest.leaf_n, raw, self.acc, self.touched)
        labels = self.touched[:n].copy()
        scores = self.acc[labels]
        self.acc[labels] = 0.0
        return labels, scores


@dataclass(frozen=True, eq=False)
class EnsembleIndex:
    trees: tuple
    corpus: VectorSet
    k: int
    mode: str = "classification"
    _forest: _Forest = field(init=False, repr=False)
    _local: threading.local = field(init=False, repr=False)

    def __post_init__(self):
        trees = tuple(self.trees)
        if not trees:
            raise UsageError("an ensemble needs at least one tree")
        if self.mode not in MODES:
            raise UsageError(f"unknown mode {self.mode!r}")
        for t in trees:
            if t.tables is None:
                raise UsageError("every tree must have fitted leaf tables")
            if t.d != self.corpus.d:
                raise UsageError("tree dimension differs from corpus dimension")
        object.__setattr__(self, "trees", trees)
        object.__setattr__(self, "_forest", _Forest(trees))
        object.__setattr__(self, "_local", threading.local())

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def d(self) -> int:
        return self.corpus.d

    @property
    def m(self) -> int:
        return self.corpus.n

    @property
    def tree_type(self) -> str:
        return self.trees[0].tree_type

    def _scratch(self) -> ScoreAccumulator:
        acc = getattr(self._local, "acc", None)
        if acc is None:
            acc = self._local.acc = ScoreAccumulator(self.m)
        return acc

    def landing_leaves(self, x) -> np.ndarray:
        """Leaf index of ``x`` in each tree (local to that tree)."""
        return self._forest.route(_vector(x, self.d)) - self._forest.leaf_offsets

    def scores(self, x, scale: str = "mean_probability", *,
               scratch: Optional[ScoreAccumulator] = None):
        """Sparse label scores of ``x`` as ``(labels, scores)`` in first-touch order."""
        if scale not in SCALES:
            raise UsageError(f"unknown scale {scale!r}")
        leaves = self._forest.route(_vector(x, self.d))
        labels, scores = (scratch or self._scratch()).collect(
            self._forest, leaves, raw=scale == "raw_count")
        if scale == "mean_probability":
            scores = scores / self.n_trees
        return labels, scores


def _vector(x, d: int) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.shape != (d,):
        raise UsageError(f"expected a vector of dimension {d}, got shape {x.shape}")
    return x


def estimate_probabilities(index: EnsembleIndex, x, scale: str = "mean_probability") -> dict[int, float]:
    """Mean of per-tree ``v_j / N_l`` (or the summed raw counts) for every label with a positive score."""
    labels, scores = index.scores(x, scale)
    return {int(j): float(s) for j, s in zip(labels, scores)}


def threshold_scores(labels: np.ndarray, scores: np.ndarray, params: SelectionParams) -> np.ndarray:
    keep = scores > params.tau
    labels, scores = labels[keep], scores[keep]
    if params.max_candidates is not None and len(labels) > params.max_candidates:
        order = np.lexsort((labels, -scores))[:params.max_candidates]
        labels = labels[order]
    return np.sort(labels)


def select_candidates(index: EnsembleIndex, x, params: SelectionParams,
                      *, scratch: Optional[ScoreAccumulator] = None) -> np.ndarray:
    """Sorted corpus indices whose score is strictly above ``tau``."""
    labels, scores = index.scores(x, params.scale, scratch=scratch)
    return threshold_scores(labels, scores, params)


def self_labels(m: int) -> GroundTruth:
    """Each corpus point labeled only with itself."""
    return GroundTruth(np.arange(m, dtype=np.int32)[:, None], np.zeros((m, 1)))


def make_voting_index(trees: Sequence[PartitionTree], corpus) -> EnsembleIndex:
    """Index whose raw-count scores are leaf co-membership counts with ``x``."""
    corpus = _as_vectorset(corpus)
    labels = self_labels(corpus.n)
    fitted = tuple(fit_leaf_tables(t, corpus, labels) for t in trees)
    return EnsembleIndex(fitted, corpus, k=1, mode="voting")


def make_classification_index(trees: Sequence[PartitionTree], corpus, train,
                              labels: GroundTruth) -> EnsembleIndex:
    corpus = _as_vectorset(corpus)
    fitted = tuple(fit_leaf_tables(t, train, labels) for t in trees)
    return EnsembleIndex(fitted, corpus, k=labels.k, mode="classification")


def bernoulli_log_likelihood(v: np.ndarray, N: np.ndarray, theta: np.ndarray) -> float:
    """Log-likelihood of per-leaf Bernoulli label parameters.

    ``v`` and ``theta`` are ``L x m``; ``N`` has length ``L``.  Uses
    ``0 log 0 = 0``; a zero-probability event gives ``-inf``.
    """
    v = np.asarray(v, dtype=np.float64)
    N = np.asarray(N, dtype=np.float64)[:, None]
    theta = np.asarray(theta, dtype=np.float64)
    miss = N - v
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = np.where(v > 0, v * np.log(theta), 0.0)
        neg = np.where(miss > 0, miss * np.log1p(-theta), 0.0)
    return float(np.sum(pos) + np.sum(neg))


def dense_counts(tables: LeafTables, m: int) -> np.ndarray:
    out = np.zeros((tables.n_leaves, m), dtype=np.int64)
    for leaf in range(tables.n_leaves):
        t = tables.table(leaf)
        out[leaf, t.labels] = t.counts
    return out
