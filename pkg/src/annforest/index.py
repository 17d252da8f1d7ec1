"""End-to-end index: ground truth, trees, leaf tables, candidate selection and exact re-ranking."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import (GroundTruth, NeighborList, UsageError, VectorSet, _as_vectorset,
                   _smallest_k, exact_knn, squared_distances)
from .model import (EnsembleIndex, ScoreAccumulator, SelectionParams,
                    make_classification_index, make_voting_index, threshold_scores)
from .trees import TreeBuildParams, build_tree


@dataclass(frozen=True)
class IndexParams:
    tree: TreeBuildParams = field(default_factory=TreeBuildParams)
    n_trees: int = 10
    selection: SelectionParams = field(default_factory=SelectionParams)
    k: int = 10
    # voting mode: unit self-labels on the corpus (lookup / voting search)
    voting: bool = False

    def __post_init__(self):
        if self.n_trees < 1:
            raise UsageError("n_trees must be >= 1")
        if self.k < 1:
            raise UsageError("k must be >= 1")


@dataclass(frozen=True)
class QueryResult:
    neighbors: NeighborList
    candidate_count: int
    timings: dict = field(compare=False, default_factory=dict)

    @property
    def indices(self) -> np.ndarray:
        return self.neighbors.indices


def tree_seeds(seed: int, n_trees: int) -> list[int]:
    """Independent per-tree seeds; tree ``t`` gets the same seed whatever ``n_trees`` is."""
    children = np.random.SeedSequence(seed).spawn(n_trees)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


def build_trees(points, params: TreeBuildParams, n_trees: int,
                labels: Optional[GroundTruth] = None, n_labels: Optional[int] = None) -> list:
    return [build_tree(points, dataclasses.replace(params, seed=s), labels=labels,
                       n_labels=n_labels)
            for s in tree_seeds(params.seed, n_trees)]


def training_labels(corpus: VectorSet, training: Optional[VectorSet], k: int) -> GroundTruth:
    """Exact neighbors of the training points; corpus-as-training keeps each point as its own first neighbor."""
    if training is None or training is corpus:
        return exact_knn(corpus, corpus, k, self_match=True)
    return exact_knn(corpus, training, k)


def build(corpus, training=None, params: IndexParams = IndexParams(), *,
          labels: Optional[GroundTruth] = None) -> EnsembleIndex:
    """Build a classification-mode (or, with ``params.voting``, voting-mode) ensemble index.

    Without ``training`` the corpus doubles as the training set.  ``labels``
    may supply precomputed ground truth for the training set.
    """
    corpus = _as_vectorset(corpus)
    training = corpus if training is None else _as_vectorset(training)
    if training.d != corpus.d:
        raise UsageError(f"training d={training.d} differs from corpus d={corpus.d}")
    if params.k > corpus.n:
        raise UsageError(f"k={params.k} exceeds corpus size {corpus.n}")
    tree_params = dataclasses.replace(params.tree, k=params.k)

    if params.voting:
        if tree_params.tree_type == "classification":
            if labels is None:
                labels = training_labels(corpus, None, params.k)
            trees = build_trees(corpus, tree_params, params.n_trees, labels, corpus.n)
        else:
            trees = build_trees(corpus, tree_params, params.n_trees)
        return make_voting_index(trees, corpus)

    if labels is None:
        labels = training_labels(corpus, training, params.k)
    if len(labels) != training.n or labels.k != params.k:
        raise UsageError("labels do not match the training set and k")
    trees = build_trees(training, tree_params, params.n_trees, labels, corpus.n)
    return make_classification_index(trees, corpus, training, labels)


def rerank(corpus: VectorSet, x: np.ndarray, candidates: np.ndarray, k: int) -> NeighborList:
    """Exact ``k`` nearest among ``candidates`` (all of them if fewer than ``k``)."""
    if len(candidates) == 0:
        return NeighborList(np.zeros(0, np.int64), np.zeros(0, np.float64))
    dist = squared_distances(x, corpus.data[candidates])
    idx, dis = _smallest_k(dist, np.asarray(candidates, dtype=np.int64), k)
    return NeighborList(idx, dis)


def query(index: EnsembleIndex, x, k: int = 10, selection: SelectionParams = SelectionParams(),
          *, scratch: Optional[ScoreAccumulator] = None) -> QueryResult:
    if k < 1:
        raise UsageError("k must be >= 1")
    x = np.ascontiguousarray(x, dtype=np.float32)
    t0 = time.perf_counter_ns()
    labels, scores = index.scores(x, selection.scale, scratch=scratch)
    t1 = time.perf_counter_ns()
    cand = threshold_scores(labels, scores, selection)
    t2 = time.perf_counter_ns()
    neighbors = rerank(index.corpus, x, cand, k)
    t3 = time.perf_counter_ns()
    # routing and scoring run in one kernel call, so they are timed together
    return QueryResult(neighbors, len(cand),
                       {"score": t1 - t0, "select": t2 - t1, "rerank": t3 - t2})


def query_many(index: EnsembleIndex, X, k: int = 10,
               selection: SelectionParams = SelectionParams()) -> list[QueryResult]:
    X = _as_vectorset(X)
    scratch = ScoreAccumulator(index.m)
    return [query(index, X[i], k, selection, scratch=scratch) for i in range(X.n)]
