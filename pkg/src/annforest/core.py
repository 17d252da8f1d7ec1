"""Vector and label containers, the Euclidean dissimilarity, exact k-NN and recall."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class UsageError(ValueError):
    """Raised when an operation is called with arguments violating its contract."""


@dataclass(frozen=True)
class VectorSet:
    """Dense row-major ``n x d`` float32 matrix of points."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 2:
            raise UsageError(f"expected a 2-d array, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise UsageError(f"need n >= 1 and d >= 1, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            bad = int(np.flatnonzero(~np.isfinite(arr).all(axis=1))[0])
            raise UsageError(f"non-finite value in row {bad}")
        if arr is self.data:
            arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i) -> np.ndarray:
        return self.data[i]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.data.shape, dtype="<i8").tobytes())
        h.update(self.data.astype("<f4", copy=False).tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class NeighborList:
    indices: np.ndarray
    dissimilarities: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    def __eq__(self, other) -> bool:
        # bit-exact comparison, so equal lists really are interchangeable
        if not isinstance(other, NeighborList):
            return NotImplemented
        return (np.asarray(self.indices, np.int64).tobytes()
                == np.asarray(other.indices, np.int64).tobytes()
                and np.asarray(self.dissimilarities, np.float64).tobytes()
                == np.asarray(other.dissimilarities, np.float64).tobytes())

    __hash__ = None

    def distances(self) -> np.ndarray:
        """Euclidean distances (square root of the stored squared values)."""
        return np.sqrt(self.dissimilarities)


@dataclass(frozen=True)
class GroundTruth:
    """Exact ``k`` nearest neighbors for each labeled point.

    ``indices[i]`` is the label set of point ``i``: corpus index ``j`` is a
    positive label iff it appears in that row.
    """

    indices: np.ndarray
    dissimilarities: np.ndarray = field(repr=False)

    def __post_init__(self):
        idx = np.ascontiguousarray(self.indices, dtype=np.int32)
        dis = np.ascontiguousarray(self.dissimilarities, dtype=np.float64)
        if idx.ndim != 2 or idx.shape != dis.shape:
            raise UsageError("indices and dissimilarities must be matching 2-d arrays")
        if idx.shape[1] < 1:
            raise UsageError("ground truth rows must be non-empty")
        idx.setflags(write=False)
        dis.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "dissimilarities", dis)

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def __len__(self) -> int:
        return self.indices.shape[0]

    @property
    def rows(self) -> list[NeighborList]:
        return [self.row(i) for i in range(len(self))]

    def row(self, i: int) -> NeighborList:
        return NeighborList(self.indices[i], self.dissimilarities[i])


def _as_vectorset(x) -> VectorSet:
    return x if isinstance(x, VectorSet) else VectorSet(np.atleast_2d(x))


def dissimilarity(u, v) -> float:
    """Squared Euclidean distance, accumulated in float64."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise UsageError(f"dimension mismatch: {u.shape} vs {v.shape}")
    diff = u - v
    return float(np.dot(diff, diff))


def squared_distances(x: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Squared distances from one vector ``x`` to every row of ``points``.

    Differences are formed in float64 so that float32 inputs subtract exactly.
    """
    diff = points.astype(np.float64) - np.asarray(x, dtype=np.float64)
    return np.einsum("ij,ij->i", diff, diff)


def _smallest_k(dist: np.ndarray, ids: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    # ties resolved by lower corpus index
    order = np.lexsort((ids, dist))[:k]
    return ids[order], dist[order]


def exact_knn(corpus, queries, k: int, *, self_match: bool = False,
              block_size: int = 1024) -> GroundTruth:
    """Brute-force ``k`` nearest neighbors of every query.

    A float64 Gram-matrix expansion shortlists every corpus point whose
    approximate distance could reach the ``k``-th smallest one; the shortlist is
    then re-scored with direct differences so the result (including the
    lower-index tie rule) does not depend on the rounding of the expansion.

    With ``self_match`` the queries must be the corpus itself and row ``i``
    starts with ``i``, even if duplicate points with lower indices exist.
    """
    corpus = _as_vectorset(corpus)
    queries = _as_vectorset(queries)
    m = corpus.n
    if queries.d != corpus.d:
        raise UsageError(f"dimension mismatch: queries d={queries.d}, corpus d={corpus.d}")
    if not 1 <= k <= m:
        raise UsageError(f"k must satisfy 1 <= k <= {m}, got {k}")
    if self_match and queries.n != m:
        raise UsageError("self_match requires the queries to be the corpus")

    C = corpus.data.astype(np.float64)
    c_sq = np.einsum("ij,ij->i", C, C)
    c_max = float(c_sq.max())
    all_ids = np.arange(m, dtype=np.int64)
    out_idx = np.empty((queries.n, k), dtype=np.int32)
    out_dis = np.empty((queries.n, k), dtype=np.float64)

    for start in range(0, queries.n, block_size):
        Q = queries.data[start:start + block_size].astype(np.float64)
        q_sq = np.einsum("ij,ij->i", Q, Q)
        approx = q_sq[:, None] + c_sq[None, :] - 2.0 * (Q @ C.T)
        kth = np.partition(approx, k - 1, axis=1)[:, k - 1]
        # generous bound on the expansion's rounding error
        slack = 1e-9 * (q_sq + c_max) + 1e-12
        for r in range(Q.shape[0]):
            qi = start + r
            cand = all_ids[approx[r] <= kth[r] + slack[r]]
            dist = squared_distances(Q[r], C[cand])
            if self_match:
                keep = cand != qi
                idx, dis = _smallest_k(dist[keep], cand[keep], k - 1)
                idx = np.concatenate(([qi], idx))
                dis = np.concatenate(([0.0], dis))
            else:
                idx, dis = _smallest_k(dist, cand, k)
            out_idx[qi] = idx
            out_dis[qi] = dis
    return GroundTruth(out_idx, out_dis)


def recall(result: Iterable[int], truth) -> float:
    """Fraction of the true neighbors present in ``result``."""
    true_idx = truth.indices if isinstance(truth, NeighborList) else np.asarray(truth)
    k = len(true_idx)
    if k == 0:
        raise UsageError("truth must be non-empty")
    if not isinstance(result, np.ndarray):
        result = np.fromiter(result, dtype=np.int64)
    found = np.intersect1d(result.astype(np.int64), np.asarray(true_idx, dtype=np.int64))
    return len(found) / k


def mean_recall(results: Sequence[Iterable[int]], truth: GroundTruth) -> float:
    return float(np.mean([recall(r, truth.row(i)) for i, r in enumerate(results)]))
