"""Benchmark harness: grid search, recall/query-time records, Pareto frontiers, experiments."""

from __future__ import annotations

import csv
import dataclasses
import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import GroundTruth, UsageError, VectorSet, _as_vectorset, exact_knn
from .index import build_trees, query, training_labels
from .io import DatasetSpec, generate_synthetic
from .model import (EnsembleIndex, ScoreAccumulator, SelectionParams,
                    make_classification_index, make_voting_index)
from .trees import TreeBuildParams

log = logging.getLogger(__name__)

RECORD_FIELDS = ("algorithm", "T", "leaf", "a", "tau", "scale", "recall", "qtime",
                 "candidates", "build_time", "seed", "corpus_digest", "train_digest")
SHIFT_FIELDS = ("sigma", "algorithm", "T", "leaf", "a", "tau", "scale", "recall", "qtime",
                "candidates", "seed")
SCALE_FIELDS = ("multiplier", "algorithm", "T", "leaf", "a", "tau", "scale", "recall", "qtime",
                "candidates", "depth", "seed")
# fields that must be reproduced exactly by a rerun with the same seeds
DETERMINISTIC_FIELDS = tuple(f for f in RECORD_FIELDS if f not in ("qtime", "build_time"))

PROB_QUANTILES = (0.0, 0.5, 0.75, 0.9, 0.95, 0.98, 0.99, 0.995, 0.999)


@dataclass
class BenchmarkRecord:
    algorithm: str
    T: int
    leaf: int
    a: int
    tau: float
    scale: str
    recall: float
    qtime: float
    candidates: float
    build_time: float = 0.0
    seed: int = 0
    corpus_digest: str = ""
    train_digest: str = ""
    extra: dict = field(default_factory=dict)

    def row(self, fields: Sequence[str] = RECORD_FIELDS) -> dict:
        values = dataclasses.asdict(self)
        values.update(values.pop("extra"))
        return {f: values[f] for f in fields}


@dataclass(frozen=True)
class GridSpec:
    tree_types: tuple = ("rp",)
    n_trees: tuple = (8, 32, 128)
    leaf_sizes: tuple = (32, 128, 512)
    mtry: tuple = ()  # empty: ceil(sqrt(d)), ceil(d/10), d
    modes: tuple = ("rf", "vote")  # any of rf, vote, lookup
    scales: tuple = ("mean_probability",)
    taus: Optional[tuple] = None  # None: scale-relative automatic grid
    seeds: tuple = (0,)
    k: int = 10

    def mtry_values(self, d: int) -> list[int]:
        if self.mtry:
            return list(self.mtry)
        return sorted({math.ceil(math.sqrt(d)), math.ceil(d / 10), d})


def algorithm_tag(mode: str, tree_type: str) -> str:
    short = "class" if tree_type == "classification" else tree_type
    return f"{mode}-{short}"


def tau_grid(index: EnsembleIndex, queries: VectorSet, scale: str,
             quantiles: Sequence[float] = PROB_QUANTILES) -> list[float]:
    """Integer vote thresholds ``0..T-1`` for raw counts in voting mode, otherwise
    quantiles of the positive scores observed on ``queries``."""
    if scale == "raw_count" and index.mode == "voting":
        return [float(t) for t in range(index.n_trees)]
    scratch = ScoreAccumulator(index.m)
    pooled = np.concatenate([index.scores(queries[i], scale, scratch=scratch)[1]
                             for i in range(queries.n)])
    taus = [0.0] + [float(np.quantile(pooled, q)) for q in quantiles if q > 0]
    return sorted(set(taus))


def timed_queries(index: EnsembleIndex, queries: VectorSet, truth: GroundTruth,
                  selection: SelectionParams, k: int) -> tuple[float, float, float]:
    """Mean recall, mean seconds per query and mean candidate count.

    A warm-up pass runs first and is not timed; each timed query covers
    routing, scoring, selection and re-ranking.
    """
    scratch = ScoreAccumulator(index.m)
    for i in range(min(queries.n, 50)):
        query(index, queries[i], k, selection, scratch=scratch)
    total = 0
    hits = 0
    cands = 0
    for i in range(queries.n):
        x = queries[i]
        t0 = time.perf_counter_ns()
        res = query(index, x, k, selection, scratch=scratch)
        total += time.perf_counter_ns() - t0
        hits += len(np.intersect1d(res.indices, truth.indices[i]))
        cands += res.candidate_count
    n = queries.n
    return hits / (n * truth.k), max(total, 1) / n / 1e9, cands / n


def _sweep(index, test, truth, k, algorithm, hyper, scales, taus, build_time, seed, digests):
    records = []
    for scale in scales:
        grid = list(taus) if taus is not None else tau_grid(index, test, scale)
        for tau in grid:
            sel = SelectionParams(tau=tau, scale=scale)
            rec, qt, cand = timed_queries(index, test, truth, sel, k)
            records.append(BenchmarkRecord(algorithm, *hyper, tau, scale, rec, qt, cand,
                                           build_time, seed, *digests))
    return records


def run_grid(corpus, training, test, grid: GridSpec, *, truth: Optional[GroundTruth] = None,
             train_labels: Optional[GroundTruth] = None) -> list[BenchmarkRecord]:
    """Build every configuration once and sweep its selection thresholds.

    Infeasible configurations (``a > d``, ``k > m``) are skipped with a
    logged reason.  ``training`` of ``None`` means corpus-as-training.
    """
    corpus = _as_vectorset(corpus)
    test = _as_vectorset(test)
    corpus_as_training = training is None or training is corpus
    training = corpus if corpus_as_training else _as_vectorset(training)
    k = grid.k
    if k > corpus.n:
        log.warning("skipping grid: k=%d exceeds corpus size %d", k, corpus.n)
        return []
    if truth is None:
        truth = exact_knn(corpus, test, k)
    digests = (corpus.digest(), training.digest())
    need_labels = "classification" in grid.tree_types or "rf" in grid.modes
    if train_labels is None and need_labels:
        train_labels = training_labels(corpus, None if corpus_as_training else training, k)
    corpus_labels = train_labels if corpus_as_training else None

    records: list[BenchmarkRecord] = []
    for tree_type, T, leaf, seed in itertools.product(grid.tree_types, grid.n_trees,
                                                      grid.leaf_sizes, grid.seeds):
        mtrys = grid.mtry_values(corpus.d) if tree_type == "classification" else [0]
        for a in mtrys:
            if a > corpus.d:
                log.warning("skipping %s a=%d: exceeds d=%d", tree_type, a, corpus.d)
                continue
            params = TreeBuildParams(max_leaf_size=leaf, tree_type=tree_type,
                                     mtry=a or None, seed=seed, k=k)
            hyper = (T, leaf, a)
            if "rf" in grid.modes:
                t0 = time.perf_counter()
                trees = build_trees(training, params, T, train_labels, corpus.n)
                index = make_classification_index(trees, corpus, training, train_labels)
                bt = time.perf_counter() - t0
                records += _sweep(index, test, truth, k, algorithm_tag("rf", tree_type), hyper,
                                  grid.scales, grid.taus, bt, seed, digests)
            if "vote" in grid.modes or "lookup" in grid.modes:
                t0 = time.perf_counter()
                if tree_type == "classification":
                    if corpus_labels is None:
                        corpus_labels = training_labels(corpus, None, k)
                    vtrees = build_trees(corpus, params, T, corpus_labels, corpus.n)
                elif corpus_as_training and "rf" in grid.modes:
                    vtrees = trees
                else:
                    vtrees = build_trees(corpus, params, T)
                vindex = make_voting_index(vtrees, corpus)
                bt = time.perf_counter() - t0
                if "vote" in grid.modes:
                    records += _sweep(vindex, test, truth, k, algorithm_tag("vote", tree_type),
                                      hyper, ("raw_count",), grid.taus, bt, seed, digests)
                if "lookup" in grid.modes:
                    records += _sweep(vindex, test, truth, k, algorithm_tag("lookup", tree_type),
                                      hyper, ("raw_count",), (0.0,), bt, seed, digests)
    return records


def pareto_frontier(records: Iterable[BenchmarkRecord]) -> list[BenchmarkRecord]:
    """Records not dominated in (higher recall, lower query time), by ascending recall."""
    records = list(records)
    if not records:
        raise UsageError("pareto_frontier needs at least one record")
    ordered = sorted(records, key=lambda r: (-r.recall, r.qtime, r.algorithm, r.T, r.leaf, r.a,
                                             r.tau, r.scale, r.seed))
    frontier = []
    best_time = math.inf
    for r in ordered:
        if r.qtime < best_time:
            frontier.append(r)
            best_time = r.qtime
    return frontier[::-1]


def write_csv(path, records: Sequence[BenchmarkRecord], fields: Sequence[str] = RECORD_FIELDS):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(fields))
        w.writeheader()
        for r in records:
            w.writerow(r.row(fields))


def read_csv(path) -> list[BenchmarkRecord]:
    known = {f.name for f in dataclasses.fields(BenchmarkRecord)} - {"extra"}
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            kw = {k: v for k, v in row.items() if k in known}
            extra = {k: v for k, v in row.items() if k not in known}
            for key in ("T", "leaf", "a", "seed"):
                kw[key] = int(kw[key])
            for key in ("tau", "recall", "qtime", "candidates", "build_time"):
                if key in kw:
                    kw[key] = float(kw[key])
            out.append(BenchmarkRecord(**kw, extra=extra))
    return out


class ScoreProfile:
    """Per-query sorted scores with true-neighbor flags, for fast threshold sweeps.

    Candidate-set recall equals the recall of the re-ranked result: every
    true neighbor that is a candidate is among the ``k`` closest candidates.
    """

    def __init__(self, index: EnsembleIndex, queries: VectorSet, truth: GroundTruth,
                 scale: str = "mean_probability"):
        self.k = truth.k
        self.n = queries.n
        scratch = ScoreAccumulator(index.m)
        self.scores = []
        self.hit_scores = []
        for i in range(queries.n):
            labels, scores = index.scores(queries[i], scale, scratch=scratch)
            is_hit = np.isin(labels, truth.indices[i])
            self.scores.append(np.sort(scores))
            self.hit_scores.append(np.sort(scores[is_hit]))
        self.pooled = np.unique(np.concatenate(self.scores)) if self.scores else np.zeros(0)

    def at(self, tau: float) -> tuple[float, float]:
        """``(mean candidate count, mean recall)`` at threshold ``tau``."""
        cand = sum(len(s) - np.searchsorted(s, tau, side="right") for s in self.scores)
        hits = sum(len(s) - np.searchsorted(s, tau, side="right") for s in self.hit_scores)
        return cand / self.n, hits / (self.n * self.k)

    def tau_for(self, target: float) -> float:
        """Threshold whose mean candidate count is closest to ``target``."""
        cand_at = lambda i: self.at(self.pooled[i - 1] if i > 0 else 0.0)[0]
        lo, hi = 0, len(self.pooled)
        # candidate count is non-increasing in the threshold position
        while lo < hi:
            mid = (lo + hi) // 2
            if cand_at(mid) > target:
                lo = mid + 1
            else:
                hi = mid
        best = min({max(lo - 1, 0), lo, min(lo + 1, len(self.pooled))},
                   key=lambda i: abs(cand_at(i) - target))
        return float(self.pooled[best - 1]) if best > 0 else 0.0

    def matched(self, target: float, band: float = 0.05) -> Optional[tuple[float, float, float]]:
        """``(tau, candidates, recall)`` near ``target`` candidates, or ``None`` outside the band."""
        tau = self.tau_for(target)
        cand, rec = self.at(tau)
        if abs(cand - target) > band * target:
            return None
        return tau, cand, rec


def recall_at_candidates(profile: ScoreProfile, target: float) -> float:
    """Recall at ``target`` mean candidates, linearly interpolated between thresholds."""
    pts = {0.0: profile.at(0.0)}
    tau = profile.tau_for(target)
    i = int(np.searchsorted(profile.pooled, tau))
    for j in (i - 1, i, i + 1):
        if 0 <= j < len(profile.pooled):
            pts[float(profile.pooled[j])] = profile.at(float(profile.pooled[j]))
    pts[tau] = profile.at(tau)
    curve = sorted(pts.values())
    cands = np.array([c for c, _ in curve])
    recs = np.array([r for _, r in curve])
    return float(np.interp(target, cands, recs))


@dataclass(frozen=True)
class ShiftConfig:
    n_corpus: int = 10_000
    n_train: int = 10_000
    n_test: int = 500
    d: int = 50
    sigmas: tuple = (1.0, 2.5, 5.0)
    seeds: tuple = (0, 1, 2, 3, 4)
    n_trees: int = 16
    leaf: int = 32
    mtry: Optional[int] = None
    k: int = 10
    targets: tuple = (50, 100, 200, 400)

    @classmethod
    def scaled(cls, factor: float, **kw) -> "ShiftConfig":
        """Full-size setup (100k corpus, 100k training, d=500) scaled by ``factor``."""
        n = max(100, int(round(100_000 * factor)))
        return cls(n_corpus=n, n_train=n, d=max(2, int(round(500 * factor))), **kw)


def _shift_data(cfg: ShiftConfig, sigma: float, seed: int):
    base = 1000 * seed
    corpus = generate_synthetic(DatasetSpec("uniform", lo=-10, hi=10, n=cfg.n_corpus, d=cfg.d,
                                            seed=base + 1))
    train = generate_synthetic(DatasetSpec("gaussian", sigma=sigma, n=cfg.n_train, d=cfg.d,
                                           seed=base + 2))
    test = generate_synthetic(DatasetSpec("gaussian", sigma=sigma, n=cfg.n_test, d=cfg.d,
                                          seed=base + 3))
    return corpus, train, test


def distribution_shift_run(cfg: ShiftConfig, sigma: float, seed: int):
    """Query-trained and corpus-trained classification forests on one data draw.

    Returns ``(records, profiles)`` with profiles keyed by algorithm tag.
    """
    corpus, train, test = _shift_data(cfg, sigma, seed)
    truth = exact_knn(corpus, test, cfg.k)
    params = TreeBuildParams(max_leaf_size=cfg.leaf, tree_type="classification",
                             mtry=cfg.mtry, seed=seed, k=cfg.k)
    a = params.mtry_for(cfg.d)
    records, profiles = [], {}
    for tag, points in (("rf-class", train), ("rf-class-corpus", corpus)):
        t0 = time.perf_counter()
        labels = training_labels(corpus, None if points is corpus else points, cfg.k)
        trees = build_trees(points, params, cfg.n_trees, labels, corpus.n)
        index = make_classification_index(trees, corpus, points, labels)
        bt = time.perf_counter() - t0
        profile = ScoreProfile(index, test, truth)
        profiles[tag] = profile
        for target in cfg.targets:
            tau = profile.tau_for(target)
            rec, qt, cand = timed_queries(index, test, truth, SelectionParams(tau=tau), cfg.k)
            records.append(BenchmarkRecord(tag, cfg.n_trees, cfg.leaf, a, tau,
                                           "mean_probability", rec, qt, cand, bt, seed,
                                           extra={"sigma": sigma}))
    return records, profiles


def experiment_distribution_shift(cfg: ShiftConfig = ShiftConfig(), out_prefix=None):
    """Run every (sigma, seed); write one CSV per sigma if ``out_prefix`` is given.

    Returns ``(records, gaps)`` where ``gaps[sigma]`` lists, per seed, the mean
    recall advantage of the query-trained model over the corpus-trained one at
    the matched candidate counts ``cfg.targets``.
    """
    all_records, gaps = [], {}
    for sigma in cfg.sigmas:
        per_sigma = []
        gaps[sigma] = []
        for seed in cfg.seeds:
            recs, prof = distribution_shift_run(cfg, sigma, seed)
            per_sigma += recs
            gaps[sigma].append(float(np.mean([
                recall_at_candidates(prof["rf-class"], t)
                - recall_at_candidates(prof["rf-class-corpus"], t) for t in cfg.targets])))
        if out_prefix is not None:
            write_csv(f"{out_prefix}_sigma{sigma:g}.csv", per_sigma, SHIFT_FIELDS)
        all_records += per_sigma
    return all_records, gaps


@dataclass(frozen=True)
class ScaleConfig:
    n_corpus: int = 10_000
    n_test: int = 500
    d: int = 20
    multipliers: tuple = (1, 4, 16)
    seeds: tuple = (0, 1, 2, 3, 4)
    n_trees: int = 8
    leaf: int = 32
    mtry: Optional[int] = None
    k: int = 10
    targets: tuple = (50, 100, 200, 400)
    sigma: float = 1.0


def training_scale_run(cfg: ScaleConfig, seed: int):
    """Classification forests trained on ``multiplier x n_corpus`` points of the corpus distribution.

    The training set for multiplier ``r`` is the corpus plus ``(r-1) n_corpus``
    fresh draws, so multiplier 1 is the corpus-as-training baseline.
    """
    rng = np.random.default_rng([seed, 7])
    top = max(cfg.multipliers)
    pool = rng.normal(0.0, cfg.sigma, size=((top + 1) * cfg.n_corpus + cfg.n_test, cfg.d))
    pool = pool.astype(np.float32)
    corpus = VectorSet(pool[:cfg.n_corpus])
    test = VectorSet(pool[-cfg.n_test:])
    truth = exact_knn(corpus, test, cfg.k)
    params = TreeBuildParams(max_leaf_size=cfg.leaf, tree_type="classification",
                             mtry=cfg.mtry, seed=seed, k=cfg.k)
    a = params.mtry_for(cfg.d)
    records, profiles, depths = [], {}, {}
    for mult in cfg.multipliers:
        if mult == 1:
            train = corpus
            labels = training_labels(corpus, None, cfg.k)
        else:
            train = VectorSet(pool[:mult * cfg.n_corpus])
            labels = exact_knn(corpus, train, cfg.k)
        t0 = time.perf_counter()
        trees = build_trees(train, params, cfg.n_trees, labels, corpus.n)
        index = make_classification_index(trees, corpus, train, labels)
        bt = time.perf_counter() - t0
        depths[mult] = float(np.mean([
            np.average(t.leaf_depth, weights=t.tables.leaf_n) for t in index.trees]))
        profile = ScoreProfile(index, test, truth)
        profiles[mult] = profile
        for target in cfg.targets:
            tau = profile.tau_for(target)
            rec, qt, cand = timed_queries(index, test, truth, SelectionParams(tau=tau), cfg.k)
            records.append(BenchmarkRecord("rf-class", cfg.n_trees, cfg.leaf, a, tau,
                                           "mean_probability", rec, qt, cand, bt, seed,
                                           extra={"multiplier": mult, "depth": depths[mult]}))
    return records, profiles, depths


def experiment_training_scale(cfg: ScaleConfig = ScaleConfig(), out_path=None):
    """Returns ``(records, recalls, depths)``; ``recalls[mult]`` and ``depths[mult]`` list per-seed values."""
    all_records = []
    recalls = {m: [] for m in cfg.multipliers}
    depths = {m: [] for m in cfg.multipliers}
    for seed in cfg.seeds:
        recs, profiles, dep = training_scale_run(cfg, seed)
        all_records += recs
        for m in cfg.multipliers:
            recalls[m].append(float(np.mean([recall_at_candidates(profiles[m], t)
                                             for t in cfg.targets])))
            depths[m].append(dep[m])
    if out_path is not None:
        write_csv(out_path, all_records, SCALE_FIELDS)
    return all_records, recalls, depths


@dataclass(frozen=True)
class VotingComparison:
    """Recall at matched candidate counts: classification-model selection vs voting.

    ``rf[s, i]`` and ``vote[s, i]`` are, for seed ``s`` and candidate target
    ``targets[i]``, the best recall over the leaf-size grid of each method on
    the same trees.
    """

    targets: tuple
    rf: np.ndarray
    vote: np.ndarray

    def win_fraction(self) -> float:
        rf, vote = self.rf.mean(axis=0), self.vote.mean(axis=0)
        return float(np.mean(rf >= vote))


def compare_with_voting(corpus, test, tree_type: str, *, seeds=(0, 1, 2, 3, 4), n_trees=32,
                        leaf_sizes=(16, 32, 64, 128, 256), targets=(10, 20, 50, 100, 200, 500, 1000),
                        k=10, truth: Optional[GroundTruth] = None,
                        labels: Optional[GroundTruth] = None) -> VotingComparison:
    """Corpus-as-training comparison on identical trees, per seed and leaf size.

    Each method keeps its best leaf size per target, i.e. its frontier over
    the grid, like a grid-searched Pareto comparison.
    """
    corpus = _as_vectorset(corpus)
    test = _as_vectorset(test)
    truth = truth if truth is not None else exact_knn(corpus, test, k)
    labels = labels if labels is not None else training_labels(corpus, None, k)
    rf = np.zeros((len(seeds), len(targets)))
    vote = np.zeros_like(rf)
    for s, seed in enumerate(seeds):
        for leaf in leaf_sizes:
            params = TreeBuildParams(max_leaf_size=leaf, tree_type=tree_type, seed=seed, k=k)
            if tree_type == "classification":
                trees = build_trees(corpus, params, n_trees, labels, corpus.n)
            else:
                trees = build_trees(corpus, params, n_trees)
            p_rf = ScoreProfile(make_classification_index(trees, corpus, corpus, labels), test,
                                truth, "mean_probability")
            p_vote = ScoreProfile(make_voting_index(trees, corpus), test, truth, "raw_count")
            for i, target in enumerate(targets):
                rf[s, i] = max(rf[s, i], recall_at_candidates(p_rf, target))
                vote[s, i] = max(vote[s, i], recall_at_candidates(p_vote, target))
    return VotingComparison(tuple(targets), rf, vote)
