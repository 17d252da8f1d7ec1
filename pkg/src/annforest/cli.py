"""Command line entry point: ``annforest <subcommand> ...``.

Dataset arguments accept a ``.fvecs``/``.bvecs`` path, ``raw-f32:path:dim``
or a synthetic recipe such as ``uniform:-10:10:10000:50:0``,
``gaussian:2.5:10000:50:1`` or ``lowrank:10:0.1:20000:100:0:0``.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time

import numpy as np

from . import bench
from .core import UsageError, exact_knn
from .index import IndexParams, build, query
from .io import (FormatError, GroundTruthCache, load_index, read_ivecs, read_vectors,
                 save_index, write_ivecs)
from .model import ScoreAccumulator, SelectionParams
from .trees import TreeBuildParams

log = logging.getLogger("annforest")


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v)


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v)


def _strs(text: str) -> tuple:
    return tuple(v for v in text.split(",") if v)


def _labels(args, corpus, training):
    if args.cache:
        return GroundTruthCache(args.cache).get(corpus, training, args.k)
    if training is None:
        return exact_knn(corpus, corpus, args.k, self_match=True)
    return exact_knn(corpus, training, args.k)


def cmd_groundtruth(args) -> int:
    corpus = read_vectors(args.corpus)
    queries = read_vectors(args.queries) if args.queries else None
    gt = _labels(args, corpus, queries)
    write_ivecs(args.out, gt.indices)
    log.info("wrote %d x %d neighbors to %s", len(gt), gt.k, args.out)
    return 0


def cmd_build(args) -> int:
    corpus = read_vectors(args.corpus)
    training = read_vectors(args.training) if args.training else None
    tree = TreeBuildParams(max_leaf_size=args.leaf, tree_type=args.tree_type, mtry=args.mtry,
                           seed=args.seed, k=args.k)
    params = IndexParams(tree=tree, n_trees=args.trees, k=args.k, voting=args.voting)
    labels = None
    if not args.voting:
        labels = _labels(args, corpus, training)
    t0 = time.perf_counter()
    index = build(corpus, training, params, labels=labels)
    save_index(index, args.out)
    log.info("built %s-mode index with %d trees in %.2fs", index.mode, index.n_trees,
             time.perf_counter() - t0)
    return 0


def cmd_query(args) -> int:
    corpus = read_vectors(args.corpus)
    queries = read_vectors(args.queries)
    index = load_index(args.index, corpus)
    sel = SelectionParams(tau=args.tau, scale=args.scale, max_candidates=args.max_candidates)
    scratch = ScoreAccumulator(index.m)
    results = [query(index, queries[i], args.k, sel, scratch=scratch) for i in range(queries.n)]
    if args.out:
        rows = np.full((queries.n, args.k), -1, dtype=np.int32)
        for i, r in enumerate(results):
            rows[i, :len(r.indices)] = r.indices
        write_ivecs(args.out, rows)
    cand = np.mean([r.candidate_count for r in results])
    qtime = np.mean([sum(r.timings.values()) for r in results]) / 1e9
    msg = f"queries={queries.n} mean_candidates={cand:.1f} mean_qtime={qtime:.6f}s"
    if args.truth:
        truth = read_ivecs(args.truth)[:, :args.k]
        hits = sum(len(np.intersect1d(r.indices, truth[i])) for i, r in enumerate(results))
        msg += f" recall={hits / truth.size:.4f}"
    print(msg)
    return 0


def cmd_grid(args) -> int:
    corpus = read_vectors(args.corpus)
    training = read_vectors(args.training) if args.training else None
    test = read_vectors(args.test)
    grid = bench.GridSpec(tree_types=args.tree_types, n_trees=args.trees,
                          leaf_sizes=args.leaf, mtry=args.mtry, modes=args.modes,
                          scales=args.scales, taus=args.taus or None, seeds=args.seeds, k=args.k)
    truth = train_labels = None
    if args.cache:
        cache = GroundTruthCache(args.cache)
        truth = cache.get(corpus, test, args.k)
        train_labels = cache.get(corpus, training, args.k)
    records = bench.run_grid(corpus, training, test, grid, truth=truth, train_labels=train_labels)
    bench.write_csv(args.out, records)
    log.info("wrote %d records to %s", len(records), args.out)
    return 0


def cmd_shift(args) -> int:
    kw = dict(seeds=args.seeds, n_trees=args.trees, leaf=args.leaf, mtry=args.mtry, k=args.k,
              n_test=args.test_size)
    cfg = bench.ShiftConfig.scaled(args.scale_factor, **kw) if args.scale_factor else \
        bench.ShiftConfig(**kw)
    _, gaps = bench.experiment_distribution_shift(cfg, out_prefix=args.out_prefix)
    for sigma, g in gaps.items():
        print(f"sigma={sigma:g} gap_mean={np.mean(g):+.4f} gap_std={np.std(g, ddof=1) if len(g) > 1 else 0:.4f}")
    return 0


def cmd_scale(args) -> int:
    cfg = bench.ScaleConfig(n_corpus=args.corpus_size, d=args.dim, multipliers=args.multipliers,
                            seeds=args.seeds, n_trees=args.trees, leaf=args.leaf,
                            mtry=args.mtry, k=args.k, n_test=args.test_size)
    _, recalls, depths = bench.experiment_training_scale(cfg, out_path=args.out)
    for m in cfg.multipliers:
        print(f"multiplier={m} recall={np.mean(recalls[m]):.4f} depth={np.mean(depths[m]):.2f}")
    return 0


def cmd_pareto(args) -> int:
    records = bench.read_csv(args.input)
    if args.per_algorithm:
        frontier = []
        for alg in sorted({r.algorithm for r in records}):
            frontier += bench.pareto_frontier([r for r in records if r.algorithm == alg])
    else:
        frontier = bench.pareto_frontier(records)
    bench.write_csv(args.out, frontier)
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="annforest", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, k=True):
        if k:
            sp.add_argument("-k", type=int, default=10, help="neighbor count")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--cache", help="ground-truth cache directory")

    sp = sub.add_parser("groundtruth", help="exact k-NN as .ivecs")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--queries", help="defaults to the corpus itself")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_groundtruth)

    sp = sub.add_parser("build", help="build and save an index")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--training", help="defaults to the corpus")
    sp.add_argument("--tree-type", default="rp", choices=["rp", "kd", "pca", "classification"])
    sp.add_argument("--trees", type=int, default=10)
    sp.add_argument("--leaf", type=int, default=128)
    sp.add_argument("--mtry", type=int)
    sp.add_argument("--voting", action="store_true", help="voting/lookup-mode tables")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_build)

    sp = sub.add_parser("query", help="query a saved index")
    sp.add_argument("--index", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--queries", required=True)
    sp.add_argument("--tau", type=float, default=0.0)
    sp.add_argument("--scale", default="mean_probability", choices=["mean_probability", "raw_count"])
    sp.add_argument("--max-candidates", type=int)
    sp.add_argument("--truth", help=".ivecs ground truth for recall")
    sp.add_argument("--out", help="write neighbor indices as .ivecs (-1 pads short rows)")
    common(sp)
    sp.set_defaults(func=cmd_query)

    sp = sub.add_parser("grid", help="grid search to CSV")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--training")
    sp.add_argument("--test", required=True)
    sp.add_argument("--tree-types", type=_strs, default=("rp",))
    sp.add_argument("--trees", type=_ints, default=(8, 32, 128))
    sp.add_argument("--leaf", type=_ints, default=(32, 128, 512))
    sp.add_argument("--mtry", type=_ints, default=())
    sp.add_argument("--modes", type=_strs, default=("rf", "vote"))
    sp.add_argument("--scales", type=_strs, default=("mean_probability",))
    sp.add_argument("--taus", type=_floats, default=())
    sp.add_argument("--seeds", type=_ints, default=(0,))
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_grid)

    sp = sub.add_parser("shift-exp", help="query-distribution vs corpus training")
    sp.add_argument("--scale-factor", type=float, help="multiplier on the full-size experiment (100k corpus, d=500)")
    sp.add_argument("--seeds", type=_ints, default=(0, 1, 2, 3, 4))
    sp.add_argument("--trees", type=int, default=16)
    sp.add_argument("--leaf", type=int, default=32)
    sp.add_argument("--mtry", type=int)
    sp.add_argument("--test-size", type=int, default=500)
    sp.add_argument("--out-prefix", required=True)
    common(sp)
    sp.set_defaults(func=cmd_shift)

    sp = sub.add_parser("scale-exp", help="training-set size experiment")
    sp.add_argument("--multipliers", type=_ints, default=(1, 4, 16))
    sp.add_argument("--corpus-size", type=int, default=10_000)
    sp.add_argument("--dim", type=int, default=20)
    sp.add_argument("--seeds", type=_ints, default=(0, 1, 2, 3, 4))
    sp.add_argument("--trees", type=int, default=8)
    sp.add_argument("--leaf", type=int, default=32)
    sp.add_argument("--mtry", type=int)
    sp.add_argument("--test-size", type=int, default=500)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_scale)

    sp = sub.add_parser("pareto", help="Pareto frontier of a grid CSV")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--per-algorithm", action="store_true")
    sp.set_defaults(func=cmd_pareto)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, FormatError, OSError) as exc:
        print(f"annforest: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
