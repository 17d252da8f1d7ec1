import numpy as np
import pytest

from annforest.core import UsageError, VectorSet, exact_knn, recall
from annforest.index import IndexParams, build, query, query_many, rerank, tree_seeds
from annforest.model import SelectionParams, select_candidates
from annforest.trees import TreeBuildParams


@pytest.fixture(scope="module")
def data():
    rng = np.random.default_rng(0)
    return VectorSet(rng.standard_normal((1000, 8))), VectorSet(rng.standard_normal((100, 8)))


def params(tree_type="rp", T=10, leaf=100, k=10, **kw):
    return IndexParams(tree=TreeBuildParams(max_leaf_size=leaf, tree_type=tree_type, seed=3),
                       n_trees=T, k=k, **kw)


class TestBuild:
    def test_partition_conservation(self, data):
        C, _ = data
        index = build(C, params=params())
        assert sum(int(t.tables.leaf_n.sum()) for t in index.trees) == 10 * 1000
        assert index.n_trees == 10 and index.k == 10

    @pytest.mark.parametrize("tree_type", ["rp", "kd", "pca", "classification"])
    def test_deterministic(self, data, tree_type):
        C, Q = data
        p = params(tree_type, T=4)
        a = query_many(build(C, params=p), Q)
        b = query_many(build(C, params=p), Q)
        assert a == b

    def test_voting_scores_are_comembership(self, data):
        C, Q = data
        index = build(C, params=params(T=5, voting=True))
        assert index.mode == "voting" and index.k == 1
        x = Q[0]
        labels, scores = index.scores(x, "raw_count")
        member = np.zeros(C.n)
        for t, leaf in zip(index.trees, index.landing_leaves(x)):
            member[t.leaf_table(leaf).labels] += 1
        assert dict(zip(labels.tolist(), scores.tolist())) == {
            j: v for j, v in enumerate(member.tolist()) if v > 0}

    def test_separate_training_set(self, data):
        C, Q = data
        train = VectorSet(np.random.default_rng(1).standard_normal((300, 8)))
        index = build(C, train, params(T=3))
        assert all(t.tables.leaf_n.sum() == 300 for t in index.trees)
        assert all(t.tables.counts.sum() == 300 * 10 for t in index.trees)

    def test_dimension_mismatch(self, data):
        C, _ = data
        with pytest.raises(UsageError):
            build(C, VectorSet(np.zeros((5, 3))), params())

    def test_k_too_large(self):
        with pytest.raises(UsageError):
            build(np.zeros((5, 2)), params=params(k=6))

    def test_tree_seeds_are_prefix_stable(self):
        assert tree_seeds(5, 3) == tree_seeds(5, 8)[:3]
        assert len(set(tree_seeds(5, 8))) == 8


class TestQuery:
    def test_empty_candidate_set(self, data):
        C, Q = data
        index = build(C, params=params(T=2))
        res = query(index, Q[0], 10, SelectionParams(tau=1.0))
        assert res.candidate_count == 0
        assert len(res.indices) == 0
        assert recall(res.indices, exact_knn(C, Q[:1], 10).row(0)) == 0.0

    def test_rerank_equals_restricted_brute_force(self, data):
        C, Q = data
        index = build(C, params=params(T=3, leaf=50))
        for i in range(20):
            sel = SelectionParams(tau=0.05)
            res = query(index, Q[i], 10, sel)
            cand = select_candidates(index, Q[i], sel)
            assert res.candidate_count == len(cand)
            if len(cand) == 0:
                continue
            sub = exact_knn(C.data[cand], Q[i:i + 1], min(10, len(cand)))
            assert res.indices.tolist() == cand[sub.indices[0]].tolist()
            assert set(res.indices.tolist()) <= set(cand.tolist())
            assert np.all(np.diff(res.neighbors.dissimilarities) >= 0)

    def test_short_result_when_few_candidates(self, data):
        C, Q = data
        index = build(C, params=params(T=1, leaf=100))
        res = query(index, Q[0], 10, SelectionParams(max_candidates=4))
        assert len(res.indices) == 4

    def test_full_support_gives_full_recall(self):
        rng = np.random.default_rng(2)
        C = VectorSet(rng.standard_normal((200, 4)))
        Q = VectorSet(rng.standard_normal((20, 4)))
        index = build(C, params=params(T=20, leaf=100, k=5))
        truth = exact_knn(C, Q, 5)
        for i, res in enumerate(query_many(index, Q, 5)):
            cand = select_candidates(index, Q[i], SelectionParams())
            if set(truth.indices[i]) <= set(cand.tolist()):
                assert recall(res.indices, truth.row(i)) == 1.0
                assert res.indices.tolist() == truth.indices[i].tolist()

    def test_recall_at_zero_bounds_positive_tau(self, data):
        C, Q = data
        index = build(C, params=params(T=8, leaf=50))
        truth = exact_knn(C, Q, 10)
        for tau in (0.01, 0.1, 0.3):
            for i in range(30):
                r0 = recall(query(index, Q[i]).indices, truth.row(i))
                r1 = recall(query(index, Q[i], selection=SelectionParams(tau=tau)).indices,
                            truth.row(i))
                assert r0 >= r1

    def test_timings_recorded(self, data):
        C, Q = data
        res = query(build(C, params=params(T=2)), Q[0])
        assert set(res.timings) == {"score", "select", "rerank"}
        assert all(v >= 0 for v in res.timings.values())

    def test_rerank_empty(self, data):
        C, Q = data
        assert len(rerank(C, Q[0], np.zeros(0, np.int64), 3)) == 0
