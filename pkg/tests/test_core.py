import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from annforest.core import (GroundTruth, UsageError, VectorSet, dissimilarity, exact_knn,
                            recall)


def brute_force_knn(corpus, queries, k):
    """Plain double loop, sequential float64 sums, ties by lower index."""
    out = []
    for q in queries:
        dists = []
        for j, c in enumerate(corpus):
            s = 0.0
            for a, b in zip(q, c):
                s += (float(a) - float(b)) ** 2
            dists.append((s, j))
        dists.sort()
        out.append([j for _, j in dists[:k]])
    return np.array(out)


class TestDissimilarity:
    def test_pythagorean(self):
        assert dissimilarity([0, 0], [3, 4]) == 25.0
        assert np.sqrt(dissimilarity([0, 0], [3, 4])) == 5.0

    def test_identity(self):
        rng = np.random.default_rng(1)
        u = rng.standard_normal(17)
        assert dissimilarity(u, u) == 0.0

    def test_three_dims(self):
        assert dissimilarity([1, 2, 3], [4, 6, 3]) == 25.0

    def test_dimension_mismatch(self):
        with pytest.raises(UsageError):
            dissimilarity([1, 2], [1, 2, 3])


class TestVectorSet:
    def test_shape_and_dtype(self):
        vs = VectorSet(np.arange(6).reshape(3, 2))
        assert (vs.n, vs.d) == (3, 2)
        assert vs.data.dtype == np.float32
        assert not vs.data.flags.writeable

    @pytest.mark.parametrize("bad", [np.zeros((0, 3)), np.zeros((3, 0)), np.zeros(3)])
    def test_rejects_empty_or_1d(self, bad):
        with pytest.raises(UsageError):
            VectorSet(bad)

    def test_rejects_non_finite(self):
        data = np.zeros((4, 2))
        data[2, 1] = np.nan
        with pytest.raises(UsageError, match="row 2"):
            VectorSet(data)

    def test_digest_depends_on_content(self):
        a = VectorSet(np.zeros((2, 2)))
        b = VectorSet(np.eye(2))
        assert a.digest() != b.digest()
        assert a.digest() == VectorSet(np.zeros((2, 2))).digest()


class TestExactKnn:
    def test_one_dimensional(self):
        gt = exact_knn(np.array([[0.0], [1.0], [10.0]]), np.array([[0.4]]), 2)
        assert gt.indices[0].tolist() == [0, 1]

    def test_query_is_corpus_point(self):
        rng = np.random.default_rng(3)
        corpus = rng.standard_normal((20, 4)).astype(np.float32)
        gt = exact_knn(corpus, corpus[5:6], 1)
        assert gt.indices[0].tolist() == [5]

    def test_matches_double_loop(self):
        rng = np.random.default_rng(0)
        corpus = rng.standard_normal((100, 8)).astype(np.float32)
        queries = rng.standard_normal((10, 8)).astype(np.float32)
        gt = exact_knn(corpus, queries, 10)
        np.testing.assert_array_equal(gt.indices, brute_force_knn(corpus, queries, 10))

    def test_ties_by_lower_index(self):
        corpus = np.array([[1.0], [-1.0], [1.0], [-1.0], [5.0]])
        gt = exact_knn(corpus, np.array([[0.0]]), 3)
        assert gt.indices[0].tolist() == [0, 1, 2]

    def test_small_blocks_give_same_answer(self):
        rng = np.random.default_rng(2)
        corpus = rng.standard_normal((60, 5))
        queries = rng.standard_normal((23, 5))
        a = exact_knn(corpus, queries, 4)
        b = exact_knn(corpus, queries, 4, block_size=7)
        np.testing.assert_array_equal(a.indices, b.indices)

    def test_self_match_puts_self_first_despite_duplicates(self):
        corpus = np.array([[0.0, 0.0], [0.0, 0.0], [3.0, 0.0], [0.0, 4.0]])
        gt = exact_knn(corpus, corpus, 2, self_match=True)
        assert gt.indices[:, 0].tolist() == [0, 1, 2, 3]
        assert gt.indices[1].tolist() == [1, 0]

    def test_k_too_large(self):
        with pytest.raises(UsageError):
            exact_knn(np.zeros((3, 2)), np.zeros((1, 2)), 4)

    def test_dimension_mismatch(self):
        with pytest.raises(UsageError):
            exact_knn(np.zeros((3, 2)), np.zeros((1, 3)), 1)

    def test_sorted_distances(self):
        rng = np.random.default_rng(4)
        gt = exact_knn(rng.standard_normal((50, 3)), rng.standard_normal((5, 3)), 7)
        assert np.all(np.diff(gt.dissimilarities, axis=1) >= 0)
        for row in gt.indices:
            assert len(set(row.tolist())) == 7

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_permutation_equivariant(self, seed):
        rng = np.random.default_rng(seed)
        corpus = rng.standard_normal((40, 3)).astype(np.float32)
        queries = rng.standard_normal((5, 3)).astype(np.float32)
        perm = rng.permutation(40)
        a = exact_knn(corpus, queries, 5)
        b = exact_knn(corpus[perm], queries, 5)
        np.testing.assert_array_equal(perm[b.indices], a.indices)


class TestRecall:
    def test_full_overlap(self):
        truth = np.arange(10)
        assert recall(set(range(10)), truth) == 1.0

    def test_empty(self):
        assert recall(set(), np.arange(10)) == 0.0

    def test_partial(self):
        assert recall({2, 4, 9, 11}, np.array([1, 2, 3, 4, 5])) == pytest.approx(0.4)

    def test_exact_result_has_full_recall(self):
        rng = np.random.default_rng(5)
        corpus = rng.standard_normal((30, 3))
        queries = rng.standard_normal((6, 3))
        gt = exact_knn(corpus, queries, 4)
        for i in range(6):
            assert recall(gt.indices[i], gt.row(i)) == 1.0

    @settings(max_examples=50, deadline=None)
    @given(st.sets(st.integers(0, 30)), st.sets(st.integers(0, 30)))
    def test_monotone_under_supersets(self, s, extra):
        truth = np.array([1, 4, 7, 9, 22])
        assert recall(s | extra, truth) >= recall(s, truth)


def test_ground_truth_rows():
    gt = GroundTruth(np.array([[0, 1], [2, 0]]), np.array([[0.0, 1.0], [0.5, 2.0]]))
    assert gt.k == 2 and len(gt) == 2
    assert gt.rows[1].indices.tolist() == [2, 0]
