import struct

import numpy as np
import pytest

from annforest.core import UsageError, VectorSet, exact_knn
from annforest.index import IndexParams, build, build_trees, query_many
from annforest.io import (DatasetSpec, FormatError, GroundTruthCache, generate_synthetic,
                          load_index, read_bvecs, read_fvecs, read_ivecs, read_raw_f32,
                          read_vectors, save_index, write_bvecs, write_fvecs, write_ivecs)
from annforest.model import SelectionParams, make_classification_index
from annforest.trees import TreeBuildParams


class TestVectorFiles:
    def test_fvecs_bytes(self, tmp_path):
        path = tmp_path / "a.fvecs"
        path.write_bytes(bytes([2, 0, 0, 0]) + struct.pack("<ff", 1.0, 2.0))
        vs = read_fvecs(path)
        assert (vs.n, vs.d) == (1, 2)
        assert vs[0].tolist() == [1.0, 2.0]

    def test_empty_file(self, tmp_path):
        path = tmp_path / "e.fvecs"
        path.write_bytes(b"")
        with pytest.raises(FormatError):
            read_fvecs(path)

    def test_round_trip(self, tmp_path):
        data = np.random.default_rng(0).standard_normal((100, 16)).astype(np.float32)
        write_fvecs(tmp_path / "r.fvecs", data)
        assert read_fvecs(tmp_path / "r.fvecs").data.tobytes() == data.tobytes()

    def test_bvecs_widened(self, tmp_path):
        data = np.random.default_rng(1).integers(0, 256, (10, 5)).astype(np.uint8)
        write_bvecs(tmp_path / "b.bvecs", data)
        vs = read_bvecs(tmp_path / "b.bvecs")
        assert vs.data.dtype == np.float32
        np.testing.assert_array_equal(vs.data, data.astype(np.float32))

    def test_ivecs_round_trip(self, tmp_path):
        rows = np.arange(12, dtype=np.int32).reshape(3, 4)
        write_ivecs(tmp_path / "g.ivecs", rows)
        np.testing.assert_array_equal(read_ivecs(tmp_path / "g.ivecs"), rows)

    def test_inconsistent_dimension_names_record(self, tmp_path):
        raw = struct.pack("<iff", 2, 1, 2) + struct.pack("<iff", 2, 3, 4) + struct.pack("<ifff", 3, 1, 2, 3)
        (tmp_path / "x.fvecs").write_bytes(raw)
        with pytest.raises(FormatError, match="record 2"):
            read_fvecs(tmp_path / "x.fvecs")

    def test_truncated_names_record(self, tmp_path):
        raw = struct.pack("<iff", 2, 1, 2) + struct.pack("<if", 2, 3)
        (tmp_path / "t.fvecs").write_bytes(raw)
        with pytest.raises(FormatError, match="record 1"):
            read_fvecs(tmp_path / "t.fvecs")

    def test_non_finite_names_record(self, tmp_path):
        raw = struct.pack("<iff", 2, 1, 2) + struct.pack("<iff", 2, float("nan"), 4)
        (tmp_path / "n.fvecs").write_bytes(raw)
        with pytest.raises(FormatError, match="record 1"):
            read_fvecs(tmp_path / "n.fvecs")

    def test_raw_f32(self, tmp_path):
        data = np.arange(12, dtype="<f4")
        (tmp_path / "raw.bin").write_bytes(data.tobytes())
        vs = read_raw_f32(tmp_path / "raw.bin", 4)
        assert (vs.n, vs.d) == (3, 4)
        with pytest.raises(FormatError):
            read_raw_f32(tmp_path / "raw.bin", 5)

    def test_read_vectors_by_spec(self, tmp_path):
        data = np.ones((3, 2), dtype=np.float32)
        write_fvecs(tmp_path / "s.fvecs", data)
        assert read_vectors(str(tmp_path / "s.fvecs")).n == 3


class TestSynthetic:
    def test_uniform_mean(self):
        vs = generate_synthetic(DatasetSpec("uniform", lo=-10, hi=10, n=20_000, d=50, seed=1))
        assert abs(vs.data.astype(np.float64).mean()) < 0.1
        assert vs.data.min() >= -10 and vs.data.max() <= 10

    def test_gaussian_std(self):
        vs = generate_synthetic(DatasetSpec("gaussian", sigma=2.5, n=20_000, d=50, seed=2))
        assert abs(vs.data.astype(np.float64).std() - 2.5) < 0.025

    def test_same_seed_identical(self):
        spec = DatasetSpec.parse("gaussian:1:100:7:3")
        assert generate_synthetic(spec).data.tobytes() == generate_synthetic(spec).data.tobytes()

    def test_lowrank_shares_basis(self):
        a = generate_synthetic(DatasetSpec.parse("lowrank:3:0:50:10:1:0"))
        b = generate_synthetic(DatasetSpec.parse("lowrank:3:0:50:10:2:0"))
        both = np.vstack([a.data, b.data]).astype(np.float64)
        assert np.linalg.matrix_rank(both, tol=1e-3) == 3

    @pytest.mark.parametrize("text", ["uniform:5:1:10:2:0", "gaussian:0:10:2:0", "foo:1",
                                      "uniform:a:b:c:d:e", "data.txt"])
    def test_bad_specs(self, text):
        with pytest.raises(UsageError):
            DatasetSpec.parse(text)

    def test_parse_uniform(self):
        spec = DatasetSpec.parse("uniform:-10:10:1000:50:4")
        assert (spec.kind, spec.lo, spec.hi, spec.n, spec.d, spec.seed) == (
            "uniform", -10.0, 10.0, 1000, 50, 4)


@pytest.fixture(scope="module")
def small_index():
    rng = np.random.default_rng(0)
    C = VectorSet(rng.standard_normal((400, 6)))
    Q = VectorSet(rng.standard_normal((100, 6)))
    return C, Q


class TestIndexContainer:
    @pytest.mark.parametrize("tree_type,voting", [("rp", False), ("kd", True), ("pca", False),
                                                  ("classification", False)])
    def test_round_trip_queries(self, tmp_path, small_index, tree_type, voting):
        C, Q = small_index
        p = IndexParams(tree=TreeBuildParams(max_leaf_size=30, tree_type=tree_type, seed=1),
                        n_trees=4, k=5, voting=voting)
        index = build(C, params=p)
        save_index(index, tmp_path / "i.bin")
        loaded = load_index(tmp_path / "i.bin", C)
        assert loaded.mode == index.mode and loaded.k == index.k
        for sel in (SelectionParams(), SelectionParams(tau=0.1),
                    SelectionParams(tau=1, scale="raw_count")):
            assert query_many(loaded, Q, 5, sel) == query_many(index, Q, 5, sel)
        for a, b in zip(index.trees, loaded.trees):
            np.testing.assert_array_equal(a.tables.labels, b.tables.labels)
            np.testing.assert_array_equal(a.tables.counts, b.tables.counts)

    def test_corrupted_header(self, tmp_path, small_index):
        C, _ = small_index
        index = build(C, params=IndexParams(n_trees=2, k=3))
        path = tmp_path / "c.bin"
        save_index(index, path)
        for pos in (0, 9, 20):
            raw = bytearray(path.read_bytes())
            raw[pos] ^= 0xFF
            (tmp_path / "bad.bin").write_bytes(bytes(raw))
            with pytest.raises(FormatError):
                load_index(tmp_path / "bad.bin", C)

    def test_truncated(self, tmp_path, small_index):
        C, _ = small_index
        save_index(build(C, params=IndexParams(n_trees=2, k=3)), tmp_path / "t.bin")
        raw = (tmp_path / "t.bin").read_bytes()
        (tmp_path / "short.bin").write_bytes(raw[:len(raw) // 2])
        with pytest.raises(FormatError):
            load_index(tmp_path / "short.bin", C)

    def test_wrong_corpus(self, tmp_path, small_index):
        C, _ = small_index
        save_index(build(C, params=IndexParams(n_trees=2, k=3)), tmp_path / "w.bin")
        other = VectorSet(C.data + 1)
        with pytest.raises(UsageError):
            load_index(tmp_path / "w.bin", other)

    def test_empty_leaves_round_trip(self, tmp_path):
        # trees grown on the corpus, tables fitted on two training points only
        C = VectorSet(np.arange(16.0)[:, None])
        train = VectorSet(np.array([[0.0], [1.0]]))
        trees = build_trees(C, TreeBuildParams(max_leaf_size=2), 1)
        index = make_classification_index(trees, C, train, exact_knn(C, train, 1))
        tree = index.trees[0]
        empty = np.flatnonzero(tree.tables.leaf_n == 0)
        assert len(empty) > 0
        save_index(index, tmp_path / "e.bin")
        back = load_index(tmp_path / "e.bin", C).trees[0]
        for leaf in empty:
            assert len(back.leaf_table(leaf)) == 0 and back.tables.leaf_n[leaf] == 0


class TestGroundTruthCache:
    def test_hit_is_identical(self, tmp_path, small_index):
        C, Q = small_index
        cache = GroundTruthCache(tmp_path / "gt")
        first = cache.get(C, Q, 5)
        assert len(list((tmp_path / "gt").iterdir())) == 1
        second = cache.get(C, Q, 5)
        assert first.indices.tobytes() == second.indices.tobytes()
        assert first.dissimilarities.tobytes() == second.dissimilarities.tobytes()

    def test_keyed_by_k_and_self(self, tmp_path, small_index):
        C, Q = small_index
        cache = GroundTruthCache(tmp_path)
        cache.get(C, Q, 5)
        cache.get(C, Q, 6)
        self_gt = cache.get(C, None, 3)
        assert self_gt.indices[:, 0].tolist() == list(range(C.n))
        assert len(list(tmp_path.glob("gt_*.npz"))) == 3
