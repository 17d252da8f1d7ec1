"""Vector file formats, synthetic data sets, ground-truth caching and the index container.

fvecs/bvecs/ivecs records are ``[int32 d][d values]``, little-endian; raw-f32
files are a bare little-endian float32 matrix with the dimension given
separately.

Index container (all little-endian)::

    magic "ANNFIDX\\0" | u32 version | u8 mode | u8 tree type | u16 0
    | u32 T | u32 k | u32 d | u64 m | 16 bytes corpus digest
    per tree:  u64 tree_id | i64 root | u32 nodes | u32 leaves | u32 directions
               i32 axis[nodes] | i32 dir_id[nodes] | f64 threshold[nodes]
               | i32 left[nodes] | i32 right[nodes] | f64 directions[directions*d]
               | i32 leaf_depth[leaves] | u32 leaf_n[leaves] | u32 entries[leaves]
               | u32 label_delta[sum entries] | u32 count[sum entries]
    u32 CRC-32 of everything above

Labels inside a leaf are stored as the first label followed by successive
differences.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .core import GroundTruth, UsageError, VectorSet, exact_knn
from .model import MODES, EnsembleIndex, LeafTables
from .trees import TREE_TYPES, PartitionTree

MAGIC = b"ANNFIDX\x00"
VERSION = 1
_HEADER = struct.Struct("<8sIBBHIIIQ16s")
_TREE_HEADER = struct.Struct("<QqIII")
_FORMATS = ("fvecs", "bvecs", "raw-f32")


class FormatError(ValueError):
    """Malformed vector file or index container."""


@dataclass(frozen=True)
class DatasetSpec:
    """A vector file (``path`` + ``format``) or a synthetic recipe.

    ``kind`` is ``"file"``, ``"uniform"``, ``"gaussian"`` or ``"lowrank"``.
    A lowrank set is ``Z A + noise`` with ``Z`` standard normal ``n x rank``;
    the basis ``A`` depends only on ``basis_seed``, so sets sharing it come
    from the same distribution.
    """

    kind: str
    path: Optional[str] = None
    format: Optional[str] = None
    dim: Optional[int] = None  # raw-f32 only
    n: int = 0
    d: int = 0
    lo: float = -10.0
    hi: float = 10.0
    sigma: float = 1.0
    seed: int = 0
    rank: int = 10
    noise: float = 0.1
    basis_seed: int = 0

    def __post_init__(self):
        if self.kind == "file":
            if self.format not in _FORMATS:
                raise UsageError(f"unknown vector format {self.format!r}")
            if self.format == "raw-f32" and not self.dim:
                raise UsageError("raw-f32 files need an explicit dimension")
        elif self.kind in ("uniform", "gaussian", "lowrank"):
            if self.n < 1 or self.d < 1:
                raise UsageError("synthetic recipes need n >= 1 and d >= 1")
            if self.kind == "uniform" and not self.lo < self.hi:
                raise UsageError("uniform recipe needs lo < hi")
            if self.kind == "gaussian" and not self.sigma > 0:
                raise UsageError("gaussian recipe needs sigma > 0")
            if self.kind == "lowrank" and (self.rank < 1 or self.noise < 0):
                raise UsageError("lowrank recipe needs rank >= 1 and noise >= 0")
        else:
            raise UsageError(f"unknown dataset kind {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "DatasetSpec":
        """Parse ``uniform:lo:hi:n:d:seed``, ``gaussian:sigma:n:d:seed``,
        ``lowrank:rank:noise:n:d:seed:basis_seed``, ``raw-f32:path:dim`` or a
        ``.fvecs``/``.bvecs`` path."""
        parts = text.split(":")
        try:
            if parts[0] == "uniform" and len(parts) == 6:
                return cls("uniform", lo=float(parts[1]), hi=float(parts[2]), n=int(parts[3]),
                           d=int(parts[4]), seed=int(parts[5]))
            if parts[0] == "gaussian" and len(parts) == 5:
                return cls("gaussian", sigma=float(parts[1]), n=int(parts[2]), d=int(parts[3]),
                           seed=int(parts[4]))
            if parts[0] == "lowrank" and len(parts) == 7:
                return cls("lowrank", rank=int(parts[1]), noise=float(parts[2]), n=int(parts[3]),
                           d=int(parts[4]), seed=int(parts[5]), basis_seed=int(parts[6]))
            if parts[0] == "raw-f32" and len(parts) == 3:
                return cls("file", path=parts[1], format="raw-f32", dim=int(parts[2]))
        except ValueError as exc:
            raise UsageError(f"bad dataset spec {text!r}: {exc}") from None
        suffix = Path(text).suffix.lstrip(".")
        if suffix in ("fvecs", "bvecs"):
            return cls("file", path=text, format=suffix)
        raise UsageError(f"cannot interpret dataset spec {text!r}")


def _read_records(raw: bytes, width: int, dtype: str, name: str) -> np.ndarray:
    if len(raw) == 0:
        raise FormatError(f"{name}: empty file")
    if len(raw) < 4:
        raise FormatError(f"{name}: truncated record 0")
    d = struct.unpack_from("<i", raw, 0)[0]
    if d < 1:
        raise FormatError(f"{name}: record 0 has dimension {d}")
    rec = 4 + d * width
    n, rem = divmod(len(raw), rec)
    records = np.frombuffer(raw, dtype=np.dtype([("d", "<i4"), ("v", dtype, (d,))]), count=n)
    bad = np.flatnonzero(records["d"] != d)
    if len(bad):
        raise FormatError(f"{name}: record {int(bad[0])} has dimension "
                          f"{int(records['d'][bad[0]])}, expected {d}")
    if rem:
        raise FormatError(f"{name}: truncated record {n}")
    return records["v"]


def _check_finite(arr: np.ndarray, name: str) -> np.ndarray:
    finite = np.isfinite(arr).all(axis=1)
    if not finite.all():
        raise FormatError(f"{name}: non-finite value in record {int(np.flatnonzero(~finite)[0])}")
    return arr


def read_fvecs(path) -> VectorSet:
    raw = Path(path).read_bytes()
    return VectorSet(_check_finite(_read_records(raw, 4, "<f4", str(path)).astype(np.float32), str(path)))


def read_bvecs(path) -> VectorSet:
    raw = Path(path).read_bytes()
    return VectorSet(_read_records(raw, 1, "u1", str(path)).astype(np.float32))


def read_ivecs(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    return _read_records(raw, 4, "<i4", str(path)).astype(np.int32)


def read_raw_f32(path, dim: int) -> VectorSet:
    raw = Path(path).read_bytes()
    if len(raw) == 0:
        raise FormatError(f"{path}: empty file")
    n, rem = divmod(len(raw), 4 * dim)
    if rem:
        raise FormatError(f"{path}: truncated record {n}")
    arr = np.frombuffer(raw, dtype="<f4").reshape(n, dim).astype(np.float32)
    return VectorSet(_check_finite(arr, str(path)))


def _write_records(path, arr: np.ndarray, dtype: str) -> None:
    arr = np.asarray(arr)
    n, d = arr.shape
    rec = np.empty(n, dtype=np.dtype([("d", "<i4"), ("v", dtype, (d,))]))
    rec["d"] = d
    rec["v"] = arr
    Path(path).write_bytes(rec.tobytes())


def write_fvecs(path, vectors) -> None:
    data = vectors.data if isinstance(vectors, VectorSet) else vectors
    _write_records(path, data, "<f4")


def write_bvecs(path, vectors) -> None:
    data = vectors.data if isinstance(vectors, VectorSet) else vectors
    _write_records(path, np.asarray(data).astype(np.uint8), "u1")


def write_ivecs(path, rows) -> None:
    _write_records(path, rows, "<i4")


def generate_synthetic(spec: DatasetSpec) -> VectorSet:
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "uniform":
        data = rng.uniform(spec.lo, spec.hi, size=(spec.n, spec.d))
    elif spec.kind == "gaussian":
        data = rng.normal(0.0, spec.sigma, size=(spec.n, spec.d))
    elif spec.kind == "lowrank":
        basis = np.random.default_rng(spec.basis_seed).standard_normal((spec.rank, spec.d))
        data = rng.standard_normal((spec.n, spec.rank)) @ basis
        data += spec.noise * rng.standard_normal((spec.n, spec.d))
    else:
        raise UsageError(f"{spec.kind!r} is not a synthetic recipe")
    return VectorSet(data.astype(np.float32))


def read_vectors(spec: Union[DatasetSpec, str]) -> VectorSet:
    if isinstance(spec, str):
        spec = DatasetSpec.parse(spec)
    if spec.kind != "file":
        return generate_synthetic(spec)
    if spec.format == "fvecs":
        return read_fvecs(spec.path)
    if spec.format == "bvecs":
        return read_bvecs(spec.path)
    return read_raw_f32(spec.path, spec.dim)


class GroundTruthCache:
    """On-disk cache of exact k-NN results keyed by data digests and ``k``."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def path_for(self, corpus: VectorSet, queries: VectorSet, k: int, self_match: bool) -> Path:
        tag = "self" if self_match else "plain"
        return self.directory / f"gt_{corpus.digest()}_{queries.digest()}_{k}_{tag}.npz"

    def get(self, corpus: VectorSet, queries: Optional[VectorSet], k: int) -> GroundTruth:
        self_match = queries is None or queries is corpus
        queries = corpus if queries is None else queries
        path = self.path_for(corpus, queries, k, self_match)
        if path.exists():
            with np.load(path) as z:
                return GroundTruth(z["indices"], z["dissimilarities"])
        gt = exact_knn(corpus, queries, k, self_match=self_match)
        self.directory.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp.npz")
        np.savez(tmp, indices=gt.indices, dissimilarities=gt.dissimilarities)
        os.replace(tmp, path)
        return gt


def _tree_bytes(tree: PartitionTree, d: int) -> bytes:
    tables: LeafTables = tree.tables
    sizes = np.diff(tables.ptr)
    deltas = tables.labels.copy()
    starts = tables.ptr[:-1][sizes > 0]
    within = np.ones(len(deltas), dtype=bool)
    within[starts] = False
    deltas[1:][within[1:]] = np.diff(tables.labels)[within[1:]]
    parts = [
        _TREE_HEADER.pack(tree.tree_id, tree.root, tree.n_nodes, tree.n_leaves,
                          len(tree.directions)),
        tree.axis.astype("<i4").tobytes(),
        tree.dir_id.astype("<i4").tobytes(),
        tree.threshold.astype("<f8").tobytes(),
        tree.left.astype("<i4").tobytes(),
        tree.right.astype("<i4").tobytes(),
        tree.directions.reshape(-1, d).astype("<f8").tobytes(),
        tree.leaf_depth.astype("<i4").tobytes(),
        tables.leaf_n.astype("<u4").tobytes(),
        sizes.astype("<u4").tobytes(),
        deltas.astype("<u4").tobytes(),
        tables.counts.astype("<u4").tobytes(),
    ]
    return b"".join(parts)


def save_index(index: EnsembleIndex, path) -> None:
    header = _HEADER.pack(MAGIC, VERSION, MODES.index(index.mode),
                          TREE_TYPES.index(index.tree_type), 0, index.n_trees, index.k,
                          index.d, index.m, index.corpus.digest().encode("ascii"))
    body = header + b"".join(_tree_bytes(t, index.d) for t in index.trees)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        if self.pos + size > len(self.buf):
            raise FormatError("index file is truncated")
        arr = np.frombuffer(self.buf, dtype=dtype, count=count, offset=self.pos)
        self.pos += size
        return arr

    def unpack(self, st: struct.Struct):
        if self.pos + st.size > len(self.buf):
            raise FormatError("index file is truncated")
        out = st.unpack_from(self.buf, self.pos)
        self.pos += st.size
        return out


def load_index(path, corpus: VectorSet) -> EnsembleIndex:
    """Load an index saved by :func:`save_index`; ``corpus`` must be the one it was built on."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + 4:
        raise FormatError("index file is truncated")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    magic, version, mode, ttype, _, T, k, d, m, digest = _HEADER.unpack_from(body, 0)
    if magic != MAGIC:
        raise FormatError("not an index file (bad magic)")
    if version != VERSION:
        raise FormatError(f"unsupported index version {version}")
    if zlib.crc32(body) != crc:
        raise FormatError("index checksum mismatch")
    if mode >= len(MODES) or ttype >= len(TREE_TYPES):
        raise FormatError("bad mode or tree type in header")
    if (corpus.n, corpus.d) != (m, d) or corpus.digest().encode("ascii") != digest:
        raise UsageError("corpus does not match the one the index was built on")

    r = _Reader(body)
    r.pos = _HEADER.size
    trees = []
    for _ in range(T):
        tree_id, root, n_nodes, n_leaves, n_dirs = r.unpack(_TREE_HEADER)
        i64 = lambda a: a.astype(np.int64)
        axis = i64(r.take("<i4", n_nodes))
        dir_id = i64(r.take("<i4", n_nodes))
        threshold = r.take("<f8", n_nodes).astype(np.float64)
        left = i64(r.take("<i4", n_nodes))
        right = i64(r.take("<i4", n_nodes))
        directions = r.take("<f8", n_dirs * d).astype(np.float64).reshape(n_dirs, d)
        leaf_depth = i64(r.take("<i4", n_leaves))
        leaf_n = i64(r.take("<u4", n_leaves))
        sizes = i64(r.take("<u4", n_leaves))
        total = int(sizes.sum())
        deltas = i64(r.take("<u4", total))
        counts = i64(r.take("<u4", total))
        ptr = np.zeros(n_leaves + 1, dtype=np.int64)
        np.cumsum(sizes, out=ptr[1:])
        leaf_of_entry = np.repeat(np.arange(n_leaves), sizes)
        # undo the per-leaf delta encoding with a segmented cumulative sum
        csum = np.cumsum(deltas)
        base = np.concatenate(([0], csum))[ptr[:-1]]
        labels = csum - base[leaf_of_entry] if total else deltas
        tables = LeafTables(leaf_n, ptr, labels.astype(np.int64), counts)
        tree = PartitionTree(d=d, root=int(root), axis=axis, dir_id=dir_id,
                             directions=directions, threshold=threshold, left=left, right=right,
                             leaf_depth=leaf_depth, tree_type=TREE_TYPES[ttype],
                             tree_id=int(tree_id), tables=tables)
        trees.append(tree)
    if r.pos != len(body):
        raise FormatError("trailing bytes in index file")
    return EnsembleIndex(tuple(trees), corpus, k=k, mode=MODES[mode])
