"""Product and uniform quantization of feature matrices.

``ProductQuantizer`` splits each vector into ``d_sub``-sized chunks and
replaces every chunk by the index of its nearest codeword (one byte for
k <= 256).  Linear models score PQ codes directly through per-chunk lookup
tables.  ``UniformQuantizer`` bins each dimension independently into
``n_bins`` equal-width (or quantile) bins of ``log2(n_bins)`` bits.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .core import FeatureMatrix, ScoreList
from .encoders import KMeansCodebook
from .exceptions import ConfigError, DataError, IndexFormatError

INDEX_MAGIC = b"CBVRIDX1"
INDEX_VERSION = 1
CODEC_PQ = 1
CODEC_UQ = 2
UQ_BINS = (2, 4, 16, 256)
_HEADER = struct.Struct("<8sHBIIIIII")


def _as_matrix(X):
    if isinstance(X, FeatureMatrix):
        return X.values.astype(np.float64), X.video_ids
    return check_array(X, dtype=np.float64), None


class ProductQuantizer(TransformerMixin, BaseEstimator):
    """PQ codec.  ``transform`` returns the uint8 code matrix.

    Parameters
    ----------
    d_sub : int
        Dimensions per chunk (8 floats -> 1 byte gives 32x compression).
    n_codewords : int
        Codewords per chunk, at most 256.
    pad : bool
        Zero-pad ``d`` up to a multiple of ``d_sub`` instead of failing.
    max_train_rows : int
        Codebooks are trained on a seeded subsample of at most this size.
    """

    def __init__(self, d_sub=8, n_codewords=256, pad=False, max_train_rows=100_000,
                 max_iter=25, random_state=0):
        self.d_sub = d_sub
        self.n_codewords = n_codewords
        self.pad = pad
        self.max_train_rows = max_train_rows
        self.max_iter = max_iter
        self.random_state = random_state

    def _padded(self, X):
        if X.shape[1] != self.d_:
            raise DataError(f"expected dimension {self.d_}, got {X.shape[1]}")
        if self.pad_dims_:
            X = np.hstack([X, np.zeros((X.shape[0], self.pad_dims_))])
        return X

    def fit(self, X, y=None):
        X, _ = _as_matrix(X)
        d_sub, k = int(self.d_sub), int(self.n_codewords)
        if not 1 <= k <= 256:
            raise ConfigError("n_codewords must be in [1, 256] so a code fits in one byte")
        n, d = X.shape
        pad_dims = (-d) % d_sub
        if pad_dims and not self.pad:
            raise DataError(
                f"dimension {d} is not divisible by d_sub={d_sub}: pad or choose divisor"
            )
        if n < k:
            raise DataError(f"need at least {k} rows to train {k} codewords, got {n}")
        self.d_ = d
        self.pad_dims_ = pad_dims
        Xp = self._padded(X)
        rng = np.random.default_rng(self.random_state)
        if n > self.max_train_rows:
            Xp = Xp[np.sort(rng.choice(n, self.max_train_rows, replace=False))]
        m = Xp.shape[1] // d_sub
        seeds = rng.integers(0, 2**31 - 1, size=m)
        centroids = np.empty((m, k, d_sub), dtype=np.float32)
        for s in range(m):
            block = Xp[:, s * d_sub:(s + 1) * d_sub]
            km = KMeansCodebook(k, max_iter=self.max_iter, random_state=int(seeds[s])).fit(block)
            centroids[s] = km.cluster_centers_
        self.centroids_ = centroids
        return self

    @property
    def n_subblocks(self) -> int:
        check_is_fitted(self, "centroids_")
        return self.centroids_.shape[0]

    def encode(self, X) -> np.ndarray:
        """Nearest codeword per chunk, ties to the lowest index."""
        check_is_fitted(self, "centroids_")
        X, _ = _as_matrix(X)
        X = self._padded(X)
        m, k, d_sub = self.centroids_.shape
        codes = np.empty((X.shape[0], m), dtype=np.uint8)
        cents = self.centroids_.astype(np.float64)
        step = max(1, 4_000_000 // max(1, k * d_sub))
        for s in range(m):
            block = X[:, s * d_sub:(s + 1) * d_sub]
            for start in range(0, X.shape[0], step):
                diff = block[start:start + step, None, :] - cents[s][None, :, :]
                codes[start:start + step, s] = np.argmin((diff * diff).sum(-1), axis=1)
        return codes

    transform = encode

    def decode(self, codes) -> np.ndarray:
        check_is_fitted(self, "centroids_")
        codes = np.asarray(codes)
        m, k, d_sub = self.centroids_.shape
        if codes.ndim != 2 or codes.shape[1] != m:
            raise DataError(f"expected codes with {m} columns")
        if codes.size and int(codes.max()) >= k:
            raise DataError("corrupt index: code exceeds codebook size")
        out = self.centroids_[np.arange(m)[None, :], codes.astype(np.intp)]
        return out.reshape(codes.shape[0], m * d_sub)[:, :self.d_]

    def inverse_transform(self, codes):
        return self.decode(codes)

    def lookup_table(self, w) -> np.ndarray:
        """LUT[s, c] = <w_s, centroid_{s,c}> with ``w`` zero-padded like the data."""
        w = np.asarray(w, dtype=np.float64).reshape(-1)
        if w.shape[0] != self.d_:
            raise DataError(f"weight dimension {w.shape[0]} does not match {self.d_}")
        m, _, d_sub = self.centroids_.shape
        wp = np.concatenate([w, np.zeros(self.pad_dims_)]).reshape(m, d_sub)
        return np.einsum("skd,sd->sk", self.centroids_.astype(np.float64), wp)

    def dot_scores(self, w, b, codes) -> np.ndarray:
        lut = self.lookup_table(w)
        codes = np.asarray(codes, dtype=np.intp)
        if codes.size and codes.max() >= lut.shape[1]:
            raise DataError("corrupt index: code exceeds codebook size")
        return b + lut[np.arange(lut.shape[0])[None, :], codes].sum(axis=1)

    def compression_ratio(self, input_bits=32) -> float:
        check_is_fitted(self, "centroids_")
        code_bits = int(np.ceil(np.log2(max(2, self.centroids_.shape[1]))))
        return self.d_ * input_bits / (self.n_subblocks * code_bits)


class UniformQuantizer(TransformerMixin, BaseEstimator):
    """Per-dimension scalar quantizer with ``n_bins`` bins.

    ``mode="minmax"`` uses equal-width bins over the observed range,
    ``mode="quantile"`` uses empirical quantiles as edges.  Values at or
    above the top edge fall in the top bin; decode returns bin centers.
    """

    def __init__(self, n_bins=2, mode="minmax"):
        self.n_bins = n_bins
        self.mode = mode

    def fit(self, X, y=None):
        X, _ = _as_matrix(X)
        k = int(self.n_bins)
        if k not in UQ_BINS:
            raise ConfigError(f"n_bins must be one of {UQ_BINS}")
        if self.mode == "minmax":
            lo, hi = X.min(axis=0), X.max(axis=0)
            edges = lo[:, None] + (hi - lo)[:, None] * (np.arange(k + 1) / k)[None, :]
            edges[:, -1] = hi
        elif self.mode == "quantile":
            edges = np.quantile(X, np.arange(k + 1) / k, axis=0).T
        else:
            raise ConfigError(f"unknown UQ mode {self.mode!r}")
        self.edges_ = np.ascontiguousarray(edges, dtype=np.float32)
        self.d_ = X.shape[1]
        return self

    @property
    def bits(self) -> int:
        return int(np.log2(self.edges_.shape[1] - 1))

    @property
    def lo_(self):
        return self.edges_[:, 0]

    @property
    def hi_(self):
        return self.edges_[:, -1]

    def encode(self, X) -> np.ndarray:
        check_is_fitted(self, "edges_")
        X, _ = _as_matrix(X)
        if X.shape[1] != self.d_:
            raise DataError(f"expected dimension {self.d_}, got {X.shape[1]}")
        edges = self.edges_.astype(np.float64)
        k = edges.shape[1] - 1
        codes = np.zeros(X.shape, dtype=np.uint8)
        for j in range(self.d_):
            if edges[j, 0] == edges[j, -1]:
                continue
            codes[:, j] = np.clip(np.searchsorted(edges[j, 1:-1], X[:, j], side="right"), 0, k - 1)
        return codes

    transform = encode

    def decode(self, codes) -> np.ndarray:
        check_is_fitted(self, "edges_")
        codes = np.asarray(codes)
        k = self.edges_.shape[1] - 1
        if codes.size and int(codes.max()) >= k:
            raise DataError("corrupt index: code exceeds bin count")
        edges = self.edges_.astype(np.float64)
        centers = 0.5 * (edges[:, :-1] + edges[:, 1:])
        flat = edges[:, 0] == edges[:, -1]
        centers[flat] = edges[flat, :1]
        return centers[np.arange(self.d_)[None, :], codes.astype(np.intp)]

    def inverse_transform(self, codes):
        return self.decode(codes)

    def dot_scores(self, w, b, codes) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64).reshape(-1)
        if w.shape[0] != self.d_:
            raise DataError(f"weight dimension {w.shape[0]} does not match {self.d_}")
        return self.decode(codes) @ w + b

    def compression_ratio(self, input_bits=32) -> float:
        return input_bits / self.bits


def pq_train(X, d_sub=8, k=256, seed=0, pad=False) -> ProductQuantizer:
    return ProductQuantizer(d_sub=d_sub, n_codewords=k, pad=pad, random_state=seed).fit(X)


def uq_train(X, k_uq=2, mode="minmax") -> UniformQuantizer:
    return UniformQuantizer(n_bins=k_uq, mode=mode).fit(X)


@dataclass(frozen=True, eq=False)
class CompressedIndex:
    """Quantizer plus per-video codes: the on-disk searchable unit."""

    quantizer: ProductQuantizer | UniformQuantizer
    codes: np.ndarray
    video_ids: tuple[str, ...]
    feature_name: str = "feature"

    def __post_init__(self):
        object.__setattr__(self, "video_ids", tuple(self.video_ids))
        if self.codes.shape[0] != len(self.video_ids):
            raise DataError("code rows do not match video ids")

    @classmethod
    def build(cls, quantizer, features: FeatureMatrix) -> "CompressedIndex":
        return cls(quantizer, quantizer.encode(features), features.video_ids, features.feature_name)

    @property
    def codec(self) -> int:
        return CODEC_PQ if isinstance(self.quantizer, ProductQuantizer) else CODEC_UQ

    def subset(self, video_ids) -> "CompressedIndex":
        lookup = {v: i for i, v in enumerate(self.video_ids)}
        missing = [v for v in video_ids if v not in lookup]
        if missing:
            raise DataError(f"video {missing[0]!r} is not in index {self.feature_name!r}")
        rows = [lookup[v] for v in video_ids]
        return CompressedIndex(self.quantizer, self.codes[rows], tuple(video_ids), self.feature_name)

    def decode(self, kind="dense") -> FeatureMatrix:
        return FeatureMatrix(self.feature_name, self.video_ids, self.quantizer.decode(self.codes), kind)

    def dot_scores(self, w, b, event_id="event", source=None) -> ScoreList:
        scores = self.quantizer.dot_scores(w, b, self.codes)
        return ScoreList(event_id, source or self.feature_name, self.video_ids, scores)


def pq_dot_scores(w, b, cb: ProductQuantizer, codes, video_ids=None, event_id="event") -> ScoreList:
    """Score PQ codes with a linear model via per-chunk lookup tables."""
    scores = cb.dot_scores(w, b, codes)
    if video_ids is None:
        video_ids = tuple(f"v{i}" for i in range(len(scores)))
    return ScoreList(event_id, "pq", tuple(video_ids), scores)


# --------------------------------------------------------------------------
# persisted index


def _pack_bits(codes: np.ndarray, bits: int) -> bytes:
    if bits == 8:
        return np.ascontiguousarray(codes, dtype=np.uint8).tobytes()
    flat = codes.reshape(-1).astype(np.uint8)
    per = 8 // bits
    flat = np.concatenate([flat, np.zeros((-len(flat)) % per, dtype=np.uint8)])
    groups = flat.reshape(-1, per)
    shifts = (np.arange(per) * bits).astype(np.uint8)
    return np.bitwise_or.reduce(groups << shifts, axis=1).astype(np.uint8).tobytes()


def _unpack_bits(raw: bytes, count: int, bits: int) -> np.ndarray:
    data = np.frombuffer(raw, dtype=np.uint8)
    if bits == 8:
        return data[:count].copy()
    per = 8 // bits
    shifts = (np.arange(per) * bits).astype(np.uint8)
    mask = np.uint8((1 << bits) - 1)
    return ((data[:, None] >> shifts) & mask).reshape(-1)[:count]


def index_bytes(index: CompressedIndex) -> bytes:
    q = index.quantizer
    n = len(index.video_ids)
    if index.codec == CODEC_PQ:
        m, k, d_sub = q.centroids_.shape
        d, pad_dims = q.d_, q.pad_dims_
        book = np.ascontiguousarray(q.centroids_, dtype="<f4").tobytes()
        codes = np.ascontiguousarray(index.codes, dtype=np.uint8).tobytes()
    else:
        d = m = q.d_
        d_sub, pad_dims = 1, 0
        k = q.edges_.shape[1] - 1
        book = np.ascontiguousarray(q.edges_, dtype="<f4").tobytes()
        codes = _pack_bits(index.codes, q.bits)
    ids = [v.encode("utf-8") for v in index.video_ids]
    id_table = struct.pack("<I", n) + b"".join(struct.pack("<H", len(v)) + v for v in ids)
    header = _HEADER.pack(INDEX_MAGIC, INDEX_VERSION, index.codec, n, d, m, d_sub, k, pad_dims)
    return header + book + codes + id_table


def index_write(path, index: CompressedIndex) -> None:
    """Write atomically through a temp file in the destination directory."""
    path = Path(path)
    data = index_bytes(index)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def index_from_bytes(data: bytes, feature_name="feature") -> CompressedIndex:
    if len(data) < len(INDEX_MAGIC) or not data.startswith(INDEX_MAGIC):
        raise IndexFormatError("bad magic: not a CBVR index", "bad-magic")
    if len(data) < _HEADER.size:
        raise IndexFormatError("truncated index", "truncated")
    _, version, codec, n, d, m, d_sub, k, pad_dims = _HEADER.unpack_from(data)
    if version != INDEX_VERSION:
        raise IndexFormatError(f"unsupported index version {version}", "bad-version")
    pos = _HEADER.size

    def take(size):
        nonlocal pos
        if pos + size > len(data):
            raise IndexFormatError("truncated index", "truncated")
        chunk = data[pos:pos + size]
        pos += size
        return chunk

    if codec == CODEC_PQ:
        if m * d_sub != d + pad_dims or not 1 <= k <= 256:
            raise IndexFormatError("inconsistent PQ header", "corrupt")
        q = ProductQuantizer(d_sub=d_sub, n_codewords=k, pad=bool(pad_dims))
        q.centroids_ = np.frombuffer(take(4 * m * k * d_sub), dtype="<f4").reshape(m, k, d_sub).astype(np.float32)
        q.d_, q.pad_dims_ = d, pad_dims
        codes = np.frombuffer(take(n * m), dtype=np.uint8).reshape(n, m).copy()
    elif codec == CODEC_UQ:
        if k not in UQ_BINS or m != d:
            raise IndexFormatError("inconsistent UQ header", "corrupt")
        q = UniformQuantizer(n_bins=k)
        q.edges_ = np.frombuffer(take(4 * d * (k + 1)), dtype="<f4").reshape(d, k + 1).astype(np.float32)
        q.d_ = d
        bits = int(np.log2(k))
        codes = _unpack_bits(take((n * d * bits + 7) // 8), n * d, bits).reshape(n, d)
    else:
        raise IndexFormatError(f"unknown codec {codec}", "bad-codec")
    (count,) = struct.unpack("<I", take(4))
    if count != n:
        raise IndexFormatError("id table size does not match header", "corrupt")
    ids = []
    for _ in range(count):
        (length,) = struct.unpack("<H", take(2))
        ids.append(take(length).decode("utf-8"))
    if pos != len(data):
        raise IndexFormatError("trailing bytes after id table", "corrupt")
    if codes.size and int(codes.max()) >= k:
        raise IndexFormatError("corrupt index: code exceeds codebook size", "corrupt")
    return CompressedIndex(q, codes, tuple(ids), feature_name)


def index_read(path) -> CompressedIndex:
    path = Path(path)
    return index_from_bytes(path.read_bytes(), feature_name=path.stem)
