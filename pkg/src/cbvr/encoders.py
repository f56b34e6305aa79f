"""Local-descriptor encoders.

Variable-size descriptor sets are turned into fixed-length vectors.  The
learnable pieces (k-means codebooks, diagonal GMMs, PCA) follow the
scikit-learn estimator protocol so they drop into ``Pipeline`` objects; the
encoders themselves are plain functions plus thin estimator wrappers that
learn their vocabulary from a list of :class:`DescriptorSet`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ConfigError, DataError, IndexFormatError

DESCRIPTOR_MAGIC = b"CBVR-DSC1"
DEFAULT_PYRAMID = ((1, 1, 1), (2, 2, 1))
POST_NORMALIZATIONS = ("power+l2", "l2", "l1", "none")


@dataclass(frozen=True, eq=False)
class DescriptorSet:
    """Local descriptors of one video with (x, y, t) coordinates in [0, 1]."""

    descriptors: np.ndarray
    coords: np.ndarray
    video_id: str = ""

    def __post_init__(self):
        desc = np.asarray(self.descriptors, dtype=np.float64)
        if desc.ndim == 1:
            desc = desc.reshape(0, -1) if desc.size == 0 else desc.reshape(1, -1)
        coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        if desc.shape[0] != coords.shape[0]:
            raise DataError(f"{desc.shape[0]} descriptors but {coords.shape[0]} coordinates")
        if not (np.all(np.isfinite(desc)) and np.all(np.isfinite(coords))):
            raise DataError("descriptor set contains NaN/Inf")
        if coords.size and (coords.min() < 0.0 or coords.max() > 1.0):
            raise DataError("coordinates must lie in [0, 1]")
        object.__setattr__(self, "descriptors", desc)
        object.__setattr__(self, "coords", coords)

    @property
    def m(self) -> int:
        return self.descriptors.shape[0]

    @property
    def d(self) -> int:
        return self.descriptors.shape[1]


@dataclass(frozen=True)
class MifsConfig:
    skip_levels: tuple[int, ...] = (0, 2, 5)

    def __post_init__(self):
        levels = tuple(int(v) for v in self.skip_levels)
        if any(v < 0 for v in levels) or len(set(levels)) != len(levels):
            raise ConfigError("skip levels must be distinct non-negative integers")
        if list(levels) != sorted(levels):
            raise ConfigError("skip levels must be sorted")
        object.__setattr__(self, "skip_levels", levels)


def _sq_dists(X, C):
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    np.maximum(d, 0.0, out=d)
    return d


def nearest_centroid(X, C):
    """Index of the nearest centroid per row; ties go to the lowest index."""
    return np.argmin(_sq_dists(np.asarray(X, np.float64), np.asarray(C, np.float64)), axis=1)


# --------------------------------------------------------------------------
# k-means


class KMeansCodebook(TransformerMixin, BaseEstimator):
    """Lloyd k-means with D^2 (k-means++) seeding.

    Empty clusters are reseeded with the point farthest from its centroid.
    ``objective_history_`` records the sum of squared distances after every
    assignment step and is non-increasing.
    """

    def __init__(self, n_clusters=8, max_iter=100, random_state=0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.random_state = random_state

    def _seed(self, X, rng):
        n = X.shape[0]
        k = self.n_clusters
        centers = np.empty((k, X.shape[1]))
        centers[0] = X[rng.integers(n)]
        closest = ((X - centers[0]) ** 2).sum(1)
        for j in range(1, k):
            total = closest.sum()
            if total <= 0.0:
                idx = rng.integers(n)
            else:
                idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
                idx = min(idx, n - 1)
            centers[j] = X[idx]
            np.minimum(closest, ((X - centers[j]) ** 2).sum(1), out=closest)
        return centers

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        k = int(self.n_clusters)
        if k < 1:
            raise ConfigError("n_clusters must be >= 1")
        if X.shape[0] < k:
            raise DataError(f"need at least {k} rows to fit {k} centroids, got {X.shape[0]}")
        rng = np.random.default_rng(self.random_state)
        centers = self._seed(X, rng)
        history = []
        labels = None
        for it in range(max(1, int(self.max_iter))):
            dist = _sq_dists(X, centers)
            new_labels = np.argmin(dist, axis=1)
            history.append(float(dist[np.arange(X.shape[0]), new_labels].sum()))
            if labels is not None and np.array_equal(new_labels, labels):
                break
            labels = new_labels
            counts = np.bincount(labels, minlength=k)
            sums = np.zeros_like(centers)
            np.add.at(sums, labels, X)
            filled = counts > 0
            centers[filled] = sums[filled] / counts[filled, None]
            for j in np.flatnonzero(~filled):
                own = ((X - centers[labels]) ** 2).sum(1)
                far = int(np.argmax(own))
                centers[j] = X[far]
                labels[far] = j
        self.cluster_centers_ = centers
        self.labels_ = nearest_centroid(X, centers)
        self.inertia_ = float(((X - centers[self.labels_]) ** 2).sum())
        self.objective_history_ = history
        self.n_iter_ = len(history)
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        return nearest_centroid(check_array(X, dtype=np.float64), self.cluster_centers_)

    def transform(self, X):
        check_is_fitted(self, "cluster_centers_")
        return np.sqrt(_sq_dists(check_array(X, dtype=np.float64), self.cluster_centers_))


def kmeans_fit(X, k, seed=0, max_iter=100) -> KMeansCodebook:
    return KMeansCodebook(n_clusters=k, max_iter=max_iter, random_state=seed).fit(X)


# --------------------------------------------------------------------------
# diagonal GMM


class DiagonalGMM(BaseEstimator):
    """Diagonal-covariance Gaussian mixture trained by EM from a k-means start.

    Variances are floored at ``var_floor`` times the mean per-dimension
    variance of the training data.
    """

    def __init__(self, n_components=8, max_iter=100, var_floor=1e-4, tol=1e-10, random_state=0):
        self.n_components = n_components
        self.max_iter = max_iter
        self.var_floor = var_floor
        self.tol = tol
        self.random_state = random_state

    def _log_joint(self, X):
        var = self.variances_
        log_det = np.log(var).sum(1)
        maha = (
            (X * X) @ (1.0 / var).T
            - 2.0 * X @ (self.means_ / var).T
            + ((self.means_ ** 2) / var).sum(1)
        )
        d = X.shape[1]
        return np.log(self.weights_) - 0.5 * (d * np.log(2 * np.pi) + log_det + maha)

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        K = int(self.n_components)
        if X.shape[0] < K:
            raise DataError(f"need at least {K} rows to fit {K} components, got {X.shape[0]}")
        floor = self.var_floor * max(float(X.var(axis=0).mean()), np.finfo(float).tiny)
        km = KMeansCodebook(K, max_iter=self.max_iter, random_state=self.random_state).fit(X)
        labels = km.labels_
        self.means_ = km.cluster_centers_.copy()
        self.variances_ = np.empty_like(self.means_)
        counts = np.bincount(labels, minlength=K).astype(float)
        for k in range(K):
            members = X[labels == k]
            self.variances_[k] = members.var(axis=0) if len(members) else X.var(axis=0)
        np.maximum(self.variances_, floor, out=self.variances_)
        self.weights_ = np.maximum(counts, 1e-12) / max(counts.sum(), 1e-12)
        self.weights_ /= self.weights_.sum()
        self.var_floor_value_ = floor

        history = []
        for _ in range(max(1, int(self.max_iter))):
            log_joint = self._log_joint(X)
            log_norm = logsumexp(log_joint, axis=1)
            history.append(float(log_norm.sum()))
            if len(history) > 1 and history[-1] - history[-2] < self.tol * max(1.0, abs(history[-2])):
                break
            resp = np.exp(log_joint - log_norm[:, None])
            nk = resp.sum(0)
            live = nk > 1e-12
            means = self.means_.copy()
            means[live] = (resp.T @ X)[live] / nk[live, None]
            var = self.variances_.copy()
            second = resp.T @ (X * X)
            var[live] = second[live] / nk[live, None] - means[live] ** 2
            np.maximum(var, floor, out=var)
            self.means_, self.variances_ = means, var
            w = np.maximum(nk, 1e-12)
            self.weights_ = w / w.sum()
        self.log_likelihood_history_ = history
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "means_")
        X = check_array(X, dtype=np.float64, ensure_min_samples=0)
        log_joint = self._log_joint(X)
        return np.exp(log_joint - logsumexp(log_joint, axis=1)[:, None])

    def score_samples(self, X):
        check_is_fitted(self, "means_")
        return logsumexp(self._log_joint(check_array(X, dtype=np.float64)), axis=1)


def gmm_fit(X, K, seed=0, max_iter=100, var_floor=1e-4) -> DiagonalGMM:
    return DiagonalGMM(K, max_iter=max_iter, var_floor=var_floor, random_state=seed).fit(X)


# --------------------------------------------------------------------------
# PCA / STED / MIFS


class PCAProjector(TransformerMixin, BaseEstimator):
    """PCA via SVD of the centered data; component signs fixed for determinism."""

    def __init__(self, n_components=2):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        p = int(self.n_components)
        if p > X.shape[1]:
            raise ConfigError(f"target dimension {p} exceeds input dimension {X.shape[1]}")
        self.mean_ = X.mean(axis=0)
        _, s, vt = np.linalg.svd(X - self.mean_, full_matrices=False)
        flip = np.sign(vt[np.arange(vt.shape[0]), np.argmax(np.abs(vt), axis=1)])
        flip[flip == 0] = 1.0
        vt *= flip[:, None]
        if vt.shape[0] < p:
            # fewer samples than dimensions: complete the basis
            q, _ = np.linalg.qr(np.vstack([vt, np.eye(X.shape[1])]).T)
            vt = np.vstack([vt, q.T[vt.shape[0]:p]])
            s = np.concatenate([s, np.zeros(p - s.shape[0])])
        self.components_ = vt[:p]
        self.singular_values_ = s[:p]
        total = float((s ** 2).sum())
        self.explained_variance_ratio_ = (s[:p] ** 2) / total if total > 0 else np.zeros(p)
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float64, ensure_min_samples=0)
        return (X - self.mean_) @ self.components_.T

    def inverse_transform(self, Z):
        return np.asarray(Z) @ self.components_ + self.mean_


def pca_fit(X, p) -> PCAProjector:
    return PCAProjector(p).fit(X)


def pca_project(model: PCAProjector, X) -> np.ndarray:
    return model.transform(X)


def sted_augment(projected, coords) -> np.ndarray:
    """Append the (x, y, t) location of each descriptor to its projection."""
    projected = np.asarray(projected, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    if projected.shape[0] != coords.shape[0]:
        raise DataError("row counts of projections and coordinates differ")
    if coords.size and (coords.min() < 0.0 or coords.max() > 1.0):
        raise DataError("coordinates must lie in [0, 1]")
    return np.hstack([projected.reshape(coords.shape[0], -1), coords])


def mifs_pool(sets: Sequence[DescriptorSet], config: MifsConfig = MifsConfig()) -> DescriptorSet:
    """Pool descriptor sets extracted at each frame-skip level of one video."""
    if len(sets) != len(config.skip_levels):
        raise DataError(
            f"expected {len(config.skip_levels)} descriptor sets (levels "
            f"{list(config.skip_levels)}), got {len(sets)}"
        )
    dims = {s.d for s in sets}
    if len(dims) != 1:
        raise DataError(f"descriptor dimensions differ across skip levels: {sorted(dims)}")
    return DescriptorSet(
        np.vstack([s.descriptors for s in sets]),
        np.vstack([s.coords for s in sets]),
        sets[0].video_id,
    )


# --------------------------------------------------------------------------
# encodings


def _check_dim(ds: DescriptorSet, d: int):
    if ds.m and ds.d != d:
        raise DataError(f"descriptor dimension {ds.d} does not match model dimension {d}")


def pyramid_cells(pyramid) -> int:
    return sum(int(gx) * int(gy) * int(gt) for gx, gy, gt in pyramid)


def bow_encode(ds: DescriptorSet, codebook, pyramid=DEFAULT_PYRAMID) -> np.ndarray:
    """Spatial-pyramid BoW histogram.

    Cell ``(ix, iy, it)`` of a ``gx x gy x gt`` grid occupies the slot
    ``(ix * gy + iy) * gt + it``; each pyramid level is L1-normalized.
    """
    centers = getattr(codebook, "cluster_centers_", codebook)
    centers = np.asarray(centers, dtype=np.float64)
    k = centers.shape[0]
    out = np.zeros(k * pyramid_cells(pyramid))
    _check_dim(ds, centers.shape[1])
    if ds.m == 0:
        return out
    words = nearest_centroid(ds.descriptors, centers)
    offset = 0
    for gx, gy, gt in pyramid:
        grid = np.array([gx, gy, gt])
        cell = np.minimum((ds.coords * grid).astype(np.int64), grid - 1)
        slot = (cell[:, 0] * gy + cell[:, 1]) * gt + cell[:, 2]
        n_bins = k * gx * gy * gt
        hist = np.bincount(slot * k + words, minlength=n_bins).astype(np.float64)
        out[offset:offset + n_bins] = hist / hist.sum()
        offset += n_bins
    return out


def vlad_encode(ds: DescriptorSet, codebook) -> np.ndarray:
    centers = np.asarray(getattr(codebook, "cluster_centers_", codebook), dtype=np.float64)
    k, d = centers.shape
    _check_dim(ds, d)
    out = np.zeros((k, d))
    if ds.m == 0:
        return out.ravel()
    words = nearest_centroid(ds.descriptors, centers)
    np.add.at(out, words, ds.descriptors - centers[words])
    norms = np.linalg.norm(out, axis=1)
    nz = norms > 0
    out[nz] /= norms[nz, None]
    out = out.ravel()
    total = np.linalg.norm(out)
    return out / total if total > 0 else out


def fisher_vector_blocks(ds: DescriptorSet, gmm: DiagonalGMM):
    """Unnormalized Fisher vector gradient blocks (mean block, variance block).

    mean:     (1 / (m sqrt(w_k)))  * sum_n g_nk (x_n - mu_k) / sigma_k
    variance: (1 / (m sqrt(2 w_k))) * sum_n g_nk ((x_n - mu_k)^2 / sigma_k^2 - 1)
    """
    K, d = gmm.means_.shape
    _check_dim(ds, d)
    if ds.m == 0:
        return np.zeros((K, d)), np.zeros((K, d))
    X = ds.descriptors
    resp = gmm.predict_proba(X)
    sigma = np.sqrt(gmm.variances_)
    w = gmm.weights_
    m = X.shape[0]
    s0 = resp.sum(0)
    s1 = resp.T @ X
    s2 = resp.T @ (X * X)
    mu = gmm.means_
    g_mu = (s1 - s0[:, None] * mu) / sigma / (m * np.sqrt(w)[:, None])
    g_var = (s2 - 2 * mu * s1 + s0[:, None] * mu ** 2) / gmm.variances_ - s0[:, None]
    g_var /= m * np.sqrt(2.0 * w)[:, None]
    return g_mu, g_var


def fv_encode(ds: DescriptorSet, gmm: DiagonalGMM, normalization="power+l2") -> np.ndarray:
    g_mu, g_var = fisher_vector_blocks(ds, gmm)
    return post_normalize(np.concatenate([g_mu.ravel(), g_var.ravel()]), normalization)


def post_normalize(v, scheme="power+l2") -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if scheme == "none":
        return v.copy()
    if scheme == "power+l2":
        v = np.sign(v) * np.sqrt(np.abs(v))
        scheme = "l2"
    if scheme == "l2":
        norm = np.linalg.norm(v)
    elif scheme == "l1":
        norm = np.abs(v).sum()
    else:
        raise ConfigError(f"unknown post-normalization {scheme!r}")
    return v / norm if norm > 0 else v.copy()


# --------------------------------------------------------------------------
# estimator wrappers over descriptor sets


def _stack(sets):
    mats = [s.descriptors for s in sets if s.m]
    if not mats:
        raise DataError("no descriptors to fit on")
    return np.vstack(mats)


class _SetEncoder(TransformerMixin, BaseEstimator):
    """Shared plumbing: optional PCA (+STED) before the vocabulary model."""

    def _prepare(self, ds: DescriptorSet) -> DescriptorSet:
        desc = ds.descriptors
        if self.pca_dim is not None:
            desc = self.pca_.transform(desc) if ds.m else np.zeros((0, self.pca_dim))
        if self.sted:
            desc = sted_augment(desc, ds.coords)
        return DescriptorSet(desc, ds.coords, ds.video_id)

    def _fit_projection(self, sets):
        if self.pca_dim is not None:
            self.pca_ = PCAProjector(self.pca_dim).fit(_stack(sets))
        return [self._prepare(s) for s in sets]

    def transform(self, sets):
        check_is_fitted(self, "model_")
        return np.vstack([self._encode(self._prepare(s)) for s in sets])


class BowEncoder(_SetEncoder):
    def __init__(self, n_words=64, pyramid=DEFAULT_PYRAMID, pca_dim=None, sted=False, random_state=0):
        self.n_words = n_words
        self.pyramid = pyramid
        self.pca_dim = pca_dim
        self.sted = sted
        self.random_state = random_state

    def fit(self, sets, y=None):
        sets = self._fit_projection(sets)
        self.model_ = kmeans_fit(_stack(sets), self.n_words, seed=self.random_state)
        return self

    def _encode(self, ds):
        return bow_encode(ds, self.model_, self.pyramid)


class VladEncoder(_SetEncoder):
    def __init__(self, n_words=64, pca_dim=None, sted=False, random_state=0):
        self.n_words = n_words
        self.pca_dim = pca_dim
        self.sted = sted
        self.random_state = random_state

    def fit(self, sets, y=None):
        sets = self._fit_projection(sets)
        self.model_ = kmeans_fit(_stack(sets), self.n_words, seed=self.random_state)
        return self

    def _encode(self, ds):
        return vlad_encode(ds, self.model_)


class FisherVectorEncoder(_SetEncoder):
    """PCA -> optional STED -> diagonal GMM -> power+L2 normalized FV."""

    def __init__(self, n_components=16, pca_dim=None, sted=False, var_floor=1e-4,
                 normalization="power+l2", random_state=0):
        self.n_components = n_components
        self.pca_dim = pca_dim
        self.sted = sted
        self.var_floor = var_floor
        self.normalization = normalization
        self.random_state = random_state

    def fit(self, sets, y=None):
        sets = self._fit_projection(sets)
        self.model_ = gmm_fit(_stack(sets), self.n_components, seed=self.random_state,
                              var_floor=self.var_floor)
        return self

    def _encode(self, ds):
        return fv_encode(ds, self.model_, self.normalization)


# --------------------------------------------------------------------------
# descriptor file format


def write_descriptor_set(path, ds: DescriptorSet) -> None:
    """``CBVR-DSC1`` | u32 m | u32 d | m*d f32 | m*3 f32 | u16 len | id bytes."""
    vid = ds.video_id.encode("utf-8")
    if len(vid) > 0xFFFF:
        raise DataError("video id too long")
    payload = b"".join([
        DESCRIPTOR_MAGIC,
        struct.pack("<II", ds.m, ds.d),
        np.ascontiguousarray(ds.descriptors, dtype="<f4").tobytes(),
        np.ascontiguousarray(ds.coords, dtype="<f4").tobytes(),
        struct.pack("<H", len(vid)),
        vid,
    ])
    Path(path).write_bytes(payload)


def read_descriptor_set(path) -> DescriptorSet:
    data = Path(path).read_bytes()
    if not data.startswith(DESCRIPTOR_MAGIC):
        raise IndexFormatError(f"{path}: not a descriptor file", "bad-magic")
    pos = len(DESCRIPTOR_MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise IndexFormatError(f"{path}: truncated descriptor file", "truncated")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    m, d = struct.unpack("<II", take(8))
    desc = np.frombuffer(take(4 * m * d), dtype="<f4").reshape(m, d)
    coords = np.frombuffer(take(4 * m * 3), dtype="<f4").reshape(m, 3)
    (n_id,) = struct.unpack("<H", take(2))
    vid = take(n_id).decode("utf-8")
    if pos != len(data):
        raise IndexFormatError(f"{path}: trailing bytes", "corrupt")
    return DescriptorSet(desc.astype(np.float64), coords.astype(np.float64), vid)
