"""Late fusion of per-source score lists.

:class:`MultistageHybridFusion` runs four stages on held-out scores:

1. normalize each row and append a rank-normalized companion row;
2. PCA-tree clustering of the rows; each leaf mean is an "essential" source
   that is appended to the original rows;
3. one weight vector per strategy (average, single-AP, leave-one-out,
   smoothed-AP gradient ascent);
4. the mean of the strategy weights fuses the test rows.

Rows that are exact duplicates after normalization are merged before any of
this, so feeding the same source twice never changes the fused ranking.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit
from numba import njit
from sklearn.base import BaseEstimator

from .core import (
    RankedList,
    ScoreList,
    ScoreMatrix,
    ap_of_score_rows,
    ap_of_scores,
    descending_order,
    normalize_array,
    to_ranked_list,
)
from .exceptions import ConfigError, DataError
from .learners import LAMBDA_GRID, ridge_solve, stratified_folds

STRATEGIES = ("average", "single_ap", "loo", "sgd_ap")


@dataclass(frozen=True)
class FusionWeights:
    weights: np.ndarray
    strategy: str

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w < 0):
            raise DataError("fusion weights must be nonnegative")
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class MhlfConfig:
    leaf_size: int = 4
    max_depth: int = 6
    strategies: tuple[str, ...] = STRATEGIES
    normalization: str = "rank"
    rank_augment: bool = True
    cluster: bool = True
    cluster_augmented: bool = True
    sgd_temperature: float = 10.0
    sgd_learning_rate: float = 0.05
    sgd_epochs: int = 200
    sgd_batch_positives: int = 32
    sgd_batch_negatives: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.leaf_size < 1:
            raise ConfigError("leaf_size must be >= 1")
        if self.max_depth < 0:
            raise ConfigError("max_depth must be >= 0")
        unknown = set(self.strategies) - set(STRATEGIES)
        if unknown or not self.strategies:
            raise ConfigError(f"unknown fusion strategies {sorted(unknown)}")
        object.__setattr__(self, "strategies", tuple(self.strategies))


def _rank_rows(values: np.ndarray) -> np.ndarray:
    order = descending_order(values)
    n = values.shape[1]
    out = np.empty_like(values, dtype=np.float64)
    ramp = 1.0 - np.arange(n) / (n - 1) if n > 1 else np.ones(1)
    np.put_along_axis(out, order, np.broadcast_to(ramp, values.shape), axis=1)
    return out


def normalize_rows(values: np.ndarray, method: str) -> np.ndarray:
    """Row-wise :func:`~cbvr.core.normalize_array` (columns in id order)."""
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if method == "rank":
        return _rank_rows(values)
    return np.vstack([normalize_array(r, method) for r in values])


def rank_augment(matrix: ScoreMatrix) -> ScoreMatrix:
    """Append a rank-normalized companion (``<name>:rank``) for every row."""
    names = matrix.row_names + tuple(f"{n}:rank" for n in matrix.row_names)
    return matrix.with_rows(names, np.vstack([matrix.values, _rank_rows(matrix.values)]))


# --------------------------------------------------------------------------
# PCA tree


def pca_tree_leaves(values: np.ndarray, leaf_size: int, max_depth: int) -> list[tuple[str, list[int]]]:
    """Split rows recursively at the median of their first-PC projection.

    Returns ``(path, member_row_indices)`` per leaf in depth-first order,
    left ("L": projection <= median) before right ("R").
    """
    values = np.asarray(values, dtype=np.float64)
    leaves = []

    def split(idx, depth, path):
        if len(idx) <= leaf_size or depth >= max_depth:
            leaves.append((path or "root", list(idx)))
            return
        sub = values[idx]
        centered = sub - sub.mean(0)
        # first principal direction in row space via the small Gram matrix
        gram = centered @ centered.T
        s, U = np.linalg.eigh(gram)
        if s[-1] <= 1e-12 * max(1.0, float(np.trace(gram))):
            leaves.append((path or "root", list(idx)))
            return
        proj = U[:, -1] * np.sqrt(s[-1])
        if proj[np.argmax(np.abs(proj))] < 0:
            proj = -proj
        med = np.median(proj)
        left = [i for i, p in zip(idx, proj) if p <= med]
        right = [i for i, p in zip(idx, proj) if p > med]
        if not left or not right:
            leaves.append((path or "root", list(idx)))
            return
        split(left, depth + 1, path + "L")
        split(right, depth + 1, path + "R")

    split(list(range(values.shape[0])), 0, "")
    return leaves


def pca_tree_cluster(matrix: ScoreMatrix, leaf_size=4, max_depth=6) -> ScoreMatrix:
    """Essential sources: one mean row per PCA-tree leaf."""
    if matrix.n_rows < 1:
        raise DataError("no rows to cluster")
    leaves = pca_tree_leaves(matrix.values, leaf_size, max_depth)
    values = np.vstack([matrix.values[members].mean(0) for _, members in leaves])
    names = tuple(f"essential:{path}" for path, _ in leaves)
    return matrix.with_rows(names, values)


# --------------------------------------------------------------------------
# strategies


def project_to_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {w >= 0, sum w = 1}."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.shape[0] + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1), 0.0)


def smoothed_ap(scores, labels, beta=10.0) -> float:
    """AP with rank indicators replaced by logistic(beta * gap / std(scores))."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    sd = scores.std()
    z = scores / sd if sd > 0 else scores
    pos_idx = np.flatnonzero(labels)
    sig = expit(beta * (z[None, :] - z[pos_idx][:, None]))
    sig[np.arange(pos_idx.shape[0]), pos_idx] = 0.0
    rank = 1.0 + sig.sum(1)
    pos_rank = 1.0 + sig[:, labels].sum(1)
    return float(np.mean(pos_rank / rank))


@njit(cache=True)
def _simplex(v):
    u = np.sort(v)[::-1]
    css = 0.0
    theta = 0.0
    for k in range(u.shape[0]):
        css += u[k]
        t = (css - 1.0) / (k + 1)
        if u[k] - t > 0:
            theta = t
    return np.maximum(v - theta, 0.0)


@njit(cache=True)
def _sgd_ap(M, cov, pos_batches, neg_batches, pos_scale, neg_scale, w, beta, lr):
    """Projected ascent on the smoothed AP of ``w @ M``.

    Score gaps are measured in units of the fused score's standard deviation
    (``sqrt(w' cov w)``), so the temperature does not depend on how much the
    weights shrink the spread.  Epoch ``e`` uses the positive columns
    ``pos_batches[e]`` and negative columns ``neg_batches[e]``; pair counts
    are scaled back to the full sets by ``pos_scale`` and ``neg_scale``.
    """
    R = M.shape[0]
    P = pos_batches.shape[1]
    B = neg_batches.shape[1]
    sp = np.empty(P)
    sb = np.empty(B)
    s_pp = np.empty((P, P))
    s_pb = np.empty((P, B))
    col_p = np.empty(P)
    col_b = np.empty(B)
    row = np.empty(P)
    for epoch in range(pos_batches.shape[0]):
        pb = pos_batches[epoch]
        nb = neg_batches[epoch]
        cw = cov @ w
        sd = np.sqrt(max(w @ cw, 1e-300))
        for i in range(P):
            acc = 0.0
            for r in range(R):
                acc += w[r] * M[r, pb[i]]
            sp[i] = acc / sd
        for j in range(B):
            acc = 0.0
            for r in range(R):
                acc += w[r] * M[r, nb[j]]
            sb[j] = acc / sd
        col_p[:] = 0.0
        col_b[:] = 0.0
        row[:] = 0.0
        gap_term = 0.0
        for i in range(P):
            pos_sum = 0.0
            neg_sum = 0.0
            for j in range(P):
                sg = 0.0 if j == i else 1.0 / (1.0 + np.exp(-beta * (sp[j] - sp[i])))
                s_pp[i, j] = sg
                pos_sum += sg
            for j in range(B):
                sg = 1.0 / (1.0 + np.exp(-beta * (sb[j] - sp[i])))
                s_pb[i, j] = sg
                neg_sum += sg
            pos_rank = 1.0 + pos_scale * pos_sum
            rank = pos_rank + neg_scale * neg_sum
            c_pp = pos_scale * (1.0 / rank - pos_rank / (rank * rank))
            c_pb = -neg_scale * pos_rank / (rank * rank)
            for j in range(P):
                sg = s_pp[i, j]
                g = beta * sg * (1.0 - sg) * c_pp
                col_p[j] += g
                row[i] += g
                gap_term += g * (sp[j] - sp[i])
            for j in range(B):
                sg = s_pb[i, j]
                g = beta * sg * (1.0 - sg) * c_pb
                col_b[j] += g
                row[i] += g
                gap_term += g * (sb[j] - sp[i])
        grad = np.zeros(R)
        for r in range(R):
            acc = 0.0
            for i in range(P):
                acc += M[r, pb[i]] * (col_p[i] - row[i])
            for j in range(B):
                acc += M[r, nb[j]] * col_b[j]
            # the std also moves with w: d sd / dw = cov w / sd
            grad[r] = (acc - gap_term * cw[r] / sd) / (sd * P)
        w = _simplex(w + lr * grad)
    return w


def _batches(rng, idx, size, epochs):
    if size >= idx.shape[0]:
        return np.tile(idx, (epochs, 1)), 1.0
    rows = [np.sort(rng.choice(idx, size, replace=False)) for _ in range(epochs)]
    return np.vstack(rows), idx.shape[0] / size


def sgd_ap_weights(values, labels, config: MhlfConfig = MhlfConfig()) -> np.ndarray:
    """Smoothed-AP weights; each epoch samples a minibatch of positives and negatives.

    The learning rate is taken relative to the uniform weight 1/R, so one
    step moves each weight by a comparable fraction whatever the row count.
    """
    values = np.ascontiguousarray(values, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    pos_idx = np.flatnonzero(labels)
    neg_idx = np.flatnonzero(~labels)
    rng = np.random.default_rng(config.seed)
    epochs = int(config.sgd_epochs)
    pos_b, _ = _batches(rng, pos_idx, config.sgd_batch_positives, epochs)
    neg_b, neg_scale = _batches(rng, neg_idx, config.sgd_batch_negatives, epochs)
    n_pb = pos_b.shape[1]
    # pairs among the positives: (P - 1) others sampled through (n_pb - 1)
    pos_scale = (pos_idx.shape[0] - 1) / (n_pb - 1) if n_pb > 1 else 0.0
    centered = values - values.mean(1, keepdims=True)
    cov = centered @ centered.T / values.shape[1]
    w0 = np.full(values.shape[0], 1.0 / values.shape[0])
    return _sgd_ap(values, cov, pos_b.astype(np.int64), neg_b.astype(np.int64).reshape(epochs, -1),
                   pos_scale, neg_scale, w0, float(config.sgd_temperature),
                   float(config.sgd_learning_rate) / values.shape[0])


def strategy_weights(matrix: ScoreMatrix | np.ndarray, labels, strategy: str,
                     config: MhlfConfig = MhlfConfig()) -> FusionWeights:
    values = matrix.values if isinstance(matrix, ScoreMatrix) else np.atleast_2d(matrix)
    labels = np.asarray(labels, dtype=bool)
    if not labels.any():
        raise DataError("no positives in held-out labels")
    R = values.shape[0]
    if strategy == "average":
        raw = np.ones(R)
    elif strategy == "single_ap":
        raw = ap_of_score_rows(values, labels)
    elif strategy == "loo":
        if R == 1:
            raw = np.ones(1)
        else:
            total = values.sum(0)
            ap_all = ap_of_scores(total / R, labels)
            without = (total[None, :] - values) / (R - 1)
            raw = np.maximum(0.0, ap_all - ap_of_score_rows(without, labels))
    elif strategy == "sgd_ap":
        raw = sgd_ap_weights(values, labels, config)
    else:
        raise ConfigError(f"unknown fusion strategy {strategy!r}")
    total = raw.sum()
    if total <= 0:
        warnings.warn(f"strategy {strategy}: all weights zero, falling back to uniform", stacklevel=2)
        raw, total = np.ones(R), float(R)
    return FusionWeights(raw / total, strategy)


# --------------------------------------------------------------------------
# estimators


def _dedupe(values: np.ndarray) -> list[int]:
    """Indices of the first occurrence of each distinct row."""
    seen = {}
    keep = []
    for i, row in enumerate(values):
        key = row.tobytes()
        if key not in seen:
            seen[key] = i
            keep.append(i)
    return keep


class MultistageHybridFusion(BaseEstimator):
    """Learn fusion weights on held-out scores and fuse test scores."""

    def __init__(self, leaf_size=4, max_depth=6, strategies=STRATEGIES, normalization="rank",
                 rank_augment=True, cluster=True, cluster_augmented=True, sgd_temperature=10.0,
                 sgd_learning_rate=0.05, sgd_epochs=200, sgd_batch_positives=32, sgd_batch_negatives=128,
                 random_state=0):
        self.leaf_size = leaf_size
        self.max_depth = max_depth
        self.strategies = strategies
        self.normalization = normalization
        self.rank_augment = rank_augment
        self.cluster = cluster
        self.cluster_augmented = cluster_augmented
        self.sgd_temperature = sgd_temperature
        self.sgd_learning_rate = sgd_learning_rate
        self.sgd_epochs = sgd_epochs
        self.sgd_batch_positives = sgd_batch_positives
        self.sgd_batch_negatives = sgd_batch_negatives
        self.random_state = random_state

    @classmethod
    def from_config(cls, config: MhlfConfig) -> "MultistageHybridFusion":
        return cls(config.leaf_size, config.max_depth, config.strategies, config.normalization,
                   config.rank_augment, config.cluster, config.cluster_augmented,
                   config.sgd_temperature, config.sgd_learning_rate, config.sgd_epochs,
                   config.sgd_batch_positives, config.sgd_batch_negatives, config.seed)

    @property
    def config(self) -> MhlfConfig:
        return MhlfConfig(self.leaf_size, self.max_depth, tuple(self.strategies), self.normalization,
                          self.rank_augment, self.cluster, self.cluster_augmented,
                          self.sgd_temperature, self.sgd_learning_rate, self.sgd_epochs,
                          self.sgd_batch_positives, self.sgd_batch_negatives, self.random_state)

    def _stage_rows(self, matrix: ScoreMatrix):
        """Normalized, deduplicated, augmented rows (before clustering)."""
        base = normalize_rows(matrix.values, self.normalization)[self.keep_]
        names = [matrix.row_names[i] for i in self.keep_]
        if self.rank_augment:
            base = np.vstack([base, _rank_rows(base)])
            names = names + [f"{n}:rank" for n in names]
        return names, base

    def _expand(self, matrix: ScoreMatrix):
        names, rows = self._stage_rows(matrix)
        if self.cluster:
            essentials = np.vstack([rows[members].mean(0) for _, members in self.leaves_])
            rows = np.vstack([rows, essentials])
            names = names + [f"essential:{path}" for path, _ in self.leaves_]
        return names, rows

    def fit(self, matrix: ScoreMatrix, labels=None):
        config = self.config
        labels = matrix.labels if labels is None else np.asarray(labels, dtype=bool)
        if labels is None or not np.any(labels):
            raise DataError("no positives in held-out labels")
        self.row_names_ = matrix.row_names
        self.keep_ = _dedupe(normalize_rows(matrix.values, self.normalization))
        names, rows = self._stage_rows(matrix)
        self.leaves_ = []
        if self.cluster:
            n_cluster = len(names) if self.cluster_augmented or not self.rank_augment else len(self.keep_)
            self.leaves_ = pca_tree_leaves(rows[:n_cluster], self.leaf_size, self.max_depth)
        self.stage_names_, expanded = self._expand(matrix)
        self.strategy_weights_ = {
            s: strategy_weights(expanded, labels, s, config).weights for s in self.strategies
        }
        self.weights_ = np.mean(list(self.strategy_weights_.values()), axis=0)
        self.heldout_ap_ = float(ap_of_scores(self.weights_ @ expanded, labels))
        return self

    def decision_function(self, matrix: ScoreMatrix) -> np.ndarray:
        if matrix.row_names != self.row_names_:
            raise DataError("test matrix rows differ from the fitted rows")
        _, expanded = self._expand(matrix)
        return self.weights_ @ expanded

    def fuse(self, matrix: ScoreMatrix, source="mhlf") -> RankedList:
        scores = self.decision_function(matrix)
        return to_ranked_list(ScoreList(matrix.event_id, source, matrix.video_ids, scores))

    def report(self) -> dict:
        return {
            "input_rows": list(self.row_names_),
            "kept_rows": [self.row_names_[i] for i in self.keep_],
            "stage_rows": list(self.stage_names_),
            "leaves": {path: [self.stage_names_[i] for i in m] for path, m in self.leaves_},
            "strategy_weights": {k: v.tolist() for k, v in self.strategy_weights_.items()},
            "final_weights": self.weights_.tolist(),
            "heldout_ap": self.heldout_ap_,
        }


def mhlf_fuse(matrix: ScoreMatrix, labels, test_matrix: ScoreMatrix,
              config: MhlfConfig = MhlfConfig()) -> RankedList:
    if matrix.row_names != test_matrix.row_names:
        raise DataError("train and test score matrices have different rows")
    return MultistageHybridFusion.from_config(config).fit(matrix, labels).fuse(test_matrix)


class AverageFusion(BaseEstimator):
    def __init__(self, normalization="rank"):
        self.normalization = normalization

    def fit(self, matrix: ScoreMatrix, labels=None):
        self.row_names_ = matrix.row_names
        self.weights_ = np.full(matrix.n_rows, 1.0 / matrix.n_rows)
        return self

    def decision_function(self, matrix: ScoreMatrix):
        if matrix.row_names != self.row_names_:
            raise DataError("test matrix rows differ from the fitted rows")
        return self.weights_ @ normalize_rows(matrix.values, self.normalization)

    def fuse(self, matrix, source="average"):
        return to_ranked_list(ScoreList(matrix.event_id, source, matrix.video_ids,
                                        self.decision_function(matrix)))


class LinearRegressionFusion(BaseEstimator):
    """Ridge regression of held-out labels on normalized rows.

    The penalty is chosen by 3-fold cross-validated AP; weights may be
    negative.
    """

    def __init__(self, normalization="rank", lambda_grid=LAMBDA_GRID, folds=3, random_state=0):
        self.normalization = normalization
        self.lambda_grid = lambda_grid
        self.folds = folds
        self.random_state = random_state

    def fit(self, matrix: ScoreMatrix, labels=None):
        labels = matrix.labels if labels is None else np.asarray(labels, dtype=bool)
        if labels is None or not labels.any():
            raise DataError("no positives in held-out labels")
        X = normalize_rows(matrix.values, self.normalization).T
        y = np.where(labels, 1.0, -1.0)
        n_folds = max(2, min(int(self.folds), int(labels.sum())))
        fold_of = stratified_folds(labels, n_folds, self.random_state)
        aps = []
        for lam in self.lambda_grid:
            oof = np.zeros(len(y))
            for f in range(n_folds):
                tr, te = fold_of != f, fold_of == f
                w, b = ridge_solve(X[tr], y[tr], lam)
                oof[te] = X[te] @ w + b
            aps.append(ap_of_scores(oof, labels))
        best = max(i for i, v in enumerate(aps) if v >= max(aps) - 1e-12)
        self.alpha_ = self.lambda_grid[best]
        self.row_names_ = matrix.row_names
        self.weights_, self.intercept_ = ridge_solve(X, y, self.alpha_)
        return self

    def decision_function(self, matrix: ScoreMatrix):
        if matrix.row_names != self.row_names_:
            raise DataError("test matrix rows differ from the fitted rows")
        return self.weights_ @ normalize_rows(matrix.values, self.normalization) + self.intercept_

    def fuse(self, matrix, source="linreg"):
        return to_ranked_list(ScoreList(matrix.event_id, source, matrix.video_ids,
                                        self.decision_function(matrix)))


def baseline_fuse(matrix: ScoreMatrix, labels, test_matrix: ScoreMatrix, method="average",
                  normalization="rank") -> RankedList:
    if matrix.row_names != test_matrix.row_names:
        raise DataError("train and test score matrices have different rows")
    if method == "average":
        est = AverageFusion(normalization)
    elif method == "linreg":
        est = LinearRegressionFusion(normalization)
    else:
        raise ConfigError(f"unknown baseline fusion {method!r}")
    return est.fit(matrix, labels).fuse(test_matrix)


def fuse_ranked_lists(lists: Sequence[RankedList], weights=None, event_id=None) -> RankedList:
    """Weighted average of rank-normalized lists over a shared collection."""
    if not lists:
        raise DataError("no ranked lists to fuse")
    weights = np.ones(len(lists)) if weights is None else np.asarray(weights, dtype=np.float64)
    if weights.shape[0] != len(lists) or np.any(weights < 0) or weights.sum() <= 0:
        raise DataError("fusion weights must be nonnegative and not all zero")
    ids = tuple(sorted(lists[0].video_ids))
    if any(set(l.video_ids) != set(ids) for l in lists[1:]):
        raise DataError("ranked lists cover different collections")
    total = np.zeros(len(ids))
    for w, lst in zip(weights, lists):
        rank = np.empty(len(lst))
        n = len(lst)
        rank_scores = 1.0 - np.arange(n) / (n - 1) if n > 1 else np.ones(1)
        lookup = {v: i for i, v in enumerate(ids)}
        rank[[lookup[v] for v in lst.video_ids]] = rank_scores
        total += w * rank
    total /= weights.sum()
    return to_ranked_list(ScoreList(event_id or lists[0].event_id, "fused", ids, total))


def write_fusion_report(path, reports: dict, per_event_ap: dict | None = None) -> None:
    payload = {"events": reports}
    if per_event_ap is not None:
        payload["per_event_ap"] = per_event_ap
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
