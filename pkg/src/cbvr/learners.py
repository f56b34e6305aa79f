"""Event models: ridge / kernel ridge / linear SVM and cross-validated training.

All linear learners expose ``fit`` / ``decision_function`` / ``predict`` and
produce a :class:`LinearModel` that scores dense or compressed indexes.
Labels are {+1, -1}; background videos are the negatives.
"""

from __future__ import annotations

import base64
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg as sla
from numba import njit
from sklearn.base import BaseEstimator, RegressorMixin, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core import FeatureMatrix, ScoreList, ScoreMatrix, ap_of_score_rows
from .exceptions import ConfigError, DataError
from .kernel_maps import chi2_kernel_matrix
from .quantizers import CompressedIndex

log = logging.getLogger(__name__)

SCENARIOS = ("SQ", "000Ex", "010Ex", "100Ex")
CLASSIFIERS = ("krr", "svm", "both")
LAMBDA_GRID = tuple(10.0 ** p for p in range(-3, 4))
SVM_LAMBDA_GRID = (1e-4, 1e-3, 1e-2, 1e-1)


@dataclass(frozen=True, eq=False)
class LinearModel:
    w: np.ndarray
    b: float
    feature_name: str = "feature"
    event_id: str = "event"
    alpha: float = 0.0
    classifier: str = "krr"

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64).reshape(-1).copy()
        if not (np.all(np.isfinite(w)) and np.isfinite(self.b)):
            raise DataError("model parameters must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "b", float(self.b))

    @property
    def source(self) -> str:
        return f"{self.feature_name}:{self.classifier}"

    def decision_function(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.w + self.b


# --------------------------------------------------------------------------
# ridge


def _check_labels(y):
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise DataError("labels must be +1/-1")
    return y


def _weighted_center(X, y, sample_weight):
    if sample_weight is None:
        return X.mean(0), y.mean(), X - X.mean(0), y - y.mean(), None
    v = np.asarray(sample_weight, dtype=np.float64).reshape(-1)
    if v.shape[0] != X.shape[0] or np.any(v < 0) or v.sum() <= 0:
        raise DataError("sample weights must be nonnegative with positive sum")
    x_mean = v @ X / v.sum()
    y_mean = float(v @ y / v.sum())
    sv = np.sqrt(v)
    return x_mean, y_mean, (X - x_mean) * sv[:, None], (y - y_mean) * sv, sv


def ridge_solve(X, y, alpha, sample_weight=None):
    """Minimize sum_i v_i (x_i.w + b - y_i)^2 + alpha |w|^2 with b unregularized.

    Uses the primal normal equations when n >= d and the dual otherwise.
    Returns ``(w, b)``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if alpha < 0:
        raise ConfigError("ridge penalty must be >= 0")
    x_mean, y_mean, Xc, yc, _ = _weighted_center(X, y, sample_weight)
    n, d = Xc.shape
    try:
        if n >= d:
            A = Xc.T @ Xc + alpha * np.eye(d)
            w = sla.solve(A, Xc.T @ yc, assume_a="pos", check_finite=False)
        else:
            A = Xc @ Xc.T + alpha * np.eye(n)
            w = Xc.T @ sla.solve(A, yc, assume_a="pos", check_finite=False)
    except (sla.LinAlgError, np.linalg.LinAlgError):
        raise DataError("singular ridge system; use a penalty > 0") from None
    if alpha == 0 and np.linalg.cond(A) > 1e12:
        raise DataError("singular ridge system; use a penalty > 0")
    return w, y_mean - x_mean @ w


def ridge_objective(X, y, w, b, alpha, sample_weight=None) -> float:
    r = np.asarray(X) @ w + b - y
    v = np.ones_like(r) if sample_weight is None else np.asarray(sample_weight)
    return float(v @ (r * r) + alpha * w @ w)


def ridge_gradient(X, y, w, b, alpha, sample_weight=None):
    """Gradient of :func:`ridge_objective` w.r.t. (w, b)."""
    r = np.asarray(X) @ w + b - y
    v = np.ones_like(r) if sample_weight is None else np.asarray(sample_weight)
    return 2 * (np.asarray(X).T @ (v * r)) + 2 * alpha * w, 2 * float(v @ r)


class RidgeRegression(RegressorMixin, BaseEstimator):
    """Least-squares classifier with an unpenalized bias (KRR with a linear kernel)."""

    def __init__(self, alpha=1.0):
        self.alpha = alpha

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.coef_, self.intercept_ = ridge_solve(X, y, self.alpha, sample_weight)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        return check_array(X, dtype=np.float64) @ self.coef_ + self.intercept_

    predict = decision_function

    def to_model(self, feature_name="feature", event_id="event", classifier="krr") -> LinearModel:
        return LinearModel(self.coef_, self.intercept_, feature_name, event_id, self.alpha, classifier)


def ridge_train(X, y, lam, feature_name="feature", event_id="event", sample_weight=None) -> LinearModel:
    y = _check_labels(y)
    w, b = ridge_solve(X, y, lam, sample_weight)
    return LinearModel(w, b, feature_name, event_id, lam, "krr")


# --------------------------------------------------------------------------
# kernel ridge


def _check_kernel(K):
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise DataError("kernel matrix must be square")
    scale = max(1.0, float(np.abs(K).max()))
    if np.abs(K - K.T).max() > 1e-8 * scale:
        raise DataError("kernel matrix is not symmetric")
    return K


def krr_train(K, y, lam) -> np.ndarray:
    """Dual coefficients alpha = (K + lam I)^-1 y."""
    K = _check_kernel(K)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if not lam > 0:
        raise ConfigError("kernel ridge penalty must be > 0")
    c, low = sla.cho_factor(K + lam * np.eye(K.shape[0]), check_finite=False)
    return sla.cho_solve((c, low), y, check_finite=False)


def _center_train_kernel(K):
    row = K.mean(0)
    return K - row[None, :] - row[:, None] + row.mean(), row


def _center_test_kernel(K_test, train_row_means):
    return K_test - K_test.mean(1, keepdims=True) - train_row_means[None, :] + train_row_means.mean()


class KernelRidgeDual(RegressorMixin, BaseEstimator):
    """Kernel ridge on a precomputed kernel.

    With ``fit_intercept`` the kernel is centered in feature space and the
    label mean is added back, which matches :class:`RidgeRegression` exactly
    for a linear kernel.
    """

    def __init__(self, alpha=1.0, fit_intercept=True):
        self.alpha = alpha
        self.fit_intercept = fit_intercept

    def fit(self, K, y):
        K = _check_kernel(K)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if self.fit_intercept:
            K, self.train_row_means_ = _center_train_kernel(K)
            self.y_mean_ = float(y.mean())
        else:
            self.train_row_means_, self.y_mean_ = None, 0.0
        self.dual_coef_ = krr_train(K, y - self.y_mean_, self.alpha)
        return self

    def decision_function(self, K_test):
        check_is_fitted(self, "dual_coef_")
        K_test = np.atleast_2d(np.asarray(K_test, dtype=np.float64))
        if self.fit_intercept:
            K_test = _center_test_kernel(K_test, self.train_row_means_)
        return K_test @ self.dual_coef_ + self.y_mean_

    predict = decision_function


@dataclass(frozen=True, eq=False)
class KernelModel:
    """Kernel ridge event model over stored training rows (exact-kernel path)."""

    estimator: KernelRidgeDual
    train_rows: np.ndarray
    kernel: str
    feature_name: str = "feature"
    event_id: str = "event"
    classifier: str = "krr"

    @property
    def alpha(self):
        return self.estimator.alpha

    @property
    def source(self) -> str:
        return f"{self.feature_name}:{self.classifier}"

    def decision_function(self, X) -> np.ndarray:
        return self.estimator.decision_function(chi2_kernel_matrix(np.asarray(X), self.train_rows))


# --------------------------------------------------------------------------
# linear SVM (Pegasos-style SGD)


@njit(cache=True, fastmath=True)
def _pegasos(X, y, lam, order):
    # w is kept as a * v so the shrink step is O(1); returns the mean iterate
    # over the second half of the steps.  The running sum of a since v last
    # changed is flushed into avg only when v changes.
    n, d = X.shape
    v = np.zeros(d)
    a = 1.0
    vv = 0.0
    sq = np.empty(n)
    for i in range(n):
        acc = 0.0
        for j in range(d):
            acc += X[i, j] * X[i, j]
        sq[i] = acc
    avg = np.zeros(d)
    pending = 0.0
    radius = 1.0 / np.sqrt(lam)
    total = order.shape[0] * n
    start = total // 2
    t = 0
    for epoch in range(order.shape[0]):
        for pos in range(n):
            i = order[epoch, pos]
            t += 1
            eta = 1.0 / (lam * t)
            dot = 0.0
            for j in range(d):
                dot += v[j] * X[i, j]
            margin = a * dot
            scale = 1.0 - eta * lam
            violated = y[i] * margin < 1.0
            if scale <= 0.0 or violated or a < 1e-100:
                if pending != 0.0:
                    for j in range(d):
                        avg[j] += pending * v[j]
                    pending = 0.0
            if scale <= 0.0:
                for j in range(d):
                    v[j] = 0.0
                a, vv, dot = 1.0, 0.0, 0.0
            else:
                a *= scale
            if violated:
                c = eta * y[i] / a
                for j in range(d):
                    v[j] += c * X[i, j]
                vv += 2.0 * c * dot + c * c * sq[i]
                # shrinking alone never leaves the ball, so only check here
                norm = a * np.sqrt(max(vv, 0.0))
                if norm > radius:
                    a *= radius / norm
            if a < 1e-100:
                for j in range(d):
                    v[j] *= a
                vv *= a * a
                a = 1.0
            if t > start:
                pending += a
    for j in range(d):
        avg[j] += pending * v[j]
    return avg / (total - start)


def svm_objective(X, y, w, b, lam) -> float:
    """lam/2 (|w|^2 + b^2) + mean hinge; the bias is an augmented weight."""
    margins = y * (np.asarray(X) @ w + b)
    return float(0.5 * lam * (w @ w + b * b) + np.maximum(0.0, 1.0 - margins).mean())


def _augment(X):
    return np.ascontiguousarray(np.hstack([X, np.ones((X.shape[0], 1))]))


def _epoch_order(n, epochs, seed):
    rng = np.random.default_rng(seed)
    return rng.permuted(np.tile(np.arange(n, dtype=np.int64), (int(epochs), 1)), axis=1)


def _svm_fit(Xa, y, lam, epochs, seed, order=None):
    """Unchecked core of :meth:`LinearSVM.fit` on bias-augmented rows."""
    if order is None:
        order = _epoch_order(Xa.shape[0], epochs, seed)
    wa = _pegasos(Xa, y, float(lam), order)
    return wa[:-1].copy(), float(wa[-1])


class LinearSVM(ClassifierMixin, BaseEstimator):
    """Primal linear SVM trained by epoch-shuffled subgradient steps 1/(lam t).

    The returned weights are the mean iterate over the second half of the
    steps, which converges where the last iterate keeps oscillating.

    The bias is learned as the weight of a constant input feature, so it is
    regularized together with ``w``.
    """

    def __init__(self, alpha=1e-3, epochs=10, random_state=0):
        self.alpha = alpha
        self.epochs = epochs
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = _check_labels(y)
        if len(np.unique(y)) < 2:
            raise DataError("linear SVM needs both classes")
        if not self.alpha > 0:
            raise ConfigError("SVM regularization must be > 0")
        self.coef_, self.intercept_ = _svm_fit(_augment(X), np.ascontiguousarray(y), self.alpha, self.epochs,
                                               self.random_state)
        self.classes_ = np.array([-1.0, 1.0])
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        return check_array(X, dtype=np.float64) @ self.coef_ + self.intercept_

    def predict(self, X):
        return np.where(self.decision_function(X) >= 0, 1.0, -1.0)

    def objective(self, X, y) -> float:
        return svm_objective(X, y, self.coef_, self.intercept_, self.alpha)


def svm_train_sgd(X, y, lam_reg, epochs=10, seed=0, feature_name="feature", event_id="event") -> LinearModel:
    svm = LinearSVM(alpha=lam_reg, epochs=epochs, random_state=seed).fit(X, y)
    return LinearModel(svm.coef_, svm.intercept_, feature_name, event_id, lam_reg, "svm")


# --------------------------------------------------------------------------
# prediction


def predict_scores(model, index, event_id=None) -> ScoreList:
    """Score a dense :class:`FeatureMatrix` or a :class:`CompressedIndex`."""
    event_id = event_id or getattr(model, "event_id", "event")
    source = getattr(model, "source", "model")
    if isinstance(index, CompressedIndex):
        if isinstance(model, KernelModel):
            decoded = index.decode()
            return ScoreList(event_id, source, decoded.video_ids, model.decision_function(decoded.values))
        return index.dot_scores(model.w, model.b, event_id=event_id, source=source)
    if isinstance(index, FeatureMatrix):
        if isinstance(model, LinearModel) and index.d != model.w.shape[0]:
            raise DataError(f"model dimension {model.w.shape[0]} does not match feature dimension {index.d}")
        X = index.values.astype(np.float64)
        return ScoreList(event_id, source, index.video_ids, model.decision_function(X))
    raise DataError(f"cannot score {type(index).__name__}")


# --------------------------------------------------------------------------
# event training with cross-validated penalty selection


@dataclass(frozen=True)
class TrainSpec:
    positives: frozenset
    negatives: frozenset
    scenario: str = "100Ex"
    classifier: str = "both"

    def __post_init__(self):
        object.__setattr__(self, "positives", frozenset(self.positives))
        object.__setattr__(self, "negatives", frozenset(self.negatives))
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if self.classifier not in CLASSIFIERS:
            raise ConfigError(f"unknown classifier {self.classifier!r}")
        if self.scenario == "010Ex" and self.classifier != "krr":
            raise ConfigError("010Ex requires krr")
        if self.positives & self.negatives:
            raise DataError("positive and negative sets overlap")
        if not self.positives:
            raise DataError("no positive exemplars")

    @property
    def classifiers(self) -> tuple[str, ...]:
        return ("krr", "svm") if self.classifier == "both" else (self.classifier,)


@dataclass
class EventModels:
    event_id: str
    models: dict = field(default_factory=dict)
    heldout: ScoreMatrix | None = None
    chosen_alpha: dict = field(default_factory=dict)


def stratified_folds(labels: np.ndarray, n_folds: int, seed: int) -> np.ndarray:
    """Fold index per sample: each class is permuted and dealt round-robin."""
    rng = np.random.default_rng(seed)
    folds = np.empty(labels.shape[0], dtype=np.int64)
    for cls in (True, False):
        idx = np.flatnonzero(labels == cls)
        perm = idx[rng.permutation(idx.shape[0])]
        folds[perm] = np.arange(perm.shape[0]) % n_folds
    return folds


def _ridge_path_linear(X, y, alphas, gram=None):
    """Ridge solutions for several penalties from one eigendecomposition."""
    x_mean = X.mean(0)
    y_mean = y.mean()
    Xc = X - x_mean
    yc = y - y_mean
    n, d = X.shape
    if gram is None:
        gram = Xc.T @ Xc
    if n >= d:
        s, U = np.linalg.eigh(gram)
        proj = U.T @ (Xc.T @ yc)
        out = []
        for a in alphas:
            if a == 0:
                raise DataError("singular ridge system; use a penalty > 0")
            w = U @ (proj / (np.maximum(s, 0.0) + a))
            out.append((w, y_mean - x_mean @ w))
        return out
    s, U = np.linalg.eigh(Xc @ Xc.T)
    proj = U.T @ yc
    out = []
    for a in alphas:
        w = Xc.T @ (U @ (proj / (np.maximum(s, 0.0) + a)))
        out.append((w, y_mean - x_mean @ w))
    return out


def _centered_gram(X):
    """Centered Gram from sufficient statistics (allows fold downdates)."""
    n = X.shape[0]
    s = X.sum(0)
    return X.T @ X, s, n


def _fold_gram(total, X_out):
    G, s, n = total
    G_in = G - X_out.T @ X_out
    s_in = s - X_out.sum(0)
    n_in = n - X_out.shape[0]
    mean = s_in / n_in
    return G_in - n_in * np.outer(mean, mean)


def _ridge_cv_batched(X, y, fold_of, n_folds, alphas):
    """Out-of-fold ridge predictions for every penalty, all folds at once.

    Fold statistics are downdated from the full-data sums, then one stacked
    eigendecomposition serves every (fold, penalty) pair.
    """
    d = X.shape[1]
    G, sx, sxy = X.T @ X, X.sum(0), X.T @ y
    n, sy = X.shape[0], y.sum()
    grams, crosses, means, ymeans, tests = [], [], [], [], []
    for f in range(n_folds):
        te = np.flatnonzero(fold_of == f)
        Xo, yo = X[te], y[te]
        n_in = n - te.shape[0]
        mx = (sx - Xo.sum(0)) / n_in
        my = (sy - yo.sum()) / n_in
        grams.append(G - Xo.T @ Xo - n_in * np.outer(mx, mx))
        crosses.append(sxy - Xo.T @ yo - n_in * mx * my)
        means.append(mx)
        ymeans.append(my)
        tests.append(te)
    s, U = np.linalg.eigh(np.stack(grams))
    s = np.maximum(s, 0.0)
    proj = np.einsum("fij,fi->fj", U, np.stack(crosses))
    a = np.asarray(alphas, dtype=np.float64)
    if (a <= 0).any():
        raise DataError("singular ridge system; use a penalty > 0")
    # W[f, :, k] = U_f diag(1 / (s_f + a_k)) proj_f
    W = np.einsum("fij,fjk->fik", U, proj[:, :, None] / (s[:, :, None] + a[None, None, :]))
    preds = np.zeros((a.shape[0], n))
    for f, te in enumerate(tests):
        b = ymeans[f] - means[f] @ W[f]
        preds[:, te] = (X[te] @ W[f]).T + b[:, None]
    return preds


def _krr_path(K, y, alphas):
    Kc, row = _center_train_kernel(K)
    s, U = np.linalg.eigh(Kc)
    y_mean = y.mean()
    proj = U.T @ (y - y_mean)
    return [(U @ (proj / (np.maximum(s, 0.0) + a)), row, y_mean) for a in alphas]


def _select(aps, alphas):
    best = max(aps)
    # ties go to the strongest penalty
    return max(i for i, v in enumerate(aps) if v >= best - 1e-12)


def train_event(
    features: Sequence[FeatureMatrix],
    spec: TrainSpec,
    lambda_grid: Sequence[float] = LAMBDA_GRID,
    folds: int = 5,
    event_id: str = "event",
    seed: int = 0,
    svm_lambda_grid: Sequence[float] = SVM_LAMBDA_GRID,
    svm_epochs: int = 5,
    kernel: str = "linear",
) -> EventModels:
    """Train one model per (feature, classifier) with CV-selected penalty.

    Held-out scores are the out-of-fold predictions at the selected penalty
    and form the rows of the returned ``heldout`` ScoreMatrix.  With
    ``kernel="chi2"`` histogram features use exact chi2 kernel ridge.
    """
    ids = tuple(sorted(spec.positives | spec.negatives))
    labels = np.array([v in spec.positives for v in ids])
    if labels.all():
        raise DataError("no negative examples")
    n_pos = int(labels.sum())
    n_folds = min(int(folds), n_pos)
    if n_folds < folds:
        warnings.warn(f"event {event_id}: only {n_pos} positives, using {n_folds} folds", stacklevel=2)
    if n_folds < 2:
        raise DataError(f"event {event_id}: need at least 2 positives for cross-validation")
    fold_of = stratified_folds(labels, n_folds, seed)
    y = np.where(labels, 1.0, -1.0)
    result = EventModels(event_id)
    rows, names = [], []
    # SVM visiting orders depend only on the folds, which every feature shares
    orders = None
    if "svm" in spec.classifiers:
        orders = [_epoch_order(int((fold_of != f).sum()), svm_epochs, seed + f) for f in range(n_folds)]
        orders.append(_epoch_order(len(ids), svm_epochs, seed))
    for feat in features:
        X = feat.rows(ids)
        use_kernel = kernel == "chi2" and feat.kind == "histogram"
        for clf in spec.classifiers:
            oof, model, alpha = _train_one(
                X, y, fold_of, n_folds, clf, use_kernel, lambda_grid, svm_lambda_grid,
                svm_epochs, seed, feat.feature_name, event_id, orders,
            )
            result.models[model.source] = model
            result.chosen_alpha[model.source] = alpha
            rows.append(oof)
            names.append(model.source)
    result.heldout = ScoreMatrix(tuple(names), ids, np.vstack(rows), labels, event_id)
    return result


def _train_one(X, y, fold_of, n_folds, clf, use_kernel, lambda_grid, svm_grid, svm_epochs,
               seed, feature_name, event_id, orders=None):
    labels = y > 0
    if clf == "svm":
        grid = tuple(svm_grid)
        for lam in grid:
            if not lam > 0:
                raise ConfigError("SVM regularization must be > 0")
        preds = np.zeros((len(grid), X.shape[0]))
        Xa = _augment(X)
        for f in range(n_folds):
            tr, te = fold_of != f, fold_of == f
            Xtr, ytr = np.ascontiguousarray(Xa[tr]), np.ascontiguousarray(y[tr])
            order = orders[f] if orders else _epoch_order(Xtr.shape[0], svm_epochs, seed + f)
            W = np.column_stack([np.append(*_svm_fit(Xtr, ytr, lam, svm_epochs, seed + f, order))
                                 for lam in grid])
            preds[:, te] = (Xa[te] @ W).T
        best = _select(list(ap_of_score_rows(preds, labels)), grid)
        w, b = _svm_fit(Xa, y, grid[best], svm_epochs, seed, orders[-1] if orders else None)
        model = LinearModel(w, b, feature_name, event_id, grid[best], "svm")
        return preds[best], model, grid[best]

    grid = tuple(lambda_grid)
    preds = np.zeros((len(grid), X.shape[0]))
    if use_kernel:
        K = chi2_kernel_matrix(X, X)
        for f in range(n_folds):
            tr, te = np.flatnonzero(fold_of != f), np.flatnonzero(fold_of == f)
            for i, (coef, row, y_mean) in enumerate(_krr_path(K[np.ix_(tr, tr)], y[tr], grid)):
                preds[i, te] = _center_test_kernel(K[np.ix_(te, tr)], row) @ coef + y_mean
        best = _select(list(ap_of_score_rows(preds, labels)), grid)
        est = KernelRidgeDual(grid[best]).fit(K, y)
        return preds[best], KernelModel(est, X, "chi2", feature_name, event_id), grid[best]

    if min(int((fold_of != f).sum()) for f in range(n_folds)) >= X.shape[1]:
        preds = _ridge_cv_batched(X, y, fold_of, n_folds, grid)
    else:
        total = _centered_gram(X)
        for f in range(n_folds):
            tr, te = fold_of != f, fold_of == f
            gram = _fold_gram(total, X[te]) if tr.sum() >= X.shape[1] else None
            path = _ridge_path_linear(X[tr], y[tr], grid, gram)
            W = np.column_stack([w for w, _ in path])
            preds[:, te] = (X[te] @ W).T + np.array([b for _, b in path])[:, None]
    best = _select(list(ap_of_score_rows(preds, labels)), grid)
    w, b = ridge_solve(X, y, grid[best])
    return preds[best], LinearModel(w, b, feature_name, event_id, grid[best], "krr"), grid[best]


# --------------------------------------------------------------------------
# model files


def _encode_w(w) -> str:
    return base64.b64encode(np.asarray(w, dtype="<f4").tobytes()).decode("ascii")


def _decode_w(text) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f4").astype(np.float64)


def write_models(path, models: Sequence[LinearModel]) -> None:
    lines = []
    for m in models:
        lines.append(json.dumps({
            "event_id": m.event_id,
            "feature_name": m.feature_name,
            "classifier": m.classifier,
            "b": m.b,
            "lambda": m.alpha,
            "w": _encode_w(m.w),
        }, sort_keys=True))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_models(path) -> list[LinearModel]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            out.append(LinearModel(
                _decode_w(rec["w"]), rec["b"], rec["feature_name"], rec["event_id"],
                rec.get("lambda", 0.0), rec.get("classifier", "krr"),
            ))
        except (KeyError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: bad model record ({exc})") from None
    return out
