"""Pseudo-relevance-feedback reranking with self-paced sample weights.

Each outer iteration takes the current ranking, labels its top videos as
pseudo-positives and a seeded sample of its bottom half as pseudo-negatives,
then alternates two steps on the objective

    E(w, v) = sum_i v_i l_i(w) + (alpha / F) sum_f |w_f|^2 + sum_i f(v_i)

where l_i is the squared error of sample i averaged over the F features and
f is the self-paced regularizer.  The model step refits one weighted ridge
per feature; the v-step has the closed form in :func:`spar_weights`.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import FeatureMatrix, RankedList, ScoreList, to_ranked_list
from .exceptions import ConfigError, DataError
from .fusion import fuse_ranked_lists, normalize_rows
from .learners import ridge_solve

SCHEMES = ("binary", "mixture")
DEFAULT_SCHEDULE = ((90.0, 60.0), (95.0, 70.0))


@dataclass(frozen=True)
class PrfConfig:
    k_pos: int = 10
    k_neg: int = 50
    iterations: int = 2
    scheme: str = "mixture"
    schedule: tuple[tuple[float, float], ...] = DEFAULT_SCHEDULE
    schedule_mode: str = "percentile"
    blend: str = "average"
    ridge_alpha: float = 1.0
    inner_steps: int = 2
    normalization: str = "rank"

    def __post_init__(self):
        if self.iterations not in (1, 2):
            raise ConfigError("iterations must be 1 or 2")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown self-paced scheme {self.scheme!r}")
        if self.schedule_mode not in ("percentile", "absolute"):
            raise ConfigError(f"unknown schedule mode {self.schedule_mode!r}")
        if self.blend not in ("average", "none"):
            raise ConfigError(f"unknown blend {self.blend!r}")
        if self.k_pos < 1 or self.k_neg < 0 or self.inner_steps < 1:
            raise ConfigError("k_pos >= 1, k_neg >= 0 and inner_steps >= 1 required")
        schedule = tuple(tuple(float(x) for x in pair) for pair in self.schedule)
        if len(schedule) < self.iterations:
            raise ConfigError("schedule shorter than the iteration count")
        for l1, l2 in schedule:
            if self.scheme == "mixture" and not l1 > l2 > 0:
                raise ConfigError("mixture schedule needs lambda1 > lambda2 > 0")
            if self.scheme == "binary" and not l1 > 0:
                raise ConfigError("binary schedule needs lambda1 > 0")
        object.__setattr__(self, "schedule", schedule)


@dataclass
class RerankState:
    iteration: int
    positives: tuple[str, ...]
    negatives: tuple[str, ...]
    weights: np.ndarray
    models: list
    ranked: RankedList


@dataclass
class RerankResult:
    ranked: RankedList
    reranked: RankedList
    trace: list = field(default_factory=list)
    objective_history: list = field(default_factory=list)


# --------------------------------------------------------------------------
# self-paced weights


def _check_lambdas(lam1, lam2, scheme):
    lam1 = np.asarray(lam1, dtype=np.float64)
    if scheme == "mixture":
        lam2 = np.asarray(lam2, dtype=np.float64)
        if not np.all(lam2 < lam1):
            raise DataError("lambda2 must be smaller than lambda1")
        if not np.all(lam2 > 0):
            raise DataError("lambda2 must be positive")
        return lam1, lam2
    if scheme == "binary":
        if not np.all(lam1 > 0):
            raise DataError("lambda1 must be positive")
        return lam1, None
    raise ConfigError(f"unknown self-paced scheme {scheme!r}")


def _zeta(lam1, lam2):
    """zeta and zeta/lambda1 of the mixture scheme; lambda1 = inf gives (lambda2, 0)."""
    finite = np.isfinite(lam1)
    safe1 = np.where(finite, lam1, 1.0)
    zeta = np.where(finite, safe1 * lam2 / (safe1 - np.where(finite, lam2, 0.0)), lam2)
    return zeta, np.where(finite, zeta / safe1, 0.0)


def spar_weights(losses, lam1, lam2=None, scheme="mixture") -> np.ndarray:
    """Closed-form minimizer over v in [0, 1] of v*l + f(v) for each loss l.

    ``lam1`` and ``lam2`` may be scalars or per-sample arrays.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if np.any(losses < 0) or not np.all(np.isfinite(losses)):
        raise DataError("losses must be finite and nonnegative")
    lam1, lam2 = _check_lambdas(lam1, lam2, scheme)
    if scheme == "binary":
        return (losses < lam1).astype(np.float64)
    lam1, lam2, losses = np.broadcast_arrays(lam1, lam2, losses)
    zeta, inv = _zeta(lam1, lam2)
    v = np.ones_like(losses)
    hard = losses >= lam1
    mid = ~(losses <= lam2) & ~hard
    v[hard] = 0.0
    v[mid] = zeta[mid] / losses[mid] - inv[mid]
    return np.clip(v, 0.0, 1.0)


def spar_regularizer(v, lam1, lam2=None, scheme="mixture") -> float:
    """Sum of f(v_i): binary -lam1*v, mixture -zeta*log(v + zeta/lam1)."""
    v = np.asarray(v, dtype=np.float64)
    lam1, lam2 = _check_lambdas(lam1, lam2, scheme)
    if scheme == "binary":
        lam1, v = np.broadcast_arrays(lam1, v)
        # an infinite threshold keeps every sample; its constant term is dropped
        return float(-np.sum(np.where(np.isfinite(lam1), lam1 * v, 0.0)))
    lam1, lam2, v = np.broadcast_arrays(lam1, lam2, v)
    zeta, inv = _zeta(lam1, lam2)
    return float(-np.sum(zeta * np.log(v + inv)))


def spar_objective(losses, v, lam1, lam2, scheme, penalty=0.0) -> float:
    return float(np.dot(v, losses) + penalty + spar_regularizer(v, lam1, lam2, scheme))


# --------------------------------------------------------------------------
# pseudo labels


def mmprf_init(initial: RankedList, k_pos=10, k_neg=50, seed=0) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Top ``k_pos`` as pseudo-positives; ``k_neg`` drawn from the bottom half."""
    n = len(initial)
    if n < k_pos + k_neg:
        raise DataError(f"collection of {n} videos is too small for k_pos={k_pos}, k_neg={k_neg}")
    bottom = initial.video_ids[max(n // 2, k_pos):]
    if len(bottom) < k_neg:
        raise DataError(f"collection of {n} videos is too small for k_pos={k_pos}, k_neg={k_neg}")
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(len(bottom), size=k_neg, replace=False)) if k_neg else []
    return tuple(initial.video_ids[:k_pos]), tuple(bottom[i] for i in picks)


# --------------------------------------------------------------------------
# reranking


def _schedule_lambdas(losses, y, pair, config: PrfConfig):
    """Scalar thresholds, or per-class loss percentiles broadcast to samples.

    Percentiles are taken within each pseudo-label class: the minority
    positives usually carry the larger losses and would otherwise all be
    dropped in the first v-step.
    """
    l1, l2 = pair
    if config.schedule_mode == "absolute":
        return l1, (None if config.scheme == "binary" else l2)
    lam1 = np.empty_like(losses)
    lam2 = np.empty_like(losses)
    for cls in (True, False):
        m = (y > 0) == cls
        lam1[m], lam2[m] = np.percentile(losses[m], [l1, l2])
    if config.scheme == "binary":
        return np.maximum(lam1, 1e-12), None
    lam2 = np.maximum(lam2, 1e-12)
    lam1 = np.maximum(lam1, lam2 + np.maximum(1e-12, 1e-9 * lam2))
    return lam1, lam2


def _fit_all(blocks, y, v, alpha):
    models = [ridge_solve(X, y, alpha, v) for X in blocks]
    resid = np.vstack([X @ w + b - y for X, (w, b) in zip(blocks, models)])
    losses = np.mean(resid ** 2, axis=0)
    penalty = alpha * sum(float(w @ w) for w, _ in models) / len(models)
    return models, losses, penalty


def _score_collection(features, models, ids, normalization):
    rows = np.vstack([F.rows(ids) @ w + b for F, (w, b) in zip(features, models)])
    return normalize_rows(rows, normalization).mean(0)


def spar_rerank(initial: RankedList, features: Sequence[FeatureMatrix], config: PrfConfig = PrfConfig(),
                seed=0) -> RerankResult:
    """Self-paced reranking of ``initial``; returns the reranked and final lists."""
    if not features:
        raise DataError("reranking needs at least one feature")
    ids = tuple(sorted(initial.video_ids))
    for F in features:
        missing = set(ids) - set(F.video_ids)
        if missing:
            raise DataError(f"feature {F.feature_name} lacks video {sorted(missing)[0]!r}")
    if config.k_neg == 0:
        warnings.warn("pseudo labels have a single class; returning the initial list", stacklevel=2)
        return RerankResult(initial, initial, [], [])
    current = initial
    trace, history = [], []
    for it in range(config.iterations):
        pos, neg = mmprf_init(current, config.k_pos, config.k_neg, seed + it)
        train_ids = pos + neg
        y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
        blocks = [F.rows(train_ids) for F in features]
        v = np.ones(len(y))
        models, losses, penalty = _fit_all(blocks, y, v, config.ridge_alpha)
        lam1, lam2 = _schedule_lambdas(losses, y, config.schedule[it], config)
        objective = [spar_objective(losses, v, lam1, lam2, config.scheme, penalty)]
        for _ in range(config.inner_steps):
            v = spar_weights(losses, lam1, lam2, config.scheme)
            objective.append(spar_objective(losses, v, lam1, lam2, config.scheme, penalty))
            if v.sum() <= 0:
                warnings.warn("all self-paced weights are zero; keeping the previous models", stacklevel=2)
                break
            models, losses, penalty = _fit_all(blocks, y, v, config.ridge_alpha)
            objective.append(spar_objective(losses, v, lam1, lam2, config.scheme, penalty))
        scores = _score_collection(features, models, ids, config.normalization)
        current = to_ranked_list(ScoreList(initial.event_id, "spar", ids, scores))
        history.append(objective)
        hist, _ = np.histogram(v, bins=10, range=(0.0, 1.0))
        trace.append({
            "iteration": it + 1,
            "pseudo_positives": list(pos),
            "pseudo_negatives": list(neg),
            "lambda1": _jsonable(lam1, y),
            "lambda2": _jsonable(lam2, y),
            "weight_histogram": hist.tolist(),
            "objective": objective,
        })
    final = blend_final(initial, current) if config.blend == "average" else current
    return RerankResult(final, current, trace, history)


def _jsonable(lam, y):
    """Scalar threshold, or one value per pseudo-label class; inf becomes null."""
    if lam is None:
        return None
    a = np.asarray(lam, dtype=np.float64)
    if a.ndim == 0:
        return None if math.isinf(a) else float(a)
    return {"positive": float(a[y > 0][0]), "negative": float(a[y < 0][0])}


def prf_rerank(initial: RankedList, features: Sequence[FeatureMatrix], config: PrfConfig = PrfConfig(),
               seed=0) -> RankedList:
    """Plain pseudo-relevance feedback: unweighted ridge per feature, averaged."""
    ids = tuple(sorted(initial.video_ids))
    current = initial
    for it in range(config.iterations):
        pos, neg = mmprf_init(current, config.k_pos, config.k_neg, seed + it)
        y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
        models = [ridge_solve(F.rows(pos + neg), y, config.ridge_alpha) for F in features]
        scores = _score_collection(features, models, ids, config.normalization)
        current = to_ranked_list(ScoreList(initial.event_id, "prf", ids, scores))
    return current


def blend_final(initial: RankedList, reranked: RankedList) -> RankedList:
    """Average of the two rank-normalized lists."""
    if set(initial.video_ids) != set(reranked.video_ids):
        raise DataError("initial and reranked lists cover different collections")
    return fuse_ranked_lists([initial, reranked], event_id=initial.event_id)


def write_rerank_trace(path, event_id: str, trace: list, ap_by_iteration=None) -> None:
    lines = []
    for i, entry in enumerate(trace):
        record = {"event_id": event_id, **entry}
        if ap_by_iteration is not None:
            record["ap_if_labels_known"] = ap_by_iteration[i]
        lines.append(json.dumps(record, sort_keys=True))
    with open(path, "a", encoding="utf-8") as fh:
        fh.write("".join(l + "\n" for l in lines))
