"""Shared domain types, score normalization, ranking and AP/MAP metrics.

Ranking is deterministic everywhere: scores descend and equal scores are
ordered by ascending video id.  Python string order equals UTF-8 byte order,
so plain ``sorted`` on ids gives the byte-wise tie-break.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .exceptions import DataError, LeakageError

NORMALIZATION_METHODS = ("zscore", "minmax", "rank")
SPLITS = ("train", "validation", "test")


def _check_ids(video_ids: Sequence[str]) -> tuple[str, ...]:
    ids = tuple(str(v) for v in video_ids)
    joined = "\x00".join(ids)
    if "" in ids or "\t" in joined or "\n" in joined or "\r" in joined:
        bad = next(v for v in ids if not v or any(c in v for c in "\t\n\r"))
        raise DataError(f"invalid video id {bad!r}")
    if len(set(ids)) != len(ids):
        raise DataError("video ids are not unique")
    return ids


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Per-video fixed-length vectors for one feature type.

    ``kind`` is ``"dense"`` for real-valued encodings (FV, VLAD, DCNN) and
    ``"histogram"`` for nonnegative bag-of-words style vectors that are
    eligible for additive-kernel maps.
    """

    feature_name: str
    video_ids: tuple[str, ...]
    values: np.ndarray
    kind: str = "dense"

    def __post_init__(self):
        ids = _check_ids(self.video_ids)
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        if values.ndim != 2 or values.shape[0] != len(ids):
            raise DataError(
                f"feature {self.feature_name!r}: values shape {values.shape} "
                f"does not match {len(ids)} video ids"
            )
        if not np.all(np.isfinite(values)):
            raise DataError(f"feature {self.feature_name!r} contains NaN/Inf")
        if self.kind not in ("dense", "histogram"):
            raise DataError(f"unknown feature kind {self.kind!r}")
        values.setflags(write=False)
        object.__setattr__(self, "video_ids", ids)
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def rows(self, video_ids: Sequence[str]) -> np.ndarray:
        """Return the float64 rows for ``video_ids`` in the given order."""
        lookup = self._lookup
        try:
            idx = np.fromiter((lookup[v] for v in video_ids), dtype=np.intp, count=len(video_ids))
        except KeyError as exc:
            raise DataError(
                f"video {exc.args[0]!r} missing from feature {self.feature_name!r}"
            ) from None
        return self.values[idx].astype(np.float64)

    @property
    def _lookup(self) -> dict[str, int]:
        cached = self.__dict__.get("_lookup_cache")
        if cached is None:
            cached = {v: i for i, v in enumerate(self.video_ids)}
            object.__setattr__(self, "_lookup_cache", cached)
        return cached

    def subset(self, video_ids: Sequence[str]) -> "FeatureMatrix":
        return FeatureMatrix(self.feature_name, tuple(video_ids), self.rows(video_ids), self.kind)

    def with_values(self, values: np.ndarray, name: str | None = None, kind: str | None = None):
        return FeatureMatrix(name or self.feature_name, self.video_ids, values, kind or self.kind)


@dataclass(frozen=True, eq=False)
class ScoreList:
    """Scores of one source (feature or system) for one event."""

    event_id: str
    source: str
    video_ids: tuple[str, ...]
    scores: np.ndarray

    def __post_init__(self):
        ids = _check_ids(self.video_ids)
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1).copy()
        if scores.shape[0] != len(ids):
            raise DataError("score count does not match video id count")
        if not np.all(np.isfinite(scores)):
            raise DataError(f"non-finite scores in {self.source!r}/{self.event_id!r}")
        scores.setflags(write=False)
        object.__setattr__(self, "video_ids", ids)
        object.__setattr__(self, "scores", scores)

    @classmethod
    def from_mapping(cls, entries: Mapping[str, float], event_id="event", source="scores"):
        ids = list(entries)
        return cls(event_id, source, tuple(ids), np.array([entries[v] for v in ids], dtype=np.float64))

    @property
    def entries(self) -> dict[str, float]:
        return dict(zip(self.video_ids, self.scores.tolist()))

    def __len__(self):
        return len(self.video_ids)

    def aligned(self, video_ids: Sequence[str]) -> np.ndarray:
        """Scores reordered to ``video_ids``; raises if the collections differ."""
        if tuple(video_ids) == self.video_ids:
            return self.scores.copy()
        lookup = {v: i for i, v in enumerate(self.video_ids)}
        if len(lookup) != len(video_ids) or any(v not in lookup for v in video_ids):
            raise DataError("score lists cover different collections")
        return self.scores[[lookup[v] for v in video_ids]]


@dataclass(frozen=True, eq=False)
class RankedList:
    """Videos in descending score order, ties broken by ascending id."""

    event_id: str
    video_ids: tuple[str, ...]
    scores: np.ndarray
    source: str = "ranked"

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1).copy()
        scores.setflags(write=False)
        object.__setattr__(self, "video_ids", tuple(self.video_ids))
        object.__setattr__(self, "scores", scores)

    def __len__(self):
        return len(self.video_ids)

    def __iter__(self):
        return iter(zip(self.video_ids, self.scores.tolist()))

    def to_score_list(self) -> ScoreList:
        return ScoreList(self.event_id, self.source, self.video_ids, self.scores)

    def top(self, k: int) -> tuple[str, ...]:
        return self.video_ids[:k]


@dataclass(frozen=True)
class GroundTruth:
    """Per-event positive sets plus a train/validation/test split per video.

    Background videos of an event are the training-split videos that are not
    positive for it.
    """

    positives: Mapping[str, frozenset]
    splits: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        pos = {str(e): frozenset(v) for e, v in self.positives.items()}
        for split in self.splits.values():
            if split not in SPLITS:
                raise DataError(f"unknown split label {split!r}")
        object.__setattr__(self, "positives", pos)
        object.__setattr__(self, "splits", dict(self.splits))

    @property
    def events(self) -> list[str]:
        return sorted(self.positives)

    def split_ids(self, split: str) -> list[str]:
        return sorted(v for v, s in self.splits.items() if s == split)

    def positives_in(self, event_id: str, split: str) -> list[str]:
        if event_id not in self.positives:
            raise DataError(f"no ground truth for event {event_id!r}")
        return sorted(v for v in self.positives[event_id] if self.splits.get(v) == split)

    def background(self, event_id: str) -> list[str]:
        pos = self.positives[event_id]
        return [v for v in self.split_ids("train") if v not in pos]

    def validate(self, collection: Iterable[str]) -> None:
        known = set(collection)
        for event, ids in self.positives.items():
            missing = sorted(ids - known)
            if missing:
                raise DataError(f"event {event!r}: labeled id {missing[0]!r} not in collection")
        missing = sorted(set(self.splits) - known)
        if missing:
            raise DataError(f"split label for unknown video {missing[0]!r}")

    def training_view(self) -> "TrainingLabels":
        return TrainingLabels(self)


class TrainingLabels:
    """Label access restricted to the non-test splits.

    Every query is counted; asking about a test-split video raises
    :class:`LeakageError`.  Scenario pipelines hand this object (never the
    full :class:`GroundTruth`) to training and fusion-weight learning.
    """

    def __init__(self, gt: GroundTruth):
        self._gt = gt
        self.queries = 0

    def _guard(self, video_ids):
        for v in video_ids:
            if self._gt.splits.get(v) == "test":
                raise LeakageError(f"test-split label requested for {v!r}")

    def is_positive(self, event_id: str, video_ids: Sequence[str]) -> np.ndarray:
        self._guard(video_ids)
        self.queries += 1
        pos = self._gt.positives[event_id]
        return np.array([v in pos for v in video_ids], dtype=bool)

    def positives(self, event_id: str) -> list[str]:
        self.queries += 1
        return self._gt.positives_in(event_id, "train")

    def background(self, event_id: str) -> list[str]:
        self.queries += 1
        return self._gt.background(event_id)

    def split_ids(self, split: str) -> list[str]:
        return self._gt.split_ids(split)


# --------------------------------------------------------------------------
# ranking and normalization


def ranking_order(video_ids: Sequence[str], scores: np.ndarray) -> np.ndarray:
    """Indices that sort ``scores`` descending with ascending-id tie-break."""
    scores = np.asarray(scores, dtype=np.float64)
    id_rank = np.empty(len(video_ids), dtype=np.int64)
    id_rank[np.argsort(np.array(video_ids, dtype=object), kind="stable")] = np.arange(len(video_ids))
    return np.lexsort((id_rank, -scores))


def to_ranked_list(scores: ScoreList) -> RankedList:
    order = ranking_order(scores.video_ids, scores.scores)
    ids = scores.video_ids
    return RankedList(
        scores.event_id, tuple(ids[i] for i in order), scores.scores[order], source=scores.source
    )


def rank_normalize_array(order: np.ndarray) -> np.ndarray:
    """Scores 1 - (r-1)/(n-1) for rank r of each position given a sort order."""
    n = order.shape[0]
    out = np.empty(n, dtype=np.float64)
    out[order] = 1.0 - np.arange(n) / (n - 1) if n > 1 else 1.0
    return out


def normalize_array(values: np.ndarray, method: str, order: np.ndarray | None = None) -> np.ndarray:
    """Array form of :func:`normalize_scores`.

    For ``rank`` the caller may pass a precomputed ranking ``order``;
    otherwise ties fall back to positional (stable) order.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise DataError("empty score list")
    if method == "zscore":
        std = values.std()
        if std == 0:
            return np.zeros_like(values)
        return (values - values.mean()) / std
    if method == "minmax":
        lo, hi = values.min(), values.max()
        if hi == lo:
            return np.zeros_like(values)
        return (values - lo) / (hi - lo)
    if method == "rank":
        if order is None:
            order = np.argsort(-values, kind="stable")
        return rank_normalize_array(order)
    raise DataError(f"unknown normalization method {method!r}")


def normalize_scores(scores: ScoreList, method: str = "rank") -> ScoreList:
    """Rescale a score list by ``zscore``, ``minmax`` or ``rank``.

    zscore uses the population standard deviation and maps a constant list
    to zeros; rank gives the r-th ranked video 1 - (r-1)/(n-1).
    """
    if len(scores) == 0:
        raise DataError("empty score list")
    order = ranking_order(scores.video_ids, scores.scores) if method == "rank" else None
    out = normalize_array(scores.scores, method, order)
    return ScoreList(scores.event_id, scores.source, scores.video_ids, out)


# --------------------------------------------------------------------------
# metrics


def average_precision_flags(relevant: np.ndarray, n_relevant: int | None = None) -> float:
    """Non-interpolated AP of a ranking given relevance flags in rank order."""
    relevant = np.asarray(relevant, dtype=bool)
    total = int(relevant.sum()) if n_relevant is None else int(n_relevant)
    if total == 0:
        raise DataError("no positives")
    hits = np.cumsum(relevant)
    ranks = np.nonzero(relevant)[0] + 1
    return float(np.sum(hits[relevant] / ranks) / total)


def average_precision(ranked: RankedList, positives: Iterable[str]) -> float:
    positives = set(positives)
    if not positives:
        raise DataError("no positives")
    if not positives <= set(ranked.video_ids):
        raise DataError("positives are not a subset of the ranked collection")
    flags = np.fromiter((v in positives for v in ranked.video_ids), dtype=bool, count=len(ranked))
    return average_precision_flags(flags, len(positives))


def descending_order(values: np.ndarray) -> np.ndarray:
    """Row-wise argsort by descending value, ties kept in column order.

    Quicksort first; rows that contain ties are redone with a stable sort.
    """
    neg = -np.asarray(values, dtype=np.float64)
    order = np.argsort(neg, axis=-1)
    srt = np.take_along_axis(neg, order, axis=-1)
    tied = np.any(srt[..., 1:] == srt[..., :-1], axis=-1)
    if np.any(tied):
        if neg.ndim == 1:
            return np.argsort(neg, kind="stable")
        order[tied] = np.argsort(neg[tied], axis=-1, kind="stable")
    return order


def ap_of_scores(scores: np.ndarray, labels: np.ndarray) -> float:
    """AP of a score vector whose positions are already in ascending-id order."""
    order = descending_order(scores)
    return average_precision_flags(np.asarray(labels, dtype=bool)[order])


def ap_of_score_rows(rows: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """AP of every row of a (rows x videos) matrix; columns in ascending-id order."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    labels = np.asarray(labels, dtype=bool)
    total = int(labels.sum())
    if total == 0:
        raise DataError("no positives")
    order = descending_order(rows)
    rel = labels[order]
    hits = np.cumsum(rel, axis=1)
    ranks = np.arange(1, rows.shape[1] + 1)
    return np.sum(np.where(rel, hits / ranks, 0.0), axis=1) / total


def mean_average_precision(
    lists: Mapping[str, RankedList], gt: GroundTruth, return_per_event=False
):
    """Unweighted mean of per-event AP over the events in ``lists``."""
    per_event = {}
    for event_id in sorted(lists):
        if event_id not in gt.positives:
            raise DataError(f"no ground truth for event {event_id!r}")
        ranked = lists[event_id]
        in_list = set(ranked.video_ids)
        positives = [v for v in gt.positives[event_id] if v in in_list]
        per_event[event_id] = average_precision(ranked, positives)
    if not per_event:
        raise DataError("no events to evaluate")
    value = float(np.mean(list(per_event.values())))
    return (value, per_event) if return_per_event else value


# --------------------------------------------------------------------------
# interchange formats


def format_score(x: float) -> str:
    return f"{x:.9g}"


def write_scores_tsv(path, scores: ScoreList | RankedList) -> None:
    lines = [f"{v}\t{format_score(s)}\n" for v, s in zip(scores.video_ids, scores.scores.tolist())]
    Path(path).write_bytes("".join(lines).encode("utf-8"))


def read_scores_tsv(path, event_id="event", source=None) -> ScoreList:
    text = Path(path).read_bytes().decode("utf-8")
    ids, vals = [], []
    for lineno, line in enumerate(text.split("\n"), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected video_id<TAB>score")
        ids.append(parts[0])
        try:
            vals.append(float(parts[1]))
        except ValueError:
            raise DataError(f"{path}:{lineno}: bad score {parts[1]!r}") from None
    return ScoreList(event_id, source or Path(path).stem, tuple(ids), np.array(vals))


def write_ground_truth_csv(path, gt: GroundTruth) -> None:
    """Positive rows per event, then one ``*`` row per video carrying its split."""
    buf = io.StringIO(newline="")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["event_id", "video_id", "label"])
    for event in gt.events:
        for v in sorted(gt.positives[event]):
            writer.writerow([event, v, "positive"])
    for v in sorted(gt.splits):
        writer.writerow(["*", v, gt.splits[v]])
    Path(path).write_bytes(buf.getvalue().encode("utf-8"))


def read_ground_truth_csv(path) -> GroundTruth:
    positives: dict[str, set] = {}
    background: dict[str, set] = {}
    splits: dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["event_id", "video_id", "label"]:
            raise DataError(f"{path}: expected header event_id,video_id,label")
        for row in reader:
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{path}: malformed row {row!r}")
            event, video, label = row
            if event == "*":
                if label not in SPLITS:
                    raise DataError(f"{path}: unknown split {label!r}")
                splits[video] = label
            elif label == "positive":
                positives.setdefault(event, set()).add(video)
            elif label == "background":
                background.setdefault(event, set()).add(video)
                positives.setdefault(event, set())
            elif label in ("validation", "test"):
                splits[video] = label
                positives.setdefault(event, set())
            else:
                raise DataError(f"{path}: unknown label {label!r}")
    for event, bg in background.items():
        clash = bg & positives.get(event, set())
        if clash:
            raise DataError(f"event {event!r}: {sorted(clash)[0]!r} is both positive and background")
        for v in bg:
            splits.setdefault(v, "train")
    return GroundTruth({e: frozenset(v) for e, v in positives.items()}, splits)


@dataclass(frozen=True, eq=False)
class ScoreMatrix:
    """Rows are score sources, columns are videos in ascending-id order.

    ``labels`` (optional) marks the positive columns of held-out data.
    Columns are re-sorted on construction so AP helpers can rely on stable
    argsort for the id tie-break.
    """

    row_names: tuple[str, ...]
    video_ids: tuple[str, ...]
    values: np.ndarray
    labels: np.ndarray | None = None
    event_id: str = "event"

    def __post_init__(self):
        ids = _check_ids(self.video_ids)
        values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if values.shape != (len(self.row_names), len(ids)):
            raise DataError(
                f"score matrix shape {values.shape} does not match "
                f"{len(self.row_names)} rows x {len(ids)} videos"
            )
        if not np.all(np.isfinite(values)):
            raise DataError("score matrix contains non-finite values")
        order = np.argsort(np.array(ids, dtype=object), kind="stable")
        labels = self.labels
        if labels is not None:
            labels = np.asarray(labels, dtype=bool).reshape(-1)
            if labels.shape[0] != len(ids):
                raise DataError("labels do not cover all columns")
            labels = labels[order]
            labels.setflags(write=False)
        values = values[:, order]
        values.setflags(write=False)
        object.__setattr__(self, "row_names", tuple(self.row_names))
        object.__setattr__(self, "video_ids", tuple(ids[i] for i in order))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_score_lists(cls, lists: Sequence[ScoreList], labels=None, event_id=None):
        if not lists:
            raise DataError("no score lists")
        ids = tuple(sorted(lists[0].video_ids))
        values = np.vstack([s.aligned(ids) for s in lists])
        lab = None
        if labels is not None:
            pos = set(labels) if not isinstance(labels, np.ndarray) else None
            lab = np.array([v in pos for v in ids]) if pos is not None else labels
        return cls(tuple(s.source for s in lists), ids, values, lab, event_id or lists[0].event_id)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    def select_rows(self, names: Sequence[str]) -> "ScoreMatrix":
        lookup = {n: i for i, n in enumerate(self.row_names)}
        missing = [n for n in names if n not in lookup]
        if missing:
            raise DataError(f"unknown score rows: {missing}")
        idx = [lookup[n] for n in names]
        return ScoreMatrix(tuple(names), self.video_ids, self.values[idx], self.labels, self.event_id)

    def with_rows(self, row_names, values) -> "ScoreMatrix":
        return ScoreMatrix(tuple(row_names), self.video_ids, values, self.labels, self.event_id)

    def row(self, name: str) -> ScoreList:
        i = self.row_names.index(name)
        return ScoreList(self.event_id, name, self.video_ids, self.values[i])
