"""Synthetic benchmark with planted event structure.

Every event owns a direction in a latent space.  Features come in
redundancy groups: all members of a group read the same corrupted copy of
the latent relevance vector, so their score lists correlate, and each member
adds its own noise on top.  Concept detector scores and ASR/OCR term counts
are driven by the same relevance labels for the text-query path.

:func:`score_ensemble` is a lighter generator that emits score matrices
directly (held-out and test), for fusion experiments that repeat many times.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.special import expit, softmax

from .core import (
    FeatureMatrix,
    GroundTruth,
    ScoreMatrix,
    read_ground_truth_csv,
    write_ground_truth_csv,
)
from .exceptions import ConfigError, DataError
from .semantic import (
    ConceptVocabulary,
    SemanticDocMatrix,
    SimilarityProvider,
    read_docs,
    write_docs,
)

DEFAULT_GROUPS = (5, 5, 4, 4, 3, 3, 3, 3, 2, 2, 2, 2, 2, 2, 1, 1, 1, 1, 1)


@dataclass(frozen=True)
class SynthConfig:
    n_events: int = 20
    n_videos: int = 2000
    n_features: int = 47
    groups: tuple[int, ...] = DEFAULT_GROUPS
    snr: tuple[float, ...] | None = None
    snr_range: tuple[float, float] = (0.7, 2.5)
    positives_per_event: int = 100
    test_positives_per_event: int = 40
    test_fraction: float = 0.5
    latent_dim: int = 24
    dense_dim: int = 48
    histogram_features: int = 8
    vocab_size: int = 32
    words_per_video: int = 400
    feature_noise: float = 0.6
    visual_strength: float = 2.2
    visual_noise: float = 1.0
    asr_rate: float = 0.6
    ocr_rate: float = 0.35
    distractor_concepts: int = 20
    seed: int = 0

    def __post_init__(self):
        groups = tuple(int(g) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        if any(g < 1 for g in groups) or sum(groups) != self.n_features:
            raise ConfigError(f"group sizes sum to {sum(groups)}, expected n_features={self.n_features}")
        if self.snr is not None:
            snr = tuple(float(s) for s in self.snr)
            if len(snr) != self.n_features or min(snr) <= 0:
                raise ConfigError("snr needs one positive value per feature")
            object.__setattr__(self, "snr", snr)
        lo, hi = self.snr_range
        if not 0 < lo <= hi:
            raise ConfigError("snr_range must satisfy 0 < low <= high")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")
        n_test = int(round(self.n_videos * self.test_fraction))
        if self.positives_per_event > self.n_videos - n_test or self.test_positives_per_event > n_test:
            raise ConfigError("more positives per event than videos in the split")
        if self.histogram_features > self.n_features:
            raise ConfigError("histogram_features exceeds n_features")

    @property
    def group_of(self) -> tuple[int, ...]:
        return tuple(g for g, size in enumerate(self.groups) for _ in range(size))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown synth option {sorted(unknown)[0]!r}")
        data = dict(data)
        for key in ("groups", "snr", "snr_range"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass
class Dataset:
    config: SynthConfig
    features: tuple[FeatureMatrix, ...]
    ground_truth: GroundTruth
    docs: SemanticDocMatrix
    similarity: SimilarityProvider
    queries: dict[str, tuple[str, ...]]
    feature_groups: dict[str, int] = field(default_factory=dict)

    @property
    def video_ids(self) -> tuple[str, ...]:
        return self.features[0].video_ids

    def feature(self, name: str) -> FeatureMatrix:
        for f in self.features:
            if f.feature_name == name:
                return f
        raise DataError(f"unknown feature {name!r}")


def _children(seed: int, n: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _histogram_slots(config: SynthConfig) -> set[int]:
    # first member of the largest groups reads as a histogram (BoW-like) feature
    starts = np.cumsum((0,) + config.groups[:-1])
    order = sorted(range(len(config.groups)), key=lambda g: (-config.groups[g], g))
    return {int(starts[g]) for g in order[: config.histogram_features]}


def synth_generate(config: SynthConfig = SynthConfig()) -> Dataset:
    """Features, ground truth and text-search data for ``config``."""
    rng_split, rng_lab, rng_lat, rng_feat, rng_sem = _children(config.seed, 5)
    n, E = config.n_videos, config.n_events
    ids = tuple(f"vid{i:05d}" for i in range(n))
    n_test = int(round(n * config.test_fraction))
    test_mask = np.zeros(n, bool)
    test_mask[rng_split.choice(n, n_test, replace=False)] = True
    splits = {v: ("test" if t else "train") for v, t in zip(ids, test_mask)}

    Y = np.zeros((n, E), bool)
    train_idx, test_idx = np.flatnonzero(~test_mask), np.flatnonzero(test_mask)
    for e in range(E):
        Y[rng_lab.choice(train_idx, config.positives_per_event, replace=False), e] = True
        Y[rng_lab.choice(test_idx, config.test_positives_per_event, replace=False), e] = True
    events = tuple(f"E{e + 1:03d}" for e in range(E))
    gt = GroundTruth({ev: frozenset(ids[i] for i in np.flatnonzero(Y[:, e])) for e, ev in enumerate(events)},
                     splits)

    r = max(config.latent_dim, E)
    mu = np.linalg.qr(rng_lat.normal(size=(r, E)))[0].T  # orthonormal event directions
    relevance = Y.astype(np.float64) @ mu

    G = len(config.groups)
    group_of = config.group_of
    if config.snr is not None:
        snr = np.array(config.snr)
    else:
        lo, hi = config.snr_range
        group_snr = np.exp(rng_lat.uniform(np.log(lo), np.log(hi), G))
        snr = group_snr[list(group_of)] * np.exp(0.15 * rng_lat.normal(size=config.n_features))
    shared = rng_lat.normal(size=(G, n, r))

    hist_slots = _histogram_slots(config)
    features, groups = [], {}
    for f in range(config.n_features):
        g = group_of[f]
        z = snr[f] * relevance + shared[g] + config.feature_noise * rng_feat.normal(size=(n, r))
        if f in hist_slots:
            name = f"hist{f:02d}"
            B = rng_feat.normal(size=(r, config.vocab_size)) / np.sqrt(r)
            p = softmax(z @ B, axis=1)
            counts = np.vstack([rng_feat.multinomial(config.words_per_video, row) for row in p])
            values, kind = counts / config.words_per_video, "histogram"
        else:
            name = f"feat{f:02d}"
            A = rng_feat.normal(size=(r, config.dense_dim)) / np.sqrt(r)
            values, kind = z @ A, "dense"
        features.append(FeatureMatrix(name, ids, values.astype(np.float32), kind))
        groups[name] = g

    docs, similarity, queries = _semantic(config, ids, Y, events, rng_sem)
    return Dataset(config, tuple(features), gt, docs, similarity, queries, groups)


def _semantic(config, ids, Y, events, rng):
    E, n = len(events), len(ids)
    visual = [f"vis{c:03d}" for c in range(2 * E + config.distractor_concepts)]
    asr = [f"asr{c:03d}" for c in range(E + config.distractor_concepts // 2)]
    ocr = [f"ocr{c:03d}" for c in range(E + config.distractor_concepts // 2)]
    vocab = ConceptVocabulary(tuple(visual + asr + ocr),
                              ("visual",) * len(visual) + ("asr",) * len(asr) + ("ocr",) * len(ocr))
    # event e owns visual concepts 2e and 2e+1, asr term e and ocr term e
    rel_vis = np.zeros((n, len(visual)))
    rel_vis[:, 0:2 * E:2] = Y
    rel_vis[:, 1:2 * E:2] = Y
    corruption = rng.normal(size=(n, len(visual)))
    vis_scores = expit(config.visual_strength * rel_vis - 2.0 + config.visual_noise * corruption)
    rel_text = np.zeros((n, len(asr)))
    rel_text[:, :E] = Y
    asr_counts = rng.poisson(0.03 + config.asr_rate * rel_text)
    ocr_counts = rng.poisson(0.03 + config.ocr_rate * rel_text)
    docs = SemanticDocMatrix(ids, vocab, {
        "visual": vis_scores.astype(np.float32).astype(np.float64),
        "asr": sparse.csr_matrix(asr_counts.astype(np.float64)),
        "ocr": sparse.csr_matrix(ocr_counts.astype(np.float64)),
    })
    words, rows, queries = [], [], {}
    concepts = vocab.concepts
    col = {c: j for j, c in enumerate(concepts)}
    for e, ev in enumerate(events):
        qwords = (f"q{e:03d}a", f"q{e:03d}b", f"q{e:03d}c")
        queries[ev] = qwords
        for k, word in enumerate(qwords):
            row = rng.uniform(0.0, 0.32, size=len(concepts)) * (rng.random(len(concepts)) < 0.1)
            if k == 0:
                row[col[visual[2 * e]]] = rng.uniform(0.8, 1.0)
            elif k == 1:
                row[col[visual[2 * e + 1]]] = rng.uniform(0.6, 0.9)
                row[col[asr[e]]] = rng.uniform(0.5, 0.8)
            else:
                row[col[ocr[e]]] = rng.uniform(0.4, 0.7)
            words.append(word)
            rows.append(row)
    similarity = SimilarityProvider(tuple(words), concepts, np.round(np.array(rows), 6))
    return docs, similarity, queries


# --------------------------------------------------------------------------
# score ensembles for fusion experiments


@dataclass(frozen=True)
class EnsembleConfig:
    groups: tuple[int, ...] = DEFAULT_GROUPS
    n_events: int = 20
    heldout_videos: int = 300
    heldout_positives: int = 10
    test_videos: int = 1000
    test_positives: int = 40
    quality_range: tuple[float, float] = (0.2, 2.0)
    coverage: float = 0.6
    group_correlation: float = 0.7
    seed: int = 0


def score_ensemble(config: EnsembleConfig = EnsembleConfig()) -> dict[str, tuple[ScoreMatrix, ScoreMatrix]]:
    """Per event a (held-out, test) pair of score matrices with one row per source.

    Every redundancy group has a quality level; a group "sees" a random subset
    of the positives, which get a boost proportional to that quality, and all
    group members share one noise vector plus their own noise.
    """
    rng = np.random.default_rng(config.seed)
    groups = tuple(config.groups)
    names = tuple(f"src{i:02d}" for i in range(sum(groups)))
    lo, hi = config.quality_range
    rho = config.group_correlation
    out = {}
    for e in range(config.n_events):
        quality = np.exp(rng.uniform(np.log(lo), np.log(hi), len(groups)))

        def matrix(n_videos, n_pos):
            labels = np.zeros(n_videos, bool)
            labels[rng.choice(n_videos, n_pos, replace=False)] = True
            rows = []
            for g, size in enumerate(groups):
                seen = labels & (rng.random(n_videos) < config.coverage)
                signal = quality[g] * (seen + 0.3 * labels)
                common = rng.normal(size=n_videos)
                for _ in range(size):
                    rows.append(signal + np.sqrt(rho) * common + np.sqrt(1 - rho) * rng.normal(size=n_videos))
            vids = tuple(f"v{i:05d}" for i in range(n_videos))
            return ScoreMatrix(names, vids, np.array(rows), labels, f"E{e + 1:03d}")

        out[f"E{e + 1:03d}"] = (matrix(config.heldout_videos, config.heldout_positives),
                                matrix(config.test_videos, config.test_positives))
    return out


# --------------------------------------------------------------------------
# dataset files


def write_dataset(directory, ds: Dataset) -> list[Path]:
    """Write features as raw float32 files plus labels and semantic data."""
    directory = Path(directory)
    (directory / "features").mkdir(parents=True, exist_ok=True)
    written = []
    manifest = {"config": ds.config.to_dict(), "features": []}
    for F in ds.features:
        path = directory / "features" / f"{F.feature_name}.f32"
        write_feature_matrix(path, F)
        manifest["features"].append({"name": F.feature_name, "kind": F.kind, "group": ds.feature_groups[F.feature_name],
                                     "file": f"features/{F.feature_name}.f32"})
        written.append(path)
    write_ground_truth_csv(directory / "ground_truth.csv", ds.ground_truth)
    write_docs(directory / "semantic", ds.docs)
    ds.similarity.to_tsv(directory / "similarity.tsv")
    (directory / "queries.json").write_text(json.dumps(ds.queries, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (directory / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written += [directory / n for n in ("ground_truth.csv", "similarity.tsv", "queries.json", "dataset.json")]
    return written


def read_dataset(directory) -> Dataset:
    directory = Path(directory)
    meta_path = directory / "dataset.json"
    if not meta_path.exists():
        raise DataError(f"no dataset.json in {directory}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    config = SynthConfig.from_dict(meta["config"])
    feats, groups = [], {}
    for entry in meta["features"]:
        F = read_feature_matrix(directory / entry["file"], entry["name"], entry["kind"])
        feats.append(F)
        groups[entry["name"]] = entry["group"]
    gt = read_ground_truth_csv(directory / "ground_truth.csv")
    docs = read_docs(directory / "semantic")
    similarity = SimilarityProvider.from_tsv(directory / "similarity.tsv")
    queries = {k: tuple(v) for k, v in json.loads((directory / "queries.json").read_text(encoding="utf-8")).items()}
    return Dataset(config, tuple(feats), gt, docs, similarity, queries, groups)


_FEATURE_MAGIC = b"CBVRFEA1"


def write_feature_matrix(path, F: FeatureMatrix) -> None:
    """Magic, u32 n, u32 d, float32 values row-major, then the id table."""
    import struct

    parts = [_FEATURE_MAGIC, struct.pack("<II", F.n, F.d), np.asarray(F.values, dtype="<f4").tobytes(),
             struct.pack("<I", F.n)]
    for v in F.video_ids:
        raw = v.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    Path(path).write_bytes(b"".join(parts))


def read_feature_matrix(path, name=None, kind="dense") -> FeatureMatrix:
    import struct

    data = Path(path).read_bytes()
    if data[:8] != _FEATURE_MAGIC:
        raise DataError(f"{path}: not a feature file")
    try:
        n, d = struct.unpack_from("<II", data, 8)
        off = 16 + 4 * n * d
        values = np.frombuffer(data[16:off], dtype="<f4").reshape(n, d)
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        ids = []
        for _ in range(count):
            (length,) = struct.unpack_from("<H", data, off)
            off += 2
            ids.append(data[off:off + length].decode("utf-8"))
            off += length
    except (struct.error, ValueError):
        raise DataError(f"{path}: truncated feature file") from None
    if count != n or off != len(data):
        raise DataError(f"{path}: corrupt feature file")
    return FeatureMatrix(name or Path(path).stem, tuple(ids), values.astype(np.float32), kind)
