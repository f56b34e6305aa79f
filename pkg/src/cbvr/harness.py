"""Scenario pipelines and experiments on the synthetic benchmark.

Every pipeline sees labels only through :class:`~cbvr.core.TrainingLabels`;
the full ground truth is used for evaluation and nothing else.  Per-event
work is seeded from the master seed and the event index, so the thread pool
size changes wall-clock time but never the output bytes.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import platform
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import __version__
from .core import (
    FeatureMatrix,
    RankedList,
    ScoreList,
    ScoreMatrix,
    average_precision,
    format_score,
    mean_average_precision,
    to_ranked_list,
    write_scores_tsv,
)
from .exceptions import ConfigError, DataError
from .fusion import AverageFusion, LinearRegressionFusion, MhlfConfig, MultistageHybridFusion
from .kernel_maps import HomogeneousKernelMap, chi2_kernel_matrix
from .learners import LAMBDA_GRID, SVM_LAMBDA_GRID, KernelModel, TrainSpec, predict_scores, train_event
from .quantizers import CompressedIndex, ProductQuantizer, UniformQuantizer
from .reranking import PrfConfig, prf_rerank, spar_rerank
from .semantic import semantic_search
from .synth import Dataset, EnsembleConfig, SynthConfig, score_ensemble, synth_generate

EXEMPLARS = {"010Ex": 10, "100Ex": 100}
VARIANTS = ("exact", "efm", "pq", "efm+pq", "uq")
PQ_SWEEP = (2, 4, 8, 16)
UQ_SWEEP = (2, 4, 16, 256)
DEFAULT_FRACTIONS = (1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3)
FUSION_METHODS = ("mhlf", "average", "linreg")


@dataclass(frozen=True)
class ScenarioOptions:
    model: str = "bm25"
    tau: float = 0.3
    folds: int = 5
    efm: bool = True
    kernel: str = "linear"
    svm_epochs: int = 5
    rerank: bool = True
    prf_010ex: bool = False
    codec: str = "none"
    pq_d_sub: int = 8
    pq_codewords: int = 256
    uq_bins: int = 2
    mhlf: MhlfConfig = MhlfConfig()
    prf: PrfConfig = PrfConfig()
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.kernel not in ("linear", "chi2"):
            raise ConfigError(f"unknown kernel {self.kernel!r}")
        if self.codec not in ("none", "pq", "uq"):
            raise ConfigError(f"unknown codec {self.codec!r}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")


@dataclass
class ScenarioResult:
    scenario: str
    lists: dict[str, RankedList]
    ap: dict[str, float]
    map: float
    stages: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)


def event_seed(seed: int, event_index: int, salt: int = 0) -> int:
    return int(np.random.SeedSequence([seed, event_index, salt]).generate_state(1)[0])


def _map_events(fn: Callable, events: Sequence[str], threads: int) -> list:
    if threads <= 1 or len(events) <= 1:
        return [fn(i, e) for i, e in enumerate(events)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(len(events)), events))


def prepare_features(features: Sequence[FeatureMatrix], efm=True) -> list[FeatureMatrix]:
    """Histogram features pass through the chi2 feature map when ``efm``."""
    if not efm:
        return list(features)
    out = []
    for F in features:
        if F.kind == "histogram":
            mapped = HomogeneousKernelMap().fit_transform(F.values)
            F = FeatureMatrix(F.feature_name, F.video_ids, mapped, "dense")
        out.append(F)
    return out


def _split(features, ids):
    return [F.subset(ids) for F in features]


def build_indexes(train: Sequence[FeatureMatrix], test: Sequence[FeatureMatrix], options: ScenarioOptions,
                  seed=0, quantizer_cache: dict | None = None) -> list:
    """Test-side representation: the features themselves or compressed indexes.

    Codebooks are learned on training-split features only.  Passing the same
    ``quantizer_cache`` to several calls reuses codebooks fit on identical data.
    """
    if options.codec == "none":
        return list(test)
    out = []
    for i, (Ftr, Fte) in enumerate(zip(train, test)):
        if options.codec == "pq":
            params = ("pq", options.pq_d_sub, options.pq_codewords, seed + i)
        else:
            params = ("uq", options.uq_bins)
        key = params + (hashlib.sha1(np.ascontiguousarray(Ftr.values).tobytes()).digest(),)
        q = None if quantizer_cache is None else quantizer_cache.get(key)
        if q is None:
            if options.codec == "pq":
                q = ProductQuantizer(d_sub=options.pq_d_sub, n_codewords=options.pq_codewords, pad=True,
                                     random_state=seed + i).fit(Ftr.values)
            else:
                q = UniformQuantizer(n_bins=options.uq_bins).fit(Ftr.values)
            if quantizer_cache is not None:
                quantizer_cache[key] = q
        out.append((CompressedIndex.build(q, Fte), Fte.kind))
    return out


def _test_values(index):
    """Dense test rows of a feature or (decoded) compressed index."""
    if isinstance(index, tuple):
        index, kind = index
        values = index.decode().values.astype(np.float64)
        # kernel models need a nonnegative decoded histogram
        return index.video_ids, (np.maximum(values, 0.0) if kind == "histogram" else values)
    return index.video_ids, index.values.astype(np.float64)


def _score_test(model, index, event_id, kernel_cache=None):
    if isinstance(model, KernelModel):
        ids, values = _test_values(index)
        key = (model.feature_name, hashlib.sha1(np.ascontiguousarray(model.train_rows).tobytes()).digest())
        K = None if kernel_cache is None else kernel_cache.get(key)
        if K is None:
            K = chi2_kernel_matrix(values, model.train_rows)
            if kernel_cache is not None:
                kernel_cache[key] = K
        return ScoreList(event_id, model.source, ids, model.estimator.decision_function(K))
    if isinstance(index, tuple):
        index = index[0]
    return predict_scores(model, index, event_id)


# --------------------------------------------------------------------------
# scenarios


def _sq_lists(ds: Dataset, test_ids, options: ScenarioOptions) -> dict[str, RankedList]:
    docs = ds.docs.subset(test_ids)
    return {ev: semantic_search(ds.queries[ev], ds.similarity, docs, options.model, options.tau, ev)
            for ev in ds.ground_truth.events}


def _exemplars(labels, event_id, n, seed):
    pos = labels.positives(event_id)
    if len(pos) < n:
        raise DataError(f"event {event_id}: insufficient exemplars ({len(pos)} < {n})")
    rng = np.random.default_rng(seed)
    return frozenset(pos[i] for i in np.sort(rng.choice(len(pos), n, replace=False)))


@dataclass
class TrainedEvent:
    event_id: str
    models: dict
    heldout: ScoreMatrix


def train_events(ds: Dataset, scenario: str, options: ScenarioOptions,
                 features: Sequence[FeatureMatrix] | None = None) -> dict[str, TrainedEvent]:
    """Per-event models and out-of-fold held-out matrices on the train split."""
    if scenario not in EXEMPLARS:
        raise ConfigError(f"scenario {scenario!r} does not train classifiers")
    labels = ds.ground_truth.training_view()
    train_ids = labels.split_ids("train")
    if features is None:
        features = prepare_features(ds.features, options.efm)
    train_feats = _split(features, train_ids)
    classifier = "krr" if scenario == "010Ex" else "both"

    def work(i, ev):
        s = event_seed(options.seed, i)
        pos = _exemplars(labels, ev, EXEMPLARS[scenario], s)
        neg = frozenset(labels.background(ev))
        spec = TrainSpec(pos, neg, scenario, classifier)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            em = train_event(train_feats, spec, LAMBDA_GRID, options.folds, ev, s, SVM_LAMBDA_GRID,
                             options.svm_epochs, options.kernel)
        return TrainedEvent(ev, em.models, em.heldout)

    events = ds.ground_truth.events
    return dict(zip(events, _map_events(work, events, options.threads)))


def score_events(trained: Mapping[str, TrainedEvent], indexes: Sequence, feature_names: Sequence[str],
                 options: ScenarioOptions) -> dict[str, ScoreMatrix]:
    by_name = dict(zip(feature_names, indexes))
    out = {}
    # exact-kernel models of different events often share their training rows
    kernel_cache = {}
    for ev, te in trained.items():
        rows, ids = [], None
        for source in te.heldout.row_names:
            feature = source.rsplit(":", 1)[0]
            s = _score_test(te.models[source], by_name[feature], ev, kernel_cache)
            rows.append(s.scores)
            ids = s.video_ids
        out[ev] = ScoreMatrix(te.heldout.row_names, ids, np.vstack(rows), None, ev)
    return out


def fuse_events(trained: Mapping[str, TrainedEvent], test: Mapping[str, ScoreMatrix],
                options: ScenarioOptions, method="mhlf",
                fitted: dict | None = None) -> tuple[dict[str, RankedList], dict]:
    """Fit a fusion estimator per event on held-out scores and fuse the test matrix.

    ``fitted`` (keyed by event and method) lets repeated calls on the same
    trained models skip refitting.
    """
    lists, reports = {}, {}
    for i, (ev, te) in enumerate(sorted(trained.items())):
        if fitted is not None and (ev, method) in fitted:
            est, report = fitted[ev, method]
            if report is not None:
                reports[ev] = report
            lists[ev] = est.fuse(test[ev], method)
            continue
        if method == "mhlf":
            cfg = dataclasses.replace(options.mhlf, seed=event_seed(options.seed, i, 1))
            est = MultistageHybridFusion.from_config(cfg).fit(te.heldout)
            reports[ev] = est.report()
        elif method == "average":
            est = AverageFusion(options.mhlf.normalization).fit(te.heldout)
        elif method == "linreg":
            est = LinearRegressionFusion(options.mhlf.normalization,
                                         random_state=event_seed(options.seed, i, 1)).fit(te.heldout)
        else:
            raise ConfigError(f"unknown fusion method {method!r}")
        if fitted is not None:
            fitted[ev, method] = (est, reports.get(ev))
        lists[ev] = est.fuse(test[ev], method)
    return lists, reports


def run_scenario(ds: Dataset, scenario: str, options: ScenarioOptions = ScenarioOptions()) -> ScenarioResult:
    """Ranked test-split lists for every event, plus per-event AP and MAP."""
    gt = ds.ground_truth
    test_ids = gt.split_ids("test")
    if not test_ids:
        raise DataError("dataset has no test split")
    stages = []
    extras = {}
    if scenario in ("SQ", "000Ex"):
        if not ds.queries or ds.docs is None:
            raise DataError(f"scenario {scenario} needs semantic query data")
        missing = [ev for ev in gt.events if ev not in ds.queries]
        if missing:
            raise DataError(f"no text query for event {missing[0]!r}")
        lists = _sq_lists(ds, test_ids, options)
        stages.append({"stage": "semantic_search", "model": options.model, "tau": options.tau})
        if scenario == "000Ex" and options.rerank:
            feats = _split(prepare_features(ds.features, options.efm), test_ids)
            extras["initial"] = lists

            def work(i, ev):
                return spar_rerank(lists[ev], feats, options.prf, event_seed(options.seed, i, 2))

            results = _map_events(work, gt.events, options.threads)
            extras["reranked"] = {ev: r.reranked for ev, r in zip(gt.events, results)}
            extras["traces"] = {ev: r.trace for ev, r in zip(gt.events, results)}
            lists = {ev: r.ranked for ev, r in zip(gt.events, results)}
            stages.append({"stage": "spar_rerank", **_options_dict(options.prf)})
    elif scenario in EXEMPLARS:
        features = prepare_features(ds.features, options.efm)
        trained = train_events(ds, scenario, options, features)
        stages.append({"stage": "train_event", "exemplars": EXEMPLARS[scenario], "kernel": options.kernel,
                       "efm": options.efm})
        train_ids = gt.split_ids("train")
        indexes = build_indexes(_split(features, train_ids), _split(features, test_ids), options, options.seed)
        test = score_events(trained, indexes, [F.feature_name for F in features], options)
        stages.append({"stage": "score", "codec": options.codec})
        lists, reports = fuse_events(trained, test, options, "mhlf")
        extras["fusion_reports"] = reports
        stages.append({"stage": "mhlf_fuse", **_options_dict(options.mhlf)})
        if scenario == "010Ex" and options.prf_010ex:
            feats = _split(features, test_ids)
            lists = {ev: spar_rerank(lists[ev], feats, options.prf, event_seed(options.seed, i, 2)).ranked
                     for i, ev in enumerate(gt.events)}
            stages.append({"stage": "spar_rerank"})
    else:
        raise ConfigError(f"unknown scenario {scenario!r}")
    value, per_event = mean_average_precision(lists, gt, return_per_event=True)
    return ScenarioResult(scenario, lists, per_event, value, stages, extras)


# --------------------------------------------------------------------------
# experiments


@dataclass
class RobustnessResult:
    rows: list  # (fraction, method, mean, ci_low, ci_high, trials)
    trial_maps: dict  # (fraction, method) -> list of MAP values


def ci95(values) -> tuple[float, float, float]:
    """Mean and normal-approximation 95% interval."""
    v = np.asarray(values, dtype=np.float64)
    mean = float(v.mean())
    if v.shape[0] < 2:
        return mean, mean, mean
    half = 1.959963984540054 * float(v.std(ddof=1)) / math.sqrt(v.shape[0])
    return mean, mean - half, mean + half


def _feature_of(row_name: str) -> str:
    return row_name.split(":", 1)[0]


def fusion_map(pairs: Mapping[str, tuple[ScoreMatrix, ScoreMatrix]], method: str, rows=None, seed=0,
               config: MhlfConfig = MhlfConfig()) -> float:
    """MAP over events of one fusion method, optionally on a subset of rows."""
    aps = []
    for i, ev in enumerate(sorted(pairs)):
        held, test = pairs[ev]
        if rows is not None:
            held, test = held.select_rows(rows), test.select_rows(rows)
        s = event_seed(seed, i, 1)
        if method == "mhlf":
            est = MultistageHybridFusion.from_config(dataclasses.replace(config, seed=s))
        elif method == "average":
            est = AverageFusion(config.normalization)
        elif method == "linreg":
            est = LinearRegressionFusion(config.normalization, random_state=s)
        else:
            raise ConfigError(f"unknown fusion method {method!r}")
        est.fit(held)
        ranked = est.fuse(test)
        positives = [v for v, y in zip(test.video_ids, test.labels) if y]
        aps.append(average_precision(ranked, positives))
    return float(np.mean(aps))


def robustness_experiment(pairs: Mapping[str, tuple[ScoreMatrix, ScoreMatrix]],
                          fractions: Sequence[float] = DEFAULT_FRACTIONS, trials: int = 60, seed: int = 0,
                          config: MhlfConfig = MhlfConfig(), methods=FUSION_METHODS) -> RobustnessResult:
    """Fuse random feature subsets; held-out and test matrices need labels.

    Rows are grouped by feature (the part of the row name before ``:``) and
    whole features are sampled.
    """
    first = next(iter(pairs.values()))[0]
    features = sorted({_feature_of(r) for r in first.row_names})
    if len(features) < 2:
        raise DataError("robustness experiment needs at least 2 features")
    for held, test in pairs.values():
        if test.labels is None or held.labels is None:
            raise DataError("score matrices need labels")
    rows_out, trial_maps = [], {}
    for fi, frac in enumerate(fractions):
        k = math.ceil(frac * len(features))
        if k < 2:
            warnings.warn(f"fraction {frac} leaves fewer than 2 features; skipped", stacklevel=2)
            continue
        if k == len(features):
            full = {m: fusion_map(pairs, m, None, seed, config) for m in methods}
            maps = {m: [full[m]] * trials for m in methods}
        else:
            maps = {m: [] for m in methods}
            for t in range(trials):
                rng = np.random.default_rng([seed, fi, t])
                chosen = set(features[j] for j in rng.choice(len(features), k, replace=False))
                rows = [r for r in first.row_names if _feature_of(r) in chosen]
                for m in methods:
                    maps[m].append(fusion_map(pairs, m, rows, seed + t, config))
        for m in methods:
            trial_maps[(frac, m)] = maps[m]
            mean, lo, hi = ci95(maps[m])
            if k == len(features):
                lo = hi = mean
            rows_out.append((frac, m, mean, lo, hi, trials))
    return RobustnessResult(rows_out, trial_maps)


def dataset_pairs(ds: Dataset, options: ScenarioOptions = ScenarioOptions(),
                  scenario="100Ex") -> dict[str, tuple[ScoreMatrix, ScoreMatrix]]:
    """Held-out and labeled test score matrices from a trained scenario."""
    features = prepare_features(ds.features, options.efm)
    trained = train_events(ds, scenario, options, features)
    gt = ds.ground_truth
    test_ids = gt.split_ids("test")
    test = score_events(trained, _split(features, test_ids), [F.feature_name for F in features], options)
    out = {}
    for ev, te in trained.items():
        m = test[ev]
        labels = np.array([v in gt.positives[ev] for v in m.video_ids])
        out[ev] = (te.heldout, ScoreMatrix(m.row_names, m.video_ids, m.values, labels, ev))
    return out


@dataclass
class DegradationResult:
    rows: list  # (variant, map, relative_delta, compression_ratio)
    sweep: list  # (codec, parameter, ratio, map)
    timings: dict


def _compression_ratio(options: ScenarioOptions, dims: Sequence[int]) -> float:
    if options.codec == "pq":
        bits = [8 * math.ceil(d / options.pq_d_sub) for d in dims]
    elif options.codec == "uq":
        bits = [int(math.ceil(math.log2(options.uq_bins))) * d for d in dims]
    else:
        return 1.0
    return float(32 * sum(dims) / sum(bits))


def degradation_experiment(ds: Dataset, variants: Sequence[str] = VARIANTS, sweep=True,
                           options: ScenarioOptions = ScenarioOptions()) -> DegradationResult:
    """100Ex MAP under kernel-map and codec approximations.

    Models are trained once per kernel setting on uncompressed training
    features; the variants differ only in how test videos are represented.
    """
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    gt = ds.ground_truth
    train_ids, test_ids = gt.split_ids("train"), gt.split_ids("test")
    settings, quantizers = {}, {}

    def setting(efm):
        if efm not in settings:
            opts = dataclasses.replace(options, efm=efm, kernel="linear" if efm else "chi2", codec="none")
            feats = prepare_features(ds.features, efm)
            settings[efm] = (opts, feats, train_events(ds, "100Ex", opts, feats), {})
        return settings[efm]

    def run(efm, codec, **kw):
        opts, feats, trained, fitted = setting(efm)
        opts = dataclasses.replace(opts, codec=codec, **kw)
        idx = build_indexes(_split(feats, train_ids), _split(feats, test_ids), opts, opts.seed, quantizers)
        t0 = time.perf_counter()
        test = score_events(trained, idx, [F.feature_name for F in feats], opts)
        elapsed = time.perf_counter() - t0
        lists, _ = fuse_events(trained, test, opts, "mhlf", fitted)
        ratio = _compression_ratio(opts, [F.d for F in feats])
        return mean_average_precision(lists, gt), ratio, elapsed

    spec = {"exact": (False, "none"), "efm": (True, "none"), "pq": (False, "pq"),
            "efm+pq": (True, "pq"), "uq": (True, "uq")}
    rows, timings, base = [], {}, None
    for v in variants:
        efm, codec = spec[v]
        value, ratio, elapsed = run(efm, codec)
        timings[v] = elapsed
        rows.append([v, value, None, ratio])
    maps = {r[0]: r[1] for r in rows}
    base = maps.get("exact")
    for r in rows:
        r[2] = (r[1] - base) / base if base else None
    sweep_rows = []
    if sweep:
        for d_sub in PQ_SWEEP:
            value, ratio, _ = run(True, "pq", pq_d_sub=d_sub)
            sweep_rows.append(("pq", d_sub, ratio, value))
        for k in UQ_SWEEP:
            value, ratio, _ = run(True, "uq", uq_bins=k)
            sweep_rows.append(("uq", k, ratio, value))
    return DegradationResult([tuple(r) for r in rows], sweep_rows, timings)


# --------------------------------------------------------------------------
# config files and run manifests


def parse_config_text(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"config line {n}: empty key")
        if key in out:
            raise ConfigError(f"config line {n}: duplicate key {key!r}")
        out[key] = value
    return out


def read_config(path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except UnicodeDecodeError:
        raise ConfigError(f"config {path} is not UTF-8") from None
    return parse_config_text(text)


def _coerce(value: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple) or default is None:
            items = [s.strip() for s in value.split(",") if s.strip()]
            if default and isinstance(default[0], tuple):
                return tuple(tuple(float(x) for x in item.split("/")) for item in items)
            if default and isinstance(default[0], str):
                return tuple(items)
            return tuple(float(x) if ("." in x or "e" in x.lower()) else int(x) for x in items)
        return value
    except ValueError:
        raise ConfigError(f"bad value {value!r} for {key}") from None


def _apply(cls, instance, values: Mapping[str, str], prefix: str):
    kw = {}
    for f in fields(cls):
        key = prefix + f.name
        if key in values:
            kw[f.name] = _coerce(values[key], getattr(instance, f.name), key)
    return dataclasses.replace(instance, **kw) if kw else instance


@dataclass(frozen=True)
class HarnessConfig:
    synth: SynthConfig = SynthConfig()
    scenario: ScenarioOptions = ScenarioOptions()
    ensemble: EnsembleConfig = EnsembleConfig()
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    trials: int = 60
    variants: tuple[str, ...] = VARIANTS

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))


_TOP_KEYS = {"fractions", "trials", "variants"}


def build_config(values: Mapping[str, str], seed: int | None = None, threads: int | None = None) -> HarnessConfig:
    """Typed configuration from flat keys.

    Bare keys name synthetic-data fields or ``fractions``/``trials``/
    ``variants``; ``scenario.``, ``mhlf.``, ``prf.`` and ``ensemble.``
    prefixes address the other groups.
    """
    known = {f.name for f in fields(SynthConfig)} | _TOP_KEYS
    for key in values:
        head = key.split(".", 1)[0]
        if "." in key and head in ("scenario", "mhlf", "prf", "ensemble"):
            continue
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        base_synth = SynthConfig()
        synth_vals = {k: v for k, v in values.items() if k not in _TOP_KEYS and "." not in k}
        synth = _apply(SynthConfig, base_synth, synth_vals, "")
        mhlf = _apply(MhlfConfig, MhlfConfig(), values, "mhlf.")
        prf = _apply(PrfConfig, PrfConfig(), values, "prf.")
        scen = _apply(ScenarioOptions, ScenarioOptions(), values, "scenario.")
        ens = _apply(EnsembleConfig, EnsembleConfig(), values, "ensemble.")
        top = _apply(HarnessConfig, HarnessConfig(), {k: v for k, v in values.items() if k in _TOP_KEYS}, "")
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    if seed is not None:
        synth = dataclasses.replace(synth, seed=seed)
        ens = dataclasses.replace(ens, seed=seed)
    scen = dataclasses.replace(scen, mhlf=mhlf, prf=prf, seed=synth.seed if seed is None else seed,
                               threads=threads or scen.threads)
    return dataclasses.replace(top, synth=synth, scenario=scen, ensemble=ens)


def config_from_dict(data: Mapping) -> HarnessConfig:
    """Inverse of :meth:`HarnessConfig.to_dict`."""
    def tup(x):
        return tuple(tup(i) for i in x) if isinstance(x, list) else x

    def make(cls, d):
        return cls(**{k: tup(v) for k, v in d.items()})

    scen = dict(data["scenario"])
    scen["mhlf"] = make(MhlfConfig, scen["mhlf"])
    scen["prf"] = make(PrfConfig, scen["prf"])
    return HarnessConfig(
        synth=SynthConfig.from_dict(data["synth"]),
        scenario=make(ScenarioOptions, scen),
        ensemble=make(EnsembleConfig, data["ensemble"]),
        fractions=tup(data["fractions"]),
        trials=int(data["trials"]),
        variants=tup(data["variants"]),
    )


def _options_dict(obj) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(obj)))


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


@dataclass
class RunManifest:
    """What was run, with which configuration, and which files it produced.

    ``threads`` is recorded but excluded from the hash: it cannot change the
    outputs.
    """

    command: str
    config: dict
    seeds: dict
    versions: dict
    outputs: list = field(default_factory=list)
    scenario: str | None = None
    data: str | None = None
    threads: int = 1

    @property
    def config_hash(self) -> str:
        config = json.loads(json.dumps(self.config))
        config.get("scenario", {}).pop("threads", None)
        payload = {"command": self.command, "config": config, "seeds": self.seeds,
                   "scenario": self.scenario, "data": self.data}
        return hashlib.sha256(_canonical(payload)).hexdigest()

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["config_hash"] = self.config_hash
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"manifest is not valid JSON: {exc}") from None
        stored = d.pop("config_hash", None)
        m = cls(**d)
        if stored is not None and stored != m.config_hash:
            raise DataError("manifest hash does not match its content")
        return m


def module_versions() -> dict:
    import numba
    import scipy
    import sklearn

    return {"cbvr": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "scikit-learn": sklearn.__version__, "numba": numba.__version__,
            "python": platform.python_version()}


def make_manifest(command: str, config: HarnessConfig, scenario=None, data=None) -> RunManifest:
    return RunManifest(command, config.to_dict(),
                       {"synth": config.synth.seed, "scenario": config.scenario.seed,
                        "ensemble": config.ensemble.seed},
                       module_versions(), [], scenario, data, config.scenario.threads)


# --------------------------------------------------------------------------
# report writers


def write_map_report(path, result: ScenarioResult, manifest_hash: str) -> None:
    payload = {ev: float(format_score(ap)) for ev, ap in sorted(result.ap.items())}
    payload["map"] = float(format_score(result.map))
    payload["manifest_hash"] = manifest_hash
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([format_score(x) if isinstance(x, float) else ("" if x is None else x) for x in r])
    return buf.getvalue()


def write_robustness_csv(path, result: RobustnessResult) -> None:
    Path(path).write_text(_csv_text(("fraction", "method", "mean_map", "ci95_low", "ci95_high", "trials"),
                                    result.rows), encoding="utf-8")


def write_degradation_csv(path, result: DegradationResult) -> None:
    Path(path).write_text(_csv_text(("variant", "map", "relative_delta", "compression_ratio"), result.rows),
                          encoding="utf-8")


def write_sweep_csv(path, result: DegradationResult) -> None:
    Path(path).write_text(_csv_text(("codec", "parameter", "compression_ratio", "map"), result.sweep),
                          encoding="utf-8")


def write_ranked_lists(directory, lists: Mapping[str, RankedList]) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for ev, ranked in sorted(lists.items()):
        p = directory / f"{ev}.tsv"
        write_scores_tsv(p, ranked)
        paths.append(p)
    return paths


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_trials_csv(path, result: RobustnessResult) -> None:
    rows = [(frac, m, t, v) for (frac, m), values in result.trial_maps.items() for t, v in enumerate(values)]
    Path(path).write_text(_csv_text(("fraction", "method", "trial", "map"), rows), encoding="utf-8")


def write_score_matrix_csv(path, matrix: ScoreMatrix) -> None:
    """Header ``video_id,label,<row names>``; one line per video; empty label if unknown."""
    header = ["video_id", "label", *matrix.row_names]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for j, v in enumerate(matrix.video_ids):
        label = "" if matrix.labels is None else int(matrix.labels[j])
        w.writerow([v, label, *(format_score(x) for x in matrix.values[:, j].tolist())])
    Path(path).write_text(f"# event_id={matrix.event_id}\n" + buf.getvalue(), encoding="utf-8")


def read_score_matrix_csv(path) -> ScoreMatrix:
    text = Path(path).read_text(encoding="utf-8")
    event_id = Path(path).stem
    lines = text.splitlines()
    if lines and lines[0].startswith("# event_id="):
        event_id = lines[0].split("=", 1)[1].strip()
        lines = lines[1:]
    rows = list(csv.reader(lines))
    if not rows or rows[0][:2] != ["video_id", "label"]:
        raise DataError(f"{path}: expected a 'video_id,label,...' header")
    names = tuple(rows[0][2:])
    body = rows[1:]
    try:
        values = np.array([[float(x) for x in r[2:]] for r in body]).reshape(len(body), len(names)).T
    except ValueError:
        raise DataError(f"{path}: malformed score value") from None
    raw = [r[1] for r in body]
    labels = None if all(x == "" for x in raw) else np.array([x == "1" for x in raw])
    return ScoreMatrix(names, tuple(r[0] for r in body), values, labels, event_id)
