"""End-to-end acceptance checks.

Every check prints one ``PASS``/``FAIL`` line (even under output capture) and
then asserts, so a failing check shows both in the log and as a test failure.
Runtime budgets are part of each check.
"""

import json
import math
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
from scipy import sparse
from scipy.optimize import minimize_scalar

from cbvr.cli import main
from cbvr.core import (
    FeatureMatrix,
    GroundTruth,
    RankedList,
    ScoreList,
    ScoreMatrix,
    ap_of_scores,
    average_precision,
    mean_average_precision,
    to_ranked_list,
)
from cbvr.fusion import MhlfConfig, mhlf_fuse, pca_tree_cluster
from cbvr.harness import (
    ScenarioOptions,
    degradation_experiment,
    file_digest,
    fusion_map,
    robustness_experiment,
    run_scenario,
)
from cbvr.kernel_maps import HomogeneousMapConfig, efm_map, exact_kernel
from cbvr.learners import KernelRidgeDual, RidgeRegression, ridge_gradient, ridge_solve
from cbvr.quantizers import pq_train
from cbvr.reranking import PrfConfig, prf_rerank, spar_regularizer, spar_rerank, spar_weights
from cbvr.semantic import score_modality
from cbvr.synth import EnsembleConfig, SynthConfig, score_ensemble, synth_generate


def verdict(capsys, label, ok, detail, elapsed=None, budget=None):
    if budget is not None:
        in_time = elapsed < budget
        detail = f"{detail}; {elapsed:.1f}s (budget {budget:g}s)"
        ok = ok and in_time
    with capsys.disabled():
        print(f"\n[{label}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def default_benchmark():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return synth_generate(SynthConfig(seed=0))


# --------------------------------------------------------------------------


def brute_force_ap(ids, scores, positives):
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i].encode("utf-8")))
    hits, total = 0, 0.0
    for rank, i in enumerate(order, 1):
        if ids[i] in positives:
            hits += 1
            total += hits / rank
    return total / len(positives)


def test_metric_oracle(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    lists, truth, expected = {}, {}, []
    for k in range(200):
        n = int(rng.integers(1, 60))
        ids = [f"v{j:03d}" for j in rng.permutation(n)]
        # integer scores force plenty of ties
        scores = rng.integers(0, 6, n).astype(float)
        labels = rng.random(n) < 0.3
        labels[rng.integers(n)] = True
        positives = {v for v, y in zip(ids, labels) if y}
        ref = brute_force_ap(ids, scores, positives)
        ranked = to_ranked_list(ScoreList(f"E{k}", "s", tuple(ids), scores))
        worst = max(worst, abs(average_precision(ranked, positives) - ref))
        order = np.argsort(ids, kind="stable")
        worst = max(worst, abs(ap_of_scores(scores[order], labels[order]) - ref))
        lists[f"E{k}"], truth[f"E{k}"] = ranked, positives
        expected.append(ref)
    map_err = abs(mean_average_precision(lists, GroundTruth(truth)) - np.mean(expected))
    perfect = RankedList("e", ("a", "b", "c", "d"), np.array([4.0, 3.0, 2.0, 1.0]))
    ok = worst <= 1e-12 and map_err <= 1e-12 and average_precision(perfect, {"a", "b"}) == 1.0
    verdict(capsys, "metric-oracle", ok, f"max AP error {worst:.1e}, MAP error {map_err:.1e}",
            time.perf_counter() - start, 1)


def test_pq_exactness_chain(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    X = rng.normal(size=(1000, 64)).astype(np.float32)
    q = pq_train(X, d_sub=8, k=256, seed=0)
    codes = rng.integers(0, 256, size=(200, q.n_subblocks)).astype(np.uint8)
    aligned = q.decode(codes)
    identity = np.array_equal(q.encode(aligned), codes)
    video_codes = q.encode(X)
    w = rng.normal(size=64)
    lut = q.dot_scores(w, 0.25, video_codes)
    dense = q.decode(video_codes).astype(np.float64) @ w + 0.25
    err = float(np.abs(lut - dense).max())
    ratio = q.compression_ratio(32)
    ok = identity and err <= 1e-5 and ratio == 32.0
    verdict(capsys, "pq-exactness", ok, f"identity={identity}, LUT error {err:.1e}, ratio {ratio:g}x",
            time.perf_counter() - start, 10)


@pytest.mark.slow
def test_degradation_under_approximation(capsys, default_benchmark):
    start = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = degradation_experiment(default_benchmark, sweep=False, options=ScenarioOptions(seed=0))
    maps = {r[0]: r[1] for r in res.rows}
    ok = maps["efm+pq"] >= 0.95 * maps["exact"] and maps["pq"] >= 0.97 * maps["exact"]
    detail = ", ".join(f"{k} {v:.4f}" for k, v in maps.items())
    detail += f"; efm+pq/exact {maps['efm+pq'] / maps['exact']:.3f}, pq/exact {maps['pq'] / maps['exact']:.3f}"
    verdict(capsys, "degradation", ok, detail, time.perf_counter() - start, 300)


@pytest.mark.slow
def test_compression_sweep(capsys, default_benchmark):
    start = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = degradation_experiment(default_benchmark, variants=("exact",), sweep=True,
                                     options=ScenarioOptions(seed=0))
    pq = sorted((ratio, m) for codec, _, ratio, m in res.sweep if codec == "pq")
    uq32 = [m for codec, _, ratio, m in res.sweep if codec == "uq" and ratio == 32.0][0]
    pq32 = dict(pq)[32.0]
    monotone = all(a[1] >= b[1] for a, b in zip(pq, pq[1:]))
    ok = abs(pq32 - uq32) <= 0.03 and monotone and [r for r, _ in pq] == [8.0, 16.0, 32.0, 64.0]
    detail = "PQ " + ", ".join(f"{r:g}x {m:.4f}" for r, m in pq) + f"; UQ 32x {uq32:.4f}, |PQ-UQ| {abs(pq32 - uq32):.4f}"
    verdict(capsys, "compression-sweep", ok, detail, time.perf_counter() - start, 600)


def test_efm_approximation(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    pairs = [(rng.dirichlet(np.ones(32)), rng.dirichlet(np.ones(32))) for _ in range(100)]

    def mean_err(order):
        cfg = HomogeneousMapConfig(order=order, period=0.5)
        return float(np.mean([abs(efm_map(x, cfg) @ efm_map(y, cfg) - exact_kernel(x, y)) / exact_kernel(x, y)
                              for x, y in pairs]))

    errs = [mean_err(n) for n in range(5)]
    monotone = all(a > b for a, b in zip(errs, errs[1:]))
    cfg = HomogeneousMapConfig()
    homog = 0.0
    for x, _ in pairs[:20]:
        for alpha in (0.1, 3.0, 40.0):
            homog = max(homog, float(np.abs(efm_map(alpha * x, cfg) - np.sqrt(alpha) * efm_map(x, cfg)).max()))
    ok = errs[1] <= 0.05 and monotone and homog <= 1e-9
    detail = ("mean error by order 0..4: " + ", ".join(f"{e:.4f}" for e in errs)
              + f"; monotone={monotone}; componentwise homogeneity residual {homog:.2e}")
    verdict(capsys, "efm-approximation", ok, detail, time.perf_counter() - start, 5)


def test_learner_oracles(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    X = rng.normal(size=(120, 8))
    y = np.sign(X @ rng.normal(size=8) + 0.2 * rng.normal(size=120))
    w, b = ridge_solve(X, y, 0.0)
    ref, *_ = np.linalg.lstsq(np.hstack([X, np.ones((120, 1))]), y, rcond=None)
    lsq = float(np.abs(np.append(w, b) - ref).max())
    Xw = rng.normal(size=(30, 60))
    yw = np.sign(rng.normal(size=30))
    wd, _ = ridge_solve(Xw, yw, 0.5)
    Xc = Xw - Xw.mean(0)
    wp = np.linalg.solve(Xc.T @ Xc + 0.5 * np.eye(60), Xc.T @ (yw - yw.mean()))
    primal_dual = float(np.abs(wd - wp).max())
    Xt = rng.normal(size=(40, 8))
    kr = KernelRidgeDual(0.3).fit(X @ X.T, y).decision_function(Xt @ X.T)
    rr = RidgeRegression(0.3).fit(X, y).decision_function(Xt)
    kernel_gap = float(np.abs(kr - rr).max())
    v = rng.random(120) + 0.1
    w2, b2 = ridge_solve(X, y, 2.0, sample_weight=v)
    gw, gb = ridge_gradient(X, y, w2, b2, 2.0, v)
    grad = max(float(np.abs(gw).max()), abs(float(gb)))
    ok = lsq <= 1e-9 and primal_dual <= 1e-7 and kernel_gap <= 1e-7 and grad <= 1e-6
    verdict(capsys, "learner-oracles", ok,
            f"lstsq {lsq:.1e}, primal/dual {primal_dual:.1e}, linear KRR vs ridge {kernel_gap:.1e}, gradient {grad:.1e}",
            time.perf_counter() - start, 10)


@pytest.mark.slow
def test_mhlf_dominance(capsys):
    start = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        # 60 seeded draws of the full 47-row ensemble
        wins = []
        for seed in range(60):
            pairs = score_ensemble(EnsembleConfig(seed=seed))
            m, a, l = (fusion_map(pairs, k, seed=seed) for k in ("mhlf", "average", "linreg"))
            wins.append(m >= a and m >= l)
        # random feature subsets of one ensemble
        res = robustness_experiment(score_ensemble(EnsembleConfig(seed=0)), trials=60, seed=0)
    fractions = sorted({f for f, _ in res.trial_maps}, reverse=True)
    dominates, lines = [], []
    for f in fractions:
        m, a, l = (np.array(res.trial_maps[(f, k)]) for k in ("mhlf", "average", "linreg"))
        dominates.append(m.mean() >= a.mean())
        ci = {r[1]: r[2:5] for r in res.rows if r[0] == f}
        lines.append(f"{f:.0%}: MHLF {ci['mhlf'][0]:.4f} [{ci['mhlf'][1]:.4f}, {ci['mhlf'][2]:.4f}]"
                     f" average {ci['average'][0]:.4f} [{ci['average'][1]:.4f}, {ci['average'][2]:.4f}]"
                     f" linreg {ci['linreg'][0]:.4f} [{ci['linreg'][1]:.4f}, {ci['linreg'][2]:.4f}];"
                     f" MHLF best in {np.mean((m >= a) & (m >= l)):.0%} of subset trials")
    with capsys.disabled():
        print("\n  " + "\n  ".join(lines))
    win_rate = float(np.mean(wins))
    ok = win_rate >= 0.8 and all(dominates) and fractions[0] == 1.0 and fractions[-1] == 0.3
    verdict(capsys, "mhlf-dominance", ok,
            f"MHLF >= average and linreg on {win_rate:.0%} of 60 seeded ensembles; "
            f"mean-dominates average at every fraction: {all(dominates)}",
            time.perf_counter() - start, 900)


def test_essential_feature_recovery(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    n = 400
    A, B = rng.normal(size=n), rng.normal(size=n)
    B -= (A @ B) / (A @ A) * A
    values = np.vstack([A + 0.3 * rng.normal(size=n) for _ in range(5)] + [B + 0.3 * rng.normal(size=n) for _ in range(5)])
    ids = tuple(f"v{i:04d}" for i in range(n))
    names = tuple(f"r{i}" for i in range(10))
    ess = pca_tree_cluster(ScoreMatrix(names, ids, values), leaf_size=5)
    corr = np.abs(np.corrcoef(np.vstack([ess.values, A, B]))[: ess.n_rows, ess.n_rows:])
    recovered = ess.n_rows == 2 and bool(np.all(corr.max(1) > 0.95)) and set(corr.argmax(1)) == {0, 1}
    labels = A > np.quantile(A, 0.9)
    held = ScoreMatrix(names, ids, values, labels)
    test_values = values + rng.normal(size=values.shape)
    base = mhlf_fuse(held, labels, ScoreMatrix(names, ids, test_values), MhlfConfig(leaf_size=5))
    invariant = True
    for r in range(10):
        dn = names + ("dup",)
        fused = mhlf_fuse(ScoreMatrix(dn, ids, np.vstack([values, values[r]]), labels), labels,
                          ScoreMatrix(dn, ids, np.vstack([test_values, test_values[r]])), MhlfConfig(leaf_size=5))
        invariant &= fused.video_ids == base.video_ids
    verdict(capsys, "essential-features", recovered and invariant,
            f"{ess.n_rows} essential rows, best correlations {np.round(corr.max(1), 3).tolist()}, "
            f"invariant to each duplicated row: {invariant}", time.perf_counter() - start, 30)


def test_spar_properties(capsys):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        lam1 = rng.uniform(0.05, 3.0)
        lam2 = rng.uniform(0.01, 0.99) * lam1
        loss = rng.uniform(0.0, 1.2 * lam1)
        f = lambda v: v * loss + spar_regularizer(np.array([v]), lam1, lam2, "mixture")
        res = minimize_scalar(f, bounds=(0.0, 1.0), method="bounded", options={"xatol": 1e-12})
        numeric = min((res.x, 0.0, 1.0), key=f)
        worst = max(worst, abs(spar_weights([loss], lam1, lam2)[0] - numeric))
    n = 400
    ids = tuple(f"v{i:04d}" for i in range(n))
    labels = rng.random(n) < 0.1
    feats = [FeatureMatrix(f"f{k}", ids, rng.normal(size=(n, 8)) + labels[:, None] * 0.8) for k in range(2)]
    initial = to_ranked_list(ScoreList("E1", "sq", ids, labels + rng.normal(scale=0.8, size=n)))
    steps_ok = True
    for scheme in ("mixture", "binary"):
        r = spar_rerank(initial, feats, PrfConfig(scheme=scheme, inner_steps=4), seed=1)
        for obj in r.objective_history:
            steps_ok &= all(b <= a + 1e-9 * max(1.0, abs(a)) for a, b in zip(obj, obj[1:]))
    cfg = PrfConfig(scheme="binary", schedule_mode="absolute", schedule=((np.inf, 0.0),) * 2, blend="none")
    spar, prf = spar_rerank(initial, feats, cfg, seed=2), prf_rerank(initial, feats, cfg, seed=2)
    reduction = spar.ranked.video_ids == prf.video_ids and float(np.abs(spar.ranked.scores - prf.scores).max()) <= 1e-9
    try:
        PrfConfig(iterations=3)
        capped = False
    except Exception:
        capped = True
    ok = worst <= 1e-6 and steps_ok and reduction and capped
    verdict(capsys, "spar-properties", ok,
            f"closed form vs numeric {worst:.1e}, objective non-increasing {steps_ok}, "
            f"infinite threshold equals plain PRF {reduction}, iteration cap enforced {capped}")


@pytest.mark.slow
def test_reranking_gain(capsys):
    start = time.perf_counter()
    initial, final, lines, blend_ok = [], [], [], True
    for seed in range(5):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ds = synth_generate(SynthConfig(seed=seed))
            res = run_scenario(ds, "000Ex", ScenarioOptions(seed=seed))
        gt = ds.ground_truth
        m0 = mean_average_precision(res.extras["initial"], gt)
        m1 = mean_average_precision(res.extras["reranked"], gt)
        initial.append(m0)
        final.append(res.map)
        blend_ok &= res.map >= min(m0, m1)
        lines.append(f"seed {seed}: initial {m0:.4f}, reranked {m1:.4f}, blended {res.map:.4f}")
    with capsys.disabled():
        print("\n  " + "\n  ".join(lines))
    gain = np.mean(final) / np.mean(initial) - 1
    verdict(capsys, "reranking-gain", gain >= 0.10 and blend_ok,
            f"relative MAP gain {gain:+.1%}, blend never below its worse input: {blend_ok}",
            time.perf_counter() - start, 300)


def hand_bm25(docs, query, k1=1.2, b=0.75):
    N = len(docs)
    avgdl = sum(map(sum, docs)) / N
    out = []
    for d in docs:
        s = 0.0
        for t, q in enumerate(query):
            df = sum(1 for x in docs if x[t] > 0)
            if q and d[t]:
                idf = math.log((N - df + 0.5) / (df + 0.5) + 1)
                s += q * idf * d[t] * (k1 + 1) / (d[t] + k1 * (1 - b + b * sum(d) / avgdl))
        out.append(s)
    return out


def hand_tfidf(docs, query):
    N = len(docs)
    df = [sum(1 for x in docs if x[t] > 0) for t in range(len(query))]
    nq = math.sqrt(sum(q * q for q in query))
    out = []
    for d in docs:
        w = [d[t] * math.log(N / df[t]) if df[t] else 0.0 for t in range(len(query))]
        nw = math.sqrt(sum(x * x for x in w))
        out.append(sum(a * q for a, q in zip(w, query)) / (nw * nq) if nw else 0.0)
    return out


def hand_lm(docs, query, lam=0.5):
    total = sum(map(sum, docs))
    out = []
    for d in docs:
        s = 0.0
        for t, q in enumerate(query):
            if q:
                pc = sum(x[t] for x in docs) / total
                s += q * math.log((1 - lam) * d[t] / sum(d) + lam * pc)
        out.append(s)
    return out


@pytest.mark.slow
def test_retrieval_fixtures_and_scenario_ordering(capsys):
    start = time.perf_counter()
    docs = [[2, 0, 1, 0], [0, 3, 0, 1], [1, 1, 1, 1], [0, 0, 4, 0], [1, 0, 0, 2]]
    query = [1.0, 0.0, 0.5, 0.0]
    D = sparse.csr_matrix(np.array(docs, dtype=float))
    q = np.array(query)
    fixture_err = max(
        float(np.abs(score_modality(q, D, model) - np.array(ref(docs, query))).max())
        for model, ref in (("bm25", hand_bm25), ("tfidf", hand_tfidf), ("lm", hand_lm))
    )
    toy = score_modality(np.array([1.0, 0.0]), sparse.csr_matrix(np.array([[2.0, 0.0], [0.0, 2.0]])), "bm25")[0]
    ordered, lines = 0, []
    for seed in range(5):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ds = synth_generate(SynthConfig(seed=seed))
            opts = ScenarioOptions(seed=seed)
            m = {s: run_scenario(ds, s, opts).map for s in ("100Ex", "010Ex", "000Ex")}
        ordered += m["100Ex"] > m["010Ex"] > m["000Ex"]
        lines.append(f"seed {seed}: " + ", ".join(f"{k} {v:.4f}" for k, v in m.items()))
    with capsys.disabled():
        print("\n  " + "\n  ".join(lines))
    # the quoted 0.95307 is ln(2) * 1.375 = 0.9530771 truncated to five decimals
    toy_ok = abs(toy - math.log(2) * 1.375) <= 1e-9 and abs(toy - 0.95307) < 1e-5
    ok = fixture_err <= 1e-9 and toy_ok and ordered >= 4
    verdict(capsys, "retrieval-and-ordering", ok,
            f"fixture error {fixture_err:.1e}, BM25 toy {toy:.7f}, ordering holds in {ordered}/5 seeds",
            time.perf_counter() - start, 120)


SMALL_CFG = """\
n_events = 3
n_videos = 700
n_features = 6
groups = 2, 2, 1, 1
histogram_features = 2
positives_per_event = 100
test_positives_per_event = 8
trials = 4
fractions = 1.0, 0.6
ensemble.n_events = 3
ensemble.groups = 2, 2, 1
ensemble.heldout_videos = 150
ensemble.test_videos = 300
"""


@pytest.mark.slow
def test_cli_reproducibility(capsys, tmp_path):
    cfg = tmp_path / "small.cfg"
    cfg.write_text(SMALL_CFG)
    data = tmp_path / "data"
    runs = [("gen", [])] + [("eval", ["--data", str(data), "--scenario", s]) for s in ("SQ", "000Ex", "010Ex", "100Ex")]
    runs += [("exp-robustness", []), ("exp-degradation", ["--data", str(data)])]
    bad = []
    for i, (command, extra) in enumerate(runs):
        out = data if command == "gen" else tmp_path / f"run{i}"
        if main(["--config", str(cfg), "--out", str(out), command, *extra]) != 0:
            bad.append(f"{command} failed")
            continue
        manifest = json.loads((out / "manifest.json").read_text())
        for threads in ("1", "3"):
            again = tmp_path / f"replay{i}-{threads}"
            if main(["--out", str(again), "--threads", threads, "replay", str(out / "manifest.json")]) != 0:
                bad.append(f"replay of {command} failed")
                continue
            for rel in manifest["outputs"]:
                if file_digest(out / rel) != file_digest(again / rel):
                    bad.append(f"{command}: {rel} differs with {threads} threads")
    verdict(capsys, "reproducibility", not bad,
            f"{len(runs)} experiments replayed at 1 and 3 threads" + (f"; {bad}" if bad else ", all outputs byte-identical"))
