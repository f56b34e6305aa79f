import dataclasses
import json

import numpy as np
import pytest

from cbvr.core import ScoreMatrix
from cbvr.exceptions import ConfigError, DataError
from cbvr.harness import (
    HarnessConfig,
    RunManifest,
    ScenarioOptions,
    build_config,
    ci95,
    config_from_dict,
    degradation_experiment,
    make_manifest,
    parse_config_text,
    read_score_matrix_csv,
    robustness_experiment,
    run_scenario,
    write_score_matrix_csv,
)
from cbvr.synth import EnsembleConfig, SynthConfig, score_ensemble, synth_generate

SMALL = SynthConfig(n_events=2, n_videos=500, n_features=4, groups=(2, 2), histogram_features=2,
                    positives_per_event=100, test_positives_per_event=8)


@pytest.fixture(scope="module")
def small():
    return synth_generate(SMALL)


def test_parse_config_text():
    text = "# comment\nn_events = 3\n\nscenario.model = lm  # trailing\n"
    assert parse_config_text(text) == {"n_events": "3", "scenario.model": "lm"}
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text("a = 1\na = 2\n")
    with pytest.raises(ConfigError, match="line 1"):
        parse_config_text("just words\n")


def test_build_config_types_and_overrides():
    cfg = build_config({"n_events": "3", "groups": "1, 2", "n_features": "3", "histogram_features": "1",
                        "scenario.efm": "false", "prf.schedule": "90/60, 95/70", "trials": "5"},
                       seed=7, threads=2)
    assert cfg.synth.n_events == 3 and cfg.synth.groups == (1, 2) and cfg.synth.seed == 7
    assert cfg.scenario.efm is False and cfg.scenario.seed == 7 and cfg.scenario.threads == 2
    assert cfg.scenario.prf.schedule == ((90.0, 60.0), (95.0, 70.0))
    assert cfg.trials == 5
    with pytest.raises(ConfigError, match="unknown config key"):
        build_config({"colour": "red"})
    with pytest.raises(ConfigError, match="bad value"):
        build_config({"n_events": "many"})


def test_config_dict_round_trip():
    cfg = build_config({"scenario.model": "tfidf"}, seed=3)
    assert config_from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_manifest_hash_ignores_threads_and_detects_edits():
    m1 = make_manifest("eval", build_config({}, threads=1), "100Ex")
    m2 = make_manifest("eval", build_config({}, threads=4), "100Ex")
    assert m1.config_hash == m2.config_hash
    assert make_manifest("eval", build_config({}, seed=1), "100Ex").config_hash != m1.config_hash
    back = RunManifest.from_json(m1.to_json())
    assert back.config_hash == m1.config_hash
    tampered = json.loads(m1.to_json())
    tampered["scenario"] = "010Ex"
    with pytest.raises(DataError, match="hash"):
        RunManifest.from_json(json.dumps(tampered))


def test_score_matrix_csv_round_trip(tmp_path):
    m = ScoreMatrix(("a:krr", "b:svm"), ("v1", "v2", "v3"), np.array([[0.5, -1.25, 3.0], [1e-9, 2.0, 0.0]]),
                    np.array([True, False, True]), "E7")
    write_score_matrix_csv(tmp_path / "m.csv", m)
    back = read_score_matrix_csv(tmp_path / "m.csv")
    assert (back.row_names, back.video_ids, back.event_id) == (m.row_names, m.video_ids, "E7")
    np.testing.assert_allclose(back.values, m.values, rtol=1e-8)
    np.testing.assert_array_equal(back.labels, m.labels)
    (tmp_path / "bad.csv").write_text("id,score\nv1,1\n")
    with pytest.raises(DataError):
        read_score_matrix_csv(tmp_path / "bad.csv")


def test_ci95():
    assert ci95([2.0]) == (2.0, 2.0, 2.0)
    mean, lo, hi = ci95([1.0, 2.0, 3.0, 4.0])
    assert mean == 2.5
    assert hi - mean == pytest.approx(1.959963984540054 * np.std([1, 2, 3, 4], ddof=1) / 2)
    assert mean - lo == pytest.approx(hi - mean)


@pytest.mark.parametrize("scenario", ["SQ", "000Ex", "010Ex", "100Ex"])
def test_run_scenario_produces_full_lists(small, scenario):
    res = run_scenario(small, scenario, ScenarioOptions(svm_epochs=2))
    test_ids = set(small.ground_truth.split_ids("test"))
    assert set(res.lists) == set(small.ground_truth.events)
    for ranked in res.lists.values():
        assert set(ranked.video_ids) == test_ids
    assert res.map == pytest.approx(np.mean(list(res.ap.values())))
    assert 0 < res.map <= 1
    with pytest.raises(ConfigError):
        run_scenario(small, "5Ex")


def test_run_scenario_is_deterministic_across_threads(small):
    a = run_scenario(small, "000Ex", ScenarioOptions(threads=1))
    b = run_scenario(small, "000Ex", ScenarioOptions(threads=3))
    for ev in a.lists:
        assert a.lists[ev].video_ids == b.lists[ev].video_ids
        np.testing.assert_array_equal(a.lists[ev].scores, b.lists[ev].scores)


def test_robustness_experiment_shape():
    pairs = score_ensemble(EnsembleConfig(groups=(2, 2, 1), n_events=2, heldout_videos=120, test_videos=200))
    res = robustness_experiment(pairs, fractions=(1.0, 0.5), trials=3, seed=0)
    assert [(r[0], r[1]) for r in res.rows] == [(f, m) for f in (1.0, 0.5) for m in ("mhlf", "average", "linreg")]
    full = [r for r in res.rows if r[0] == 1.0]
    assert all(r[3] == r[2] == r[4] for r in full)
    assert all(len(v) == 3 for v in res.trial_maps.values())
    with pytest.raises(DataError):
        unlabeled = {k: (h, dataclasses.replace(t, labels=None)) for k, (h, t) in pairs.items()}
        robustness_experiment(unlabeled, fractions=(1.0,), trials=1)


def test_degradation_experiment_small(small):
    # 256 PQ codewords need at least 256 training videos
    ds = synth_generate(dataclasses.replace(SMALL, n_videos=700))
    res = degradation_experiment(ds, ("exact", "pq", "uq"), sweep=False, options=ScenarioOptions(svm_epochs=2))
    assert [r[0] for r in res.rows] == ["exact", "pq", "uq"]
    assert res.rows[0][2] == 0.0 and res.rows[0][3] == 1.0
    assert res.rows[1][3] == 32.0 and res.rows[2][3] == 32.0
    with pytest.raises(ConfigError):
        degradation_experiment(small, ("jpeg",), sweep=False)


def test_default_config_is_valid():
    cfg = HarnessConfig()
    assert sum(cfg.synth.groups) == cfg.synth.n_features
    assert cfg.trials == 60
