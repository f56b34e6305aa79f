"""``cbvr`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 internal error.
Experiment commands write a ``manifest.json`` next to their outputs;
``cbvr replay`` reruns it.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import sys
import warnings
from pathlib import Path

import click
import numpy as np

from . import harness
from .core import (
    FeatureMatrix,
    ScoreMatrix,
    mean_average_precision,
    read_ground_truth_csv,
    read_scores_tsv,
    to_ranked_list,
    write_scores_tsv,
)
from .encoders import BowEncoder, FisherVectorEncoder, VladEncoder, read_descriptor_set
from .exceptions import CbvrError, ConfigError, DataError
from .fusion import (
    AverageFusion,
    LinearRegressionFusion,
    MultistageHybridFusion,
    fuse_ranked_lists,
    write_fusion_report,
)
from .learners import predict_scores, read_models, write_models
from .quantizers import CompressedIndex, ProductQuantizer, UniformQuantizer, index_read, index_write
from .reranking import spar_rerank, write_rerank_trace
from .semantic import semantic_search
from .synth import read_dataset, read_feature_matrix, write_dataset, write_feature_matrix

log = logging.getLogger("cbvr")

EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 2, 3, 4


class Context:
    def __init__(self, seed, config_path, out, threads):
        values = harness.read_config(config_path) if config_path else {}
        self.config = harness.build_config(values, seed=seed, threads=threads)
        self.out = Path(out)
        self.config_path = config_path

    def outdir(self) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out


pass_ctx = click.make_pass_decorator(Context)


@click.group()
@click.option("--seed", type=int, default=None, help="Master seed (overrides the config file).")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="Flat 'key = value' config file.")
@click.option("--out", type=click.Path(file_okay=False), default="cbvr-out", show_default=True)
@click.option("--threads", type=click.IntRange(min=1), default=None, help="Worker cap for per-event work.")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def cli(ctx, seed, config_path, out, threads, verbose):
    """Content-based video retrieval toolkit."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
    ctx.obj = Context(seed, config_path, out, threads)


def _dataset(ctx: Context, data):
    if data:
        return read_dataset(data)
    from .synth import synth_generate

    return synth_generate(ctx.config.synth)


def _write_manifest(ctx: Context, manifest: harness.RunManifest, outputs) -> Path:
    out = ctx.outdir()
    manifest.outputs = sorted(str(Path(p).relative_to(out)) for p in outputs)
    path = out / "manifest.json"
    path.write_text(manifest.to_json(), encoding="utf-8")
    return path


# --------------------------------------------------------------------------
# data


@cli.command()
@pass_ctx
def gen(ctx: Context):
    """Generate the synthetic benchmark into --out."""
    from .synth import synth_generate

    ds = synth_generate(ctx.config.synth)
    written = write_dataset(ctx.outdir(), ds)
    manifest = harness.make_manifest("gen", ctx.config)
    files = [p for p in ctx.out.rglob("*") if p.is_file() and p.name != "manifest.json"]
    _write_manifest(ctx, manifest, files)
    click.echo(f"wrote {len(written)} files to {ctx.out}")


@cli.command()
@click.argument("descriptor_files", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--method", type=click.Choice(["bow", "vlad", "fv"]), default="fv", show_default=True)
@click.option("--words", type=int, default=16, show_default=True, help="Codebook size or GMM components.")
@click.option("--pca-dim", type=int, default=None)
@click.option("--sted", is_flag=True, help="Append (x, y, t) after PCA.")
@click.option("--name", default="feature", show_default=True)
@pass_ctx
def encode(ctx: Context, descriptor_files, method, words, pca_dim, sted, name):
    """Encode descriptor files (one per video) into a feature file."""
    sets = [read_descriptor_set(p) for p in descriptor_files]
    seed = ctx.config.synth.seed
    if method == "bow":
        enc, kind = BowEncoder(words, pca_dim=pca_dim, sted=sted, random_state=seed), "histogram"
    elif method == "vlad":
        enc, kind = VladEncoder(words, pca_dim=pca_dim, sted=sted, random_state=seed), "dense"
    else:
        enc, kind = FisherVectorEncoder(words, pca_dim=pca_dim, sted=sted, random_state=seed), "dense"
    values = enc.fit(sets).transform(sets)
    ids = tuple(s.video_id or Path(p).stem for s, p in zip(sets, descriptor_files))
    path = ctx.outdir() / f"{name}.f32"
    write_feature_matrix(path, FeatureMatrix(name, ids, values.astype(np.float32), kind))
    click.echo(str(path))


@cli.command()
@click.argument("feature_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--codec", type=click.Choice(["pq", "uq"]), default="pq", show_default=True)
@click.option("--d-sub", type=int, default=8, show_default=True)
@click.option("--codewords", type=int, default=256, show_default=True)
@click.option("--bins", type=int, default=2, show_default=True)
@pass_ctx
def index(ctx: Context, feature_file, codec, d_sub, codewords, bins):
    """Compress a feature file into a searchable index."""
    F = read_feature_matrix(feature_file)
    if codec == "pq":
        q = ProductQuantizer(d_sub=d_sub, n_codewords=codewords, pad=True,
                             random_state=ctx.config.synth.seed).fit(F.values)
    else:
        q = UniformQuantizer(n_bins=bins).fit(F.values)
    idx = CompressedIndex.build(q, F)
    path = ctx.outdir() / f"{F.feature_name}.idx"
    index_write(path, idx)
    click.echo(f"{path} ({q.compression_ratio():g}x)")


# --------------------------------------------------------------------------
# training, scoring, fusion


@cli.command()
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--scenario", type=click.Choice(["010Ex", "100Ex"]), default="100Ex", show_default=True)
@pass_ctx
def train(ctx: Context, data, scenario):
    """Train per-event models; writes models/<event>.jsonl and heldout/<event>.csv."""
    opts = ctx.config.scenario
    if opts.kernel != "linear":
        raise ConfigError("only linear models can be written to disk; set scenario.kernel = linear")
    ds = read_dataset(data)
    trained = harness.train_events(ds, scenario, opts)
    out = ctx.outdir()
    (out / "models").mkdir(exist_ok=True)
    (out / "heldout").mkdir(exist_ok=True)
    for ev, te in sorted(trained.items()):
        write_models(out / "models" / f"{ev}.jsonl", [te.models[s] for s in te.heldout.row_names])
        harness.write_score_matrix_csv(out / "heldout" / f"{ev}.csv", te.heldout)
    click.echo(f"trained {len(trained)} events")


@cli.command()
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--models", "model_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--index-dir", type=click.Path(exists=True, file_okay=False), default=None,
              help="Score compressed indexes (<feature>.idx) instead of raw features.")
@pass_ctx
def score(ctx: Context, data, model_dir, index_dir):
    """Score test-split videos with trained models; writes test/<event>.csv."""
    ds = read_dataset(data)
    test_ids = ds.ground_truth.split_ids("test")
    feats = {F.feature_name: F.subset(test_ids) for F in harness.prepare_features(ds.features, ctx.config.scenario.efm)}
    sources = dict(feats)
    if index_dir:
        for name in feats:
            p = Path(index_dir) / f"{name}.idx"
            if p.exists():
                sources[name] = index_read(p).subset(test_ids)
    out = ctx.outdir() / "test"
    out.mkdir(exist_ok=True)
    paths = sorted(Path(model_dir).glob("*.jsonl"))
    if not paths:
        raise DataError(f"no model files in {model_dir}")
    for p in paths:
        models = read_models(p)
        rows, names, ids = [], [], None
        for m in models:
            if m.feature_name not in sources:
                raise DataError(f"no feature {m.feature_name!r} for model in {p.name}")
            s = predict_scores(m, sources[m.feature_name], m.event_id)
            rows.append(s.aligned(test_ids))
            names.append(m.source)
        M = ScoreMatrix(tuple(names), tuple(test_ids), np.vstack(rows), None, p.stem)
        harness.write_score_matrix_csv(out / f"{p.stem}.csv", M)
    click.echo(f"scored {len(paths)} events")


@cli.command()
@click.argument("inputs", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--method", type=click.Choice(["mhlf", "average", "linreg", "lists"]), default="mhlf",
              show_default=True)
@click.option("--heldout", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Held-out score matrix (CSV with labels) for learned fusion.")
@click.option("--weights", default=None, help="Comma-separated weights for --method lists.")
@pass_ctx
def fuse(ctx: Context, inputs, method, heldout, weights):
    """Fuse a test score matrix (learned methods) or ranked-list TSVs (lists)."""
    out = ctx.outdir()
    if method == "lists":
        lists = [to_ranked_list(read_scores_tsv(p)) for p in inputs]
        w = None if weights is None else [float(x) for x in weights.split(",")]
        fused = fuse_ranked_lists(lists, w, "fused")
        write_scores_tsv(out / "fused.tsv", fused)
        click.echo(str(out / "fused.tsv"))
        return
    if heldout is None:
        raise ConfigError(f"--heldout is required for --method {method}")
    if len(inputs) != 1:
        raise ConfigError("learned fusion takes one test score matrix")
    H = harness.read_score_matrix_csv(heldout)
    T = harness.read_score_matrix_csv(inputs[0])
    if method == "mhlf":
        est = MultistageHybridFusion.from_config(ctx.config.scenario.mhlf).fit(H)
        write_fusion_report(out / "fusion_report.json", {H.event_id: est.report()})
    elif method == "average":
        est = AverageFusion(ctx.config.scenario.mhlf.normalization).fit(H)
    else:
        est = LinearRegressionFusion(ctx.config.scenario.mhlf.normalization).fit(H)
    path = out / f"{Path(inputs[0]).stem}.tsv"
    write_scores_tsv(path, est.fuse(T, method))
    click.echo(str(path))


@cli.command()
@click.argument("initial", type=click.Path(exists=True, dir_okay=False))
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
@pass_ctx
def rerank(ctx: Context, initial, data):
    """Self-paced reranking of a ranked-list TSV over the dataset's test videos."""
    ds = read_dataset(data)
    event = Path(initial).stem
    ranked = to_ranked_list(read_scores_tsv(initial, event))
    feats = [F.subset(ranked.video_ids) for F in harness.prepare_features(ds.features, ctx.config.scenario.efm)]
    result = spar_rerank(ranked, feats, ctx.config.scenario.prf, ctx.config.scenario.seed)
    out = ctx.outdir()
    write_scores_tsv(out / f"{event}.tsv", result.ranked)
    trace = out / f"{event}.trace.jsonl"
    trace.unlink(missing_ok=True)
    write_rerank_trace(trace, event, result.trace)
    click.echo(str(out / f"{event}.tsv"))


@cli.command()
@click.argument("words", nargs=-1, required=True)
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--model", type=click.Choice(["vsm", "tfidf", "bm25", "lm"]), default=None)
@click.option("--tau", type=float, default=None)
@click.option("--name", default="query", show_default=True)
@pass_ctx
def search(ctx: Context, words, data, model, tau, name):
    """Text query over the dataset's test videos."""
    ds = read_dataset(data)
    opts = ctx.config.scenario
    docs = ds.docs.subset(ds.ground_truth.split_ids("test"))
    ranked = semantic_search(words, ds.similarity, docs, model or opts.model,
                             opts.tau if tau is None else tau, name)
    path = ctx.outdir() / f"{name}.tsv"
    write_scores_tsv(path, ranked)
    click.echo(str(path))


# --------------------------------------------------------------------------
# evaluation and experiments


@cli.command("eval")
@click.option("--data", type=click.Path(exists=True, file_okay=False), default=None,
              help="Dataset directory; default generates one from the config.")
@click.option("--scenario", type=click.Choice(["SQ", "000Ex", "010Ex", "100Ex"]), default=None)
@click.option("--lists", "list_dir", type=click.Path(exists=True, file_okay=False), default=None,
              help="Evaluate existing <event>.tsv lists instead of running a scenario.")
@pass_ctx
def eval_cmd(ctx: Context, data, scenario, list_dir):
    """Run a scenario (or score existing lists) and write a MAP report."""
    if list_dir:
        if not data:
            raise ConfigError("--lists needs --data for the ground truth")
        gt = read_ground_truth_csv(Path(data) / "ground_truth.csv")
        lists = {p.stem: to_ranked_list(read_scores_tsv(p, p.stem)) for p in sorted(Path(list_dir).glob("*.tsv"))}
        value, per_event = mean_average_precision(lists, gt, return_per_event=True)
        result = harness.ScenarioResult("lists", lists, per_event, value)
        path = ctx.outdir() / "map.json"
        harness.write_map_report(path, result, "")
        click.echo(f"MAP {value:.6f}")
        return
    if scenario is None:
        raise ConfigError("eval needs --scenario or --lists")
    outputs = run_eval(ctx, data, scenario)
    click.echo(f"MAP {json.loads(outputs[0].read_text())['map']:.6f}")


def run_eval(ctx: Context, data, scenario) -> list[Path]:
    ds = _dataset(ctx, data)
    manifest = harness.make_manifest("eval", ctx.config, scenario, data)
    result = harness.run_scenario(ds, scenario, ctx.config.scenario)
    out = ctx.outdir()
    report = out / "map.json"
    harness.write_map_report(report, result, manifest.config_hash)
    files = [report] + harness.write_ranked_lists(out / "lists", result.lists)
    if "fusion_reports" in result.extras:
        write_fusion_report(out / "fusion_report.json", result.extras["fusion_reports"], result.ap)
        files.append(out / "fusion_report.json")
    if "traces" in result.extras:
        trace = out / "rerank_trace.jsonl"
        trace.unlink(missing_ok=True)
        for ev in sorted(result.extras["traces"]):
            write_rerank_trace(trace, ev, result.extras["traces"][ev])
        files.append(trace)
    _write_manifest(ctx, manifest, files)
    return files


@cli.command("exp-robustness")
@click.option("--data", type=click.Path(exists=True, file_okay=False), default=None,
              help="Use 100Ex score matrices from this dataset instead of the score-ensemble generator.")
@pass_ctx
def exp_robustness(ctx: Context, data):
    """MAP of MHLF / average / linreg fusion on random feature subsets."""
    run_robustness(ctx, data)
    click.echo(str(ctx.out / "robustness.csv"))


def run_robustness(ctx: Context, data) -> list[Path]:
    cfg = ctx.config
    manifest = harness.make_manifest("exp-robustness", cfg, None, data)
    if data:
        pairs = harness.dataset_pairs(read_dataset(data), cfg.scenario)
    else:
        from .synth import score_ensemble

        pairs = score_ensemble(cfg.ensemble)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        result = harness.robustness_experiment(pairs, cfg.fractions, cfg.trials, cfg.scenario.seed,
                                               cfg.scenario.mhlf)
    out = ctx.outdir()
    files = [out / "robustness.csv", out / "robustness_trials.csv"]
    harness.write_robustness_csv(files[0], result)
    harness.write_trials_csv(files[1], result)
    _write_manifest(ctx, manifest, files)
    return files


@cli.command("exp-degradation")
@click.option("--data", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--no-sweep", is_flag=True, help="Skip the compression-ratio sweep.")
@pass_ctx
def exp_degradation(ctx: Context, data, no_sweep):
    """100Ex MAP under EFM / PQ / UQ approximations, plus the ratio sweep."""
    run_degradation(ctx, data, not no_sweep)
    click.echo(str(ctx.out / "degradation.csv"))


def run_degradation(ctx: Context, data, sweep=True) -> list[Path]:
    cfg = ctx.config
    manifest = harness.make_manifest("exp-degradation", cfg, "100Ex" if sweep else "100Ex:no-sweep", data)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        result = harness.degradation_experiment(_dataset(ctx, data), cfg.variants, sweep, cfg.scenario)
    out = ctx.outdir()
    files = [out / "degradation.csv"]
    harness.write_degradation_csv(files[0], result)
    if sweep:
        files.append(out / "sweep.csv")
        harness.write_sweep_csv(files[1], result)
    # wall-clock timings vary run to run, so they stay out of the manifest
    (out / "timings.csv").write_text(
        "variant,scoring_seconds\n" + "".join(f"{k},{v:.6f}\n" for k, v in result.timings.items()),
        encoding="utf-8")
    _write_manifest(ctx, manifest, files)
    return files


@cli.command()
@click.argument("manifest_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--check", is_flag=True, help="Compare the new outputs with the digests of the original run.")
@pass_ctx
def replay(ctx: Context, manifest_path, check):
    """Rerun an experiment from its manifest into --out."""
    manifest = harness.RunManifest.from_json(Path(manifest_path).read_text(encoding="utf-8"))
    files = replay_manifest(manifest, ctx.out, ctx.config.scenario.threads)
    if check:
        src = Path(manifest_path).parent
        bad = [p.relative_to(ctx.out) for p in files
               if harness.file_digest(p) != harness.file_digest(src / p.relative_to(ctx.out))]
        if bad:
            raise DataError(f"replay differs from the original run: {bad[0]}")
        click.echo(f"{len(files)} files identical")


def replay_manifest(manifest: harness.RunManifest, out, threads=None) -> list[Path]:
    config = harness.config_from_dict(manifest.config)
    if threads:
        config = dataclasses.replace(config, scenario=dataclasses.replace(config.scenario, threads=threads))
    ctx = Context.__new__(Context)
    ctx.config, ctx.out, ctx.config_path = config, Path(out), None
    if manifest.command == "eval":
        return run_eval(ctx, manifest.data, manifest.scenario)
    if manifest.command == "exp-robustness":
        return run_robustness(ctx, manifest.data)
    if manifest.command == "exp-degradation":
        return run_degradation(ctx, manifest.data, manifest.scenario != "100Ex:no-sweep")
    if manifest.command == "gen":
        from .synth import synth_generate

        write_dataset(ctx.outdir(), synth_generate(config.synth))
        files = [p for p in ctx.out.rglob("*") if p.is_file() and p.name != "manifest.json"]
        _write_manifest(ctx, manifest, files)
        return sorted(files)
    raise ConfigError(f"cannot replay command {manifest.command!r}")


def main(argv=None):
    try:
        cli.main(args=argv, prog_name="cbvr", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return EXIT_CONFIG
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_CONFIG
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        return EXIT_DATA
    except (CbvrError, AssertionError) as exc:
        click.echo(f"internal error: {exc}", err=True)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001  (anything else is a bug: report, exit 4)
        log.debug("unhandled", exc_info=True)
        click.echo(f"internal error: {type(exc).__name__}: {exc}", err=True)
        return EXIT_INTERNAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
