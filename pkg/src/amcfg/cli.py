"""Command-line interface: synth, run, ablate, sweep-k, viz, importance,
anchors-build.

Options come from built-in defaults, then an optional JSON/TOML config
file, then explicit flags (flags win). Exit codes: 0 success, 1 runtime
failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import gbdt as gbdt_mod
from .clustering import (
    assign,
    fit_kmeans,
    project_2d,
    save_cluster_model,
    write_projection_csv,
)
from .dataset_io import MODALITIES, Manifest, load_dataset
from .evaluate import (
    EvalError,
    PipelineConfig,
    clustering_chain,
    evaluate_holdout,
    group_kfold,
    make_llm_client,
    run_ablation,
    run_pipeline,
    sweep_csv,
    sweep_k,
    write_predictions_csv,
)
from .gbdt import GbdtParams
from .sem_anchors import (
    DEFAULT_TASKS,
    SEMANTIC_MODALITIES,
    TASKS,
    HashingEmbedder,
    LlmClientConfig,
    fit_semantic_table,
    save_semantic_table,
)
from .stat_anchors import fit_anchor_stats, save_anchor_stats
from .synth import SynthError, SynthSpec, generate_synthetic, write_split

SUPPRESS = argparse.SUPPRESS


class CliUsageError(Exception):
    pass


RUN_DEFAULTS = {
    "features": "orig,stat",
    "modalities": "",
    "k": 300,
    "svd_rank": 128,
    "folds": 5,
    "seed": 0,
    "llm": "stub",
    "llm_endpoint": "http://localhost:8080/v1/chat/completions",
    "llm_model": "gpt-4o",
    "llm_cache": "",
    "tasks": ",".join(DEFAULT_TASKS),
    "embed_dim": 384,
    "exemplars": 8,
    "learning_rate": 0.05,
    "num_leaves": 31,
    "n_rounds": 500,
    "min_samples_leaf": 20,
    "max_bins": 255,
    "early_stopping_rounds": 50,
    "shrinkage": False,
    "shrinkage_alpha": 10.0,
    "threads": 1,
}

SYNTH_DEFAULTS = {
    "n_users": 50,
    "posts_per_user": 20,
    "n_topics": 20,
    "drift": 0.4,
    "seed": 7,
    "noise": 0.2,
    "emb_noise": 0.25,
    "pop_mean": 6.0,
    "topic_spread": 1.8,
    "user_spread": 0.5,
    "text_dim": 16,
    "video_dim": 16,
    "audio_dim": 8,
}


def _load_config_file(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise CliUsageError(f"config file not found: {path}")
    text = p.read_text(encoding="utf-8")
    if p.suffix == ".toml":
        try:
            import tomllib  # py311+
        except ModuleNotFoundError:
            try:
                import tomli as tomllib  # type: ignore[no-redef]
            except ModuleNotFoundError:
                raise CliUsageError(
                    "TOML config needs Python 3.11+ or the tomli package; "
                    "use a JSON config instead"
                )
        return tomllib.loads(text)
    return json.loads(text)


def _merge_options(defaults: dict, args: argparse.Namespace) -> dict:
    """defaults < config file < explicitly passed flags."""
    merged = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        file_opts = _load_config_file(config_path)
        unknown = [k for k in file_opts if k not in defaults]
        if unknown:
            raise CliUsageError(f"unknown config keys {unknown}")
        merged.update(file_opts)
    merged.update({k: v for k, v in vars(args).items() if k in defaults})
    return merged


def _csv_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _build_pipeline_config(opts: dict, name: str = "") -> PipelineConfig:
    features = tuple(_csv_list(opts["features"]))
    modalities = tuple(_csv_list(opts["modalities"])) or None
    if modalities:
        bad = [m for m in modalities if m not in MODALITIES]
        if bad:
            raise CliUsageError(f"unknown modalities {bad}; valid: {MODALITIES}")
    tasks = tuple(_csv_list(opts["tasks"]))
    bad_tasks = [t for t in tasks if t not in TASKS]
    if bad_tasks:
        raise CliUsageError(f"unknown tasks {bad_tasks}; valid: {TASKS}")
    try:
        gbdt_params = GbdtParams(
            learning_rate=float(opts["learning_rate"]),
            num_leaves=int(opts["num_leaves"]),
            n_rounds=int(opts["n_rounds"]),
            min_samples_leaf=int(opts["min_samples_leaf"]),
            max_bins=int(opts["max_bins"]),
            early_stopping_rounds=int(opts["early_stopping_rounds"]),
            seed=int(opts["seed"]),
        )
        llm_config = LlmClientConfig(
            endpoint=opts["llm_endpoint"],
            model=opts["llm_model"],
            cache_dir=opts["llm_cache"] or None,
        )
        return PipelineConfig(
            features=features,
            modalities=modalities,
            k=int(opts["k"]),
            svd_rank=int(opts["svd_rank"]),
            gbdt=gbdt_params,
            llm=opts["llm"],
            llm_config=llm_config,
            embed_dim=int(opts["embed_dim"]),
            tasks=tasks,
            exemplars_per_cluster=int(opts["exemplars"]),
            shrinkage=bool(opts["shrinkage"]),
            shrinkage_alpha=float(opts["shrinkage_alpha"]),
            seed=int(opts["seed"]),
            name=name,
        )
    except (EvalError, gbdt_mod.GbdtError) as exc:
        raise CliUsageError(str(exc))


def _check_gen_feasible(config: PipelineConfig, dataset) -> None:
    if "gen" not in config.features:
        return
    enabled = config.modalities or dataset.modality_names()
    if not any(m in SEMANTIC_MODALITIES and m in dataset.matrices for m in enabled):
        raise CliUsageError(
            "feature group 'gen' requires at least one of the text/video/audio "
            "modalities to be present and enabled"
        )


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    d = RUN_DEFAULTS
    p.add_argument("--config", default=None, help="JSON or TOML config file; flags override it")
    p.add_argument("--features", default=SUPPRESS, help=f"feature groups, comma-separated (default: {d['features']})")
    p.add_argument("--modalities", default=SUPPRESS, help="restrict modalities, comma-separated (default: all present)")
    p.add_argument("--k", type=int, default=SUPPRESS, help=f"clusters per modality (default: {d['k']})")
    p.add_argument("--svd-rank", dest="svd_rank", type=int, default=SUPPRESS, help=f"SVD rank for text (default: {d['svd_rank']})")
    p.add_argument("--folds", type=int, default=SUPPRESS, help=f"group k-fold count (default: {d['folds']})")
    p.add_argument("--seed", type=int, default=SUPPRESS, help=f"global seed (default: {d['seed']})")
    p.add_argument("--llm", choices=["stub", "http", "http+stub"], default=SUPPRESS, help=f"LLM client (default: {d['llm']})")
    p.add_argument("--llm-endpoint", dest="llm_endpoint", default=SUPPRESS, help=f"chat endpoint URL (default: {d['llm_endpoint']})")
    p.add_argument("--llm-model", dest="llm_model", default=SUPPRESS, help=f"model name (default: {d['llm_model']})")
    p.add_argument("--llm-cache", dest="llm_cache", default=SUPPRESS, help="LLM response cache directory (default: none)")
    p.add_argument("--tasks", default=SUPPRESS, help=f"semantic tasks, comma-separated (default: {d['tasks']})")
    p.add_argument("--embed-dim", dest="embed_dim", type=int, default=SUPPRESS, help=f"semantic embedding width (default: {d['embed_dim']})")
    p.add_argument("--exemplars", type=int, default=SUPPRESS, help=f"exemplars per cluster digest (default: {d['exemplars']})")
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=SUPPRESS, help=f"GBDT learning rate (default: {d['learning_rate']})")
    p.add_argument("--num-leaves", dest="num_leaves", type=int, default=SUPPRESS, help=f"GBDT leaf budget (default: {d['num_leaves']})")
    p.add_argument("--n-rounds", dest="n_rounds", type=int, default=SUPPRESS, help=f"GBDT boosting rounds (default: {d['n_rounds']})")
    p.add_argument("--min-samples-leaf", dest="min_samples_leaf", type=int, default=SUPPRESS, help=f"min samples per leaf (default: {d['min_samples_leaf']})")
    p.add_argument("--max-bins", dest="max_bins", type=int, default=SUPPRESS, help=f"histogram bins (default: {d['max_bins']})")
    p.add_argument("--early-stopping-rounds", dest="early_stopping_rounds", type=int, default=SUPPRESS, help=f"0 disables (default: {d['early_stopping_rounds']})")
    p.add_argument("--shrinkage", dest="shrinkage", action="store_true", default=SUPPRESS, help="shrink small-cluster anchor means toward the global mean (default: off)")
    p.add_argument("--shrinkage-alpha", dest="shrinkage_alpha", type=float, default=SUPPRESS, help=f"shrinkage strength (default: {d['shrinkage_alpha']})")
    p.add_argument("--threads", type=int, default=SUPPRESS, help=f"max concurrent folds (default: {d['threads']})")


def cmd_synth(args: argparse.Namespace) -> int:
    opts = {**SYNTH_DEFAULTS, **{k: v for k, v in vars(args).items() if k in SYNTH_DEFAULTS}}
    try:
        spec = SynthSpec(
            n_users=int(opts["n_users"]),
            posts_per_user=int(opts["posts_per_user"]),
            n_topics=int(opts["n_topics"]),
            embed_dims={
                "text": int(opts["text_dim"]),
                "video": int(opts["video_dim"]),
                "audio": int(opts["audio_dim"]),
            },
            pop_mean=float(opts["pop_mean"]),
            topic_spread=float(opts["topic_spread"]),
            user_spread=float(opts["user_spread"]),
            noise_scale=float(opts["noise"]),
            emb_noise=float(opts["emb_noise"]),
            drift=float(opts["drift"]),
            seed=int(opts["seed"]),
        )
        train, test = generate_synthetic(spec)
    except SynthError as exc:
        raise CliUsageError(str(exc))
    out = Path(args.out)
    train_manifest = write_split(train, out / "train")
    test_manifest = write_split(test, out / "test")
    print(train_manifest)
    print(test_manifest)
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    opts = _merge_options(RUN_DEFAULTS, args)
    config = _build_pipeline_config(opts)
    dataset = load_dataset(Manifest.load(args.manifest))
    _check_gen_feasible(config, dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifact_dir = out / "artifacts" if args.artifacts else None
    if args.test_manifest:
        test = load_dataset(Manifest.load(args.test_manifest))
        report, rows = evaluate_holdout(dataset, test, config, artifact_dir=artifact_dir)
    else:
        plan = group_kfold(dataset.user_ids, n_folds=int(opts["folds"]), seed=config.seed)
        report, rows = run_pipeline(
            dataset, plan, config, artifact_dir=artifact_dir, n_jobs=int(opts["threads"])
        )
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    write_predictions_csv(rows, out / "predictions.csv")
    print(f"MAPE {report.mape:.3f}%  MAE {report.mae:.4f}  R2 {report.r2:.4f}  n={report.n}")
    print(out / "report.json")
    return 0


def _coerce_entry(entry: dict) -> dict:
    out = dict(entry)
    for key in ("features", "modalities", "tasks"):
        if key in out and isinstance(out[key], (list, tuple)):
            out[key] = ",".join(out[key])
    return out


def _ladder_configs(args: argparse.Namespace, opts: dict) -> list[tuple[str, PipelineConfig]]:
    if getattr(args, "preset", None) == "paper-tables":
        base = _build_pipeline_config(opts)
        rows: list[tuple[str, PipelineConfig]] = []
        for name, modalities in (
            ("user", ("user",)),
            ("user+text", ("user", "text")),
            ("user+text+video", ("user", "text", "video")),
            ("user+text+video+audio", ("user", "text", "video", "audio")),
        ):
            rows.append(("table2", replace(base, modalities=modalities, name=name)))
        for name, features in (
            ("orig", ("orig",)),
            ("orig+cluster_id", ("orig", "cluster_id")),
            ("orig+cluster_id+stat", ("orig", "cluster_id", "stat")),
        ):
            rows.append(("table3", replace(base, features=features, name=name)))
        for name, features in (
            ("stat_anchors", ("orig", "cluster_id", "stat")),
            ("stat+semantic", ("orig", "cluster_id", "stat", "gen")),
        ):
            rows.append(("table4", replace(base, features=features, name=name)))
        return rows
    if not args.ladder:
        raise CliUsageError("ablate needs --ladder FILE or --preset paper-tables")
    entries = json.loads(Path(args.ladder).read_text(encoding="utf-8"))
    if not isinstance(entries, list) or not entries:
        raise CliUsageError("ladder file must be a non-empty JSON list")
    rows = []
    for i, raw in enumerate(entries):
        entry = _coerce_entry(raw)
        unknown = [k for k in entry if k not in RUN_DEFAULTS and k != "name"]
        if unknown:
            raise CliUsageError(f"ladder entry {i}: unknown keys {unknown}")
        row_opts = {**opts, **{k: v for k, v in entry.items() if k != "name"}}
        rows.append(
            ("ladder", _build_pipeline_config(row_opts, name=entry.get("name", f"row{i}")))
        )
    return rows


def cmd_ablate(args: argparse.Namespace) -> int:
    opts = _merge_options(RUN_DEFAULTS, args)
    groups = _ladder_configs(args, opts)
    dataset = load_dataset(Manifest.load(args.manifest))
    test = load_dataset(Manifest.load(args.test_manifest)) if args.test_manifest else None
    plan = None
    if test is None:
        plan = group_kfold(dataset.user_ids, n_folds=int(opts["folds"]), seed=int(opts["seed"]))
    for _, config in groups:
        _check_gen_feasible(config, dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    by_table: dict[str, list[PipelineConfig]] = {}
    for table, config in groups:
        by_table.setdefault(table, []).append(config)
    for table, configs in by_table.items():
        report = run_ablation(dataset, configs, plan=plan, test=test)
        csv_path = out / f"ablation_{table}.csv"
        csv_path.write_text(report.to_csv(), encoding="utf-8")
        print(f"# {table}")
        print(report.to_table())
        print(csv_path)
    if getattr(args, "preset", None) == "paper-tables":
        base = _build_pipeline_config(opts)
        rows = sweep_k(dataset, base, ks=[100, 200, 300, 400, 500], plan=plan, test=test)
        (out / "ablation_table1.csv").write_text(
            sweep_csv(rows, base_config=base), encoding="utf-8"
        )
        print(out / "ablation_table1.csv")
    return 0


def cmd_sweep_k(args: argparse.Namespace) -> int:
    opts = _merge_options(RUN_DEFAULTS, args)
    ks = [int(v) for v in _csv_list(args.ks)]
    if not ks:
        raise CliUsageError("--ks must name at least one k")
    config = _build_pipeline_config(opts)
    dataset = load_dataset(Manifest.load(args.manifest))
    _check_gen_feasible(config, dataset)
    test = load_dataset(Manifest.load(args.test_manifest)) if args.test_manifest else None
    plan = None
    if test is None:
        plan = group_kfold(dataset.user_ids, n_folds=int(opts["folds"]), seed=config.seed)
    rows = sweep_k(dataset, config, ks=ks, plan=plan, test=test)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep_k.csv"
    path.write_text(sweep_csv(rows, base_config=config), encoding="utf-8")
    best = min(rows, key=lambda r: r["mape"])
    print(f"best k={best['k']} (MAPE {best['mape']:.3f}%)")
    print(path)
    return 0


def cmd_viz(args: argparse.Namespace) -> int:
    opts = _merge_options(RUN_DEFAULTS, args)
    config = _build_pipeline_config(opts)
    dataset = load_dataset(Manifest.load(args.manifest))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    modalities = config.modalities or dataset.modality_names()
    for m in modalities:
        if m not in dataset.matrices:
            raise CliUsageError(f"modality {m!r} not present in dataset")
        chain = clustering_chain(m, dataset, config)
        model = fit_kmeans(
            dataset.matrices[m], k=config.k_for(m), seed=config.seed,
            preprocessing=chain, modality=m,
        )
        labels = assign(model, dataset.matrices[m])
        rows = project_2d(dataset.matrices[m].data, labels, seed=config.seed)
        write_projection_csv(rows, out / f"clusters_{m}.csv")
        print(out / f"clusters_{m}.csv")
    return 0


def cmd_importance(args: argparse.Namespace) -> int:
    model = gbdt_mod.load_model(args.model)
    pairs = gbdt_mod.feature_importance(model, kind=args.kind)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("feature,score\n")
        for name, score in pairs:
            fh.write(f"{name},{score!r}\n")
    print(out)
    return 0


def cmd_anchors_build(args: argparse.Namespace) -> int:
    opts = _merge_options(RUN_DEFAULTS, args)
    config = _build_pipeline_config(opts)
    dataset = load_dataset(Manifest.load(args.manifest))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    modalities = [
        m for m in dataset.modality_names()
        if config.modalities is None or m in config.modalities
    ]
    if not modalities:
        raise CliUsageError("no enabled modality present in dataset")
    models = {}
    labels = {}
    for m in modalities:
        chain = clustering_chain(m, dataset, config)
        models[m] = fit_kmeans(
            dataset.matrices[m], k=config.k_for(m), seed=config.seed,
            preprocessing=chain, modality=m,
        )
        labels[m] = assign(models[m], dataset.matrices[m])
        save_cluster_model(models[m], out / f"cluster_{m}.json")
    stats = {
        m: fit_anchor_stats(labels[m], dataset.popularity, k=models[m].k,
                            shrinkage=config.shrinkage,
                            shrinkage_alpha=config.shrinkage_alpha)
        for m in modalities
    }
    save_anchor_stats(stats, out / "anchors.json")
    print(out / "anchors.json")
    if args.semantic:
        sem_modalities = [m for m in SEMANTIC_MODALITIES if m in models]
        if not sem_modalities:
            raise CliUsageError("--semantic requires a text/video/audio modality")
        table = fit_semantic_table(
            dataset,
            {m: models[m] for m in sem_modalities},
            {m: labels[m] for m in sem_modalities},
            client=make_llm_client(config),
            embedder=HashingEmbedder(config.embed_dim),
            tasks=config.tasks,
            exemplars_per_cluster=config.exemplars_per_cluster,
        )
        save_semantic_table(table, out / "semantic.json")
        print(out / "semantic.json")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="amcfg",
        description="Anchored multi-modal clustering and feature generation "
        "pipeline for popularity regression",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic drift train/test pair")
    d = SYNTH_DEFAULTS
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-users", dest="n_users", type=int, default=SUPPRESS, help=f"default: {d['n_users']}")
    p.add_argument("--posts-per-user", dest="posts_per_user", type=int, default=SUPPRESS, help=f"default: {d['posts_per_user']}")
    p.add_argument("--n-topics", dest="n_topics", type=int, default=SUPPRESS, help=f"default: {d['n_topics']}")
    p.add_argument("--drift", type=float, default=SUPPRESS, help=f"test-time drift in [0,1] (default: {d['drift']})")
    p.add_argument("--seed", type=int, default=SUPPRESS, help=f"default: {d['seed']}")
    p.add_argument("--noise", type=float, default=SUPPRESS, help=f"popularity noise scale (default: {d['noise']})")
    p.add_argument("--emb-noise", dest="emb_noise", type=float, default=SUPPRESS, help=f"embedding noise scale (default: {d['emb_noise']})")
    p.add_argument("--pop-mean", dest="pop_mean", type=float, default=SUPPRESS, help=f"default: {d['pop_mean']}")
    p.add_argument("--topic-spread", dest="topic_spread", type=float, default=SUPPRESS, help=f"default: {d['topic_spread']}")
    p.add_argument("--user-spread", dest="user_spread", type=float, default=SUPPRESS, help=f"default: {d['user_spread']}")
    p.add_argument("--text-dim", dest="text_dim", type=int, default=SUPPRESS, help=f"default: {d['text_dim']}")
    p.add_argument("--video-dim", dest="video_dim", type=int, default=SUPPRESS, help=f"default: {d['video_dim']}")
    p.add_argument("--audio-dim", dest="audio_dim", type=int, default=SUPPRESS, help=f"default: {d['audio_dim']}")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="cross-validated (or holdout) pipeline run")
    p.add_argument("--manifest", required=True, help="training dataset manifest")
    p.add_argument("--test-manifest", dest="test_manifest", default=None, help="holdout manifest (skips CV)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--artifacts", action="store_true", help="serialize per-fold fitted artifacts")
    _add_run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run a ladder of configs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--test-manifest", dest="test_manifest", default=None)
    p.add_argument("--ladder", default=None, help="JSON list of config rows")
    p.add_argument("--preset", choices=["paper-tables"], default=None, help="shipped ladder preset")
    p.add_argument("--out", required=True)
    _add_run_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-k", help="re-run the pipeline across cluster counts")
    p.add_argument("--manifest", required=True)
    p.add_argument("--test-manifest", dest="test_manifest", default=None)
    p.add_argument("--ks", required=True, help="comma-separated cluster counts")
    p.add_argument("--out", required=True)
    _add_run_flags(p)
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("viz", help="per-modality 2D cluster projections")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_run_flags(p)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("importance", help="feature importance CSV from a saved model")
    p.add_argument("--model", required=True, help="gbdt model JSON")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--kind", choices=["gain", "splits"], default="gain")
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("anchors-build", help="fit and serialize cluster + anchor tables")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--semantic", action="store_true", help="also build the semantic table")
    _add_run_flags(p)
    p.set_defaults(func=cmd_anchors_build)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliUsageError, EvalError, SynthError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def console_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
