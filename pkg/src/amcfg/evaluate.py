"""Group k-fold splitting, metrics, pipeline orchestration, and reports.

Two evaluation modes share the same per-fit protocol (preprocessing,
clustering, anchor tables, semantic tables, and the booster are all fitted
on training rows only):

* ``run_pipeline``: group k-fold cross-validation over one dataset.
* ``evaluate_holdout``: fit on one dataset, score another (the drift
  scenario produced by the synthetic generator).
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import gbdt as gbdt_mod
from .clustering import (
    ClusterModel,
    LabelVector,
    assign,
    fit_kmeans,
    save_cluster_model,
)
from .dataset_io import MODALITIES, Dataset, EmbeddingMatrix, write_embedding_matrix
from .preprocess import PreprocessChain, fit_standardizer, fit_truncated_svd
from .sem_anchors import (
    DEFAULT_TASKS,
    SEMANTIC_MODALITIES,
    HashingEmbedder,
    HttpLlmClient,
    LlmClientConfig,
    SemanticTable,
    StubLlmClient,
    fit_semantic_table,
    lookup_semantic_features,
    save_semantic_table,
)
from .stat_anchors import (
    AnchorStats,
    fit_anchor_stats,
    lookup_stat_features,
    save_anchor_stats,
)

FEATURE_GROUPS = ("orig", "cluster_id", "stat", "gen")
MAPE_EPS = 1e-8

R2_FOOTNOTE = (
    "R^2 = 1 - SS_res/SS_tot with SS_tot taken about the mean of the observed y"
)


class EvalError(Exception):
    pass


class TooFewGroups(EvalError):
    pass


class LengthMismatch(EvalError):
    pass


class EmptyInput(EvalError):
    pass


@dataclass
class FoldPlan:
    n_folds: int
    assignments: np.ndarray
    seed: int

    def __post_init__(self):
        self.assignments = np.asarray(self.assignments, dtype=np.int64)

    def train_test(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        return (
            np.flatnonzero(self.assignments != fold),
            np.flatnonzero(self.assignments == fold),
        )


def group_kfold(user_ids, n_folds: int = 5, seed: int = 0) -> FoldPlan:
    """Assign whole users to folds: shuffle users with a seeded RNG, then
    place each on the currently smallest fold (by sample count)."""
    user_ids = list(user_ids)
    if n_folds < 2:
        raise EvalError(f"n_folds must be >= 2, got {n_folds}")
    distinct = list(dict.fromkeys(user_ids))
    if len(distinct) < n_folds:
        raise TooFewGroups(
            f"{len(distinct)} distinct users cannot fill {n_folds} folds"
        )
    counts = {u: 0 for u in distinct}
    for u in user_ids:
        counts[u] += 1
    rng = np.random.default_rng(seed)
    order = [distinct[i] for i in rng.permutation(len(distinct))]
    fold_sizes = np.zeros(n_folds, dtype=np.int64)
    fold_of_user: dict[str, int] = {}
    for u in order:
        f = int(np.argmin(fold_sizes))
        fold_of_user[u] = f
        fold_sizes[f] += counts[u]
    assignments = np.array([fold_of_user[u] for u in user_ids], dtype=np.int64)
    for f in range(n_folds):
        if not np.any(assignments == f):
            raise EvalError(f"fold {f} is empty")
    return FoldPlan(n_folds=n_folds, assignments=assignments, seed=seed)


def _check_pair(y, yhat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise LengthMismatch(f"y has shape {y.shape}, yhat {yhat.shape}")
    if y.size == 0:
        raise EmptyInput("empty metric input")
    return y, yhat


def mae(y, yhat) -> float:
    y, yhat = _check_pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def mape(y, yhat) -> float:
    """Mean absolute percentage error, in percent, with an epsilon guard on
    the denominator (a warning reports how often the guard fired)."""
    y, yhat = _check_pair(y, yhat)
    denom = np.maximum(np.abs(y), MAPE_EPS)
    guarded = int(np.sum(np.abs(y) < MAPE_EPS))
    if guarded:
        warnings.warn(f"MAPE epsilon guard triggered for {guarded} of {y.size} samples")
    return float(np.mean(np.abs(y - yhat) / denom) * 100.0)


def r2(y, yhat) -> float:
    y, yhat = _check_pair(y, yhat)
    ss_res = float(np.sum((y - yhat) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        if ss_res == 0.0:
            return 0.0
        raise EvalError("R^2 undefined: constant target with nonzero residuals")
    return 1.0 - ss_res / ss_tot


@dataclass
class PipelineConfig:
    """Everything a pipeline run depends on, for reproducible reports."""

    features: tuple[str, ...] = ("orig", "stat")
    modalities: tuple[str, ...] | None = None  # None = all present
    k: int = 300
    k_overrides: dict[str, int] = field(default_factory=dict)
    svd_rank: int = 128
    gbdt: gbdt_mod.GbdtParams = field(default_factory=gbdt_mod.GbdtParams)
    llm: str = "stub"  # stub | http | http+stub
    llm_config: LlmClientConfig = field(default_factory=LlmClientConfig)
    embed_dim: int = 384
    tasks: tuple[str, ...] = DEFAULT_TASKS
    exemplars_per_cluster: int = 8
    shrinkage: bool = False
    shrinkage_alpha: float = 10.0
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        bad = [f for f in self.features if f not in FEATURE_GROUPS]
        if bad:
            raise EvalError(f"unknown feature groups {bad}; valid: {FEATURE_GROUPS}")
        if not self.features:
            raise EvalError("at least one feature group must be enabled")

    def k_for(self, modality: str) -> int:
        return int(self.k_overrides.get(modality, self.k))

    def fingerprint(self) -> dict:
        return {
            "features": list(self.features),
            "modalities": None if self.modalities is None else list(self.modalities),
            "k": self.k,
            "k_overrides": dict(sorted(self.k_overrides.items())),
            "svd_rank": self.svd_rank,
            "gbdt": self.gbdt.to_dict(),
            "llm": self.llm,
            "llm_model": self.llm_config.model,
            "llm_temperature": self.llm_config.temperature,
            "embed_dim": self.embed_dim,
            "tasks": list(self.tasks),
            "exemplars_per_cluster": self.exemplars_per_cluster,
            "shrinkage": self.shrinkage,
            "shrinkage_alpha": self.shrinkage_alpha,
            "seed": self.seed,
            "name": self.name,
        }

    def fingerprint_hash(self) -> str:
        blob = json.dumps(self.fingerprint(), sort_keys=True).encode("utf-8")
        return hashlib.blake2b(blob, digest_size=6).hexdigest()


@dataclass
class MetricReport:
    mae: float
    mape: float
    r2: float
    n: int
    per_fold: list[dict]
    fingerprint: dict
    footer: dict

    def to_dict(self) -> dict:
        return {
            "mae": self.mae,
            "mape": self.mape,
            "r2": self.r2,
            "n": self.n,
            "per_fold": self.per_fold,
            "fingerprint": self.fingerprint,
            "footer": self.footer,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


@dataclass
class _FoldModels:
    """Everything fitted on one training fold."""

    modalities: list[str]
    cluster_models: dict[str, ClusterModel]
    anchor_stats: dict[str, AnchorStats]
    semantic_table: SemanticTable | None
    booster: gbdt_mod.BoostedModel | None = None


def make_llm_client(config: PipelineConfig):
    if config.llm == "stub":
        return StubLlmClient()
    if config.llm == "http":
        return HttpLlmClient(config.llm_config)
    if config.llm == "http+stub":
        return HttpLlmClient(config.llm_config, fallback=StubLlmClient())
    raise EvalError(f"unknown llm mode {config.llm!r}")


def clustering_chain(modality: str, train: Dataset, config: PipelineConfig) -> PreprocessChain | None:
    data = train.matrices[modality].data
    if modality == "text":
        rank = min(config.svd_rank, data.shape[0], data.shape[1])
        return PreprocessChain([fit_truncated_svd(data, rank=rank, seed=config.seed)])
    if modality in ("user", "post"):
        return PreprocessChain([fit_standardizer(data)])
    return None


def _fit_fold(train: Dataset, config: PipelineConfig) -> _FoldModels:
    present = [
        m
        for m in MODALITIES
        if m in train.matrices
        and (config.modalities is None or m in config.modalities)
    ]
    if not present:
        raise EvalError("no enabled modality present in dataset")

    cluster_models: dict[str, ClusterModel] = {}
    train_labels: dict[str, LabelVector] = {}
    for m in present:
        chain = clustering_chain(m, train, config)
        model = fit_kmeans(
            train.matrices[m],
            k=config.k_for(m),
            seed=config.seed,
            preprocessing=chain,
            modality=m,
        )
        cluster_models[m] = model
        train_labels[m] = assign(model, train.matrices[m])

    y_train = train.popularity
    anchor_stats = {
        m: fit_anchor_stats(
            train_labels[m],
            y_train,
            k=cluster_models[m].k,
            shrinkage=config.shrinkage,
            shrinkage_alpha=config.shrinkage_alpha,
        )
        for m in present
    }

    semantic_table = None
    if "gen" in config.features:
        sem_present = [m for m in SEMANTIC_MODALITIES if m in cluster_models]
        if not sem_present:
            raise EvalError(
                "feature group 'gen' needs at least one of the text/video/audio "
                "modalities"
            )
        semantic_table = fit_semantic_table(
            train,
            {m: cluster_models[m] for m in sem_present},
            {m: train_labels[m] for m in sem_present},
            client=make_llm_client(config),
            embedder=HashingEmbedder(config.embed_dim),
            tasks=config.tasks,
            exemplars_per_cluster=config.exemplars_per_cluster,
        )

    return _FoldModels(
        modalities=present,
        cluster_models=cluster_models,
        anchor_stats=anchor_stats,
        semantic_table=semantic_table,
    )


def _assemble_features(
    dataset: Dataset, models: _FoldModels, config: PipelineConfig
) -> tuple[np.ndarray, list[str]]:
    labels = {
        m: assign(models.cluster_models[m], dataset.matrices[m])
        for m in models.modalities
    }
    blocks: list[np.ndarray] = []
    names: list[str] = []
    if "orig" in config.features:
        for m in models.modalities:
            data = np.asarray(dataset.matrices[m].data, dtype=np.float64)
            blocks.append(data)
            names.extend(f"orig.{m}.{i}" for i in range(data.shape[1]))
    if "cluster_id" in config.features:
        for m in models.modalities:
            blocks.append(labels[m].labels.astype(np.float64)[:, None])
            names.append(f"cluster.{m}")
    if "stat" in config.features:
        block = lookup_stat_features(labels, models.anchor_stats)
        blocks.append(block.matrix)
        names.extend(block.column_names)
    if "gen" in config.features:
        sem_labels = {m: labels[m] for m in SEMANTIC_MODALITIES if m in labels}
        block = lookup_semantic_features(sem_labels, models.semantic_table)
        blocks.append(block.matrix)
        names.extend(block.column_names)
    return np.hstack(blocks), names


def _save_fold_artifacts(
    directory: Path,
    fold: int,
    models: _FoldModels,
    X_train: np.ndarray,
) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for m, cm in models.cluster_models.items():
        save_cluster_model(cm, directory / f"fold{fold}_cluster_{m}.json")
    save_anchor_stats(models.anchor_stats, directory / f"fold{fold}_anchors.json")
    if models.semantic_table is not None:
        save_semantic_table(models.semantic_table, directory / f"fold{fold}_semantic.json")
    if models.booster is not None:
        gbdt_mod.save_model(models.booster, directory / f"fold{fold}_gbdt.json")
    write_embedding_matrix(
        EmbeddingMatrix(None, X_train), directory / f"fold{fold}_train_features.amcf"
    )


def _fit_and_score_fold(
    train: Dataset,
    test: Dataset,
    config: PipelineConfig,
    fold: int,
    artifact_dir: Path | None,
) -> tuple[np.ndarray, _FoldModels, list[str]]:
    models = _fit_fold(train, config)
    X_train, feature_names = _assemble_features(train, models, config)
    X_test, _ = _assemble_features(test, models, config)
    models.booster = gbdt_mod.train(
        X_train, train.popularity, config.gbdt, feature_names=feature_names
    )
    yhat = gbdt_mod.predict(models.booster, X_test)
    if artifact_dir is not None:
        _save_fold_artifacts(Path(artifact_dir), fold, models, X_train)
    return yhat, models, feature_names


def _finalize_report(
    rows: list[dict], per_fold: list[dict], config: PipelineConfig, n_folds: int
) -> MetricReport:
    y = np.array([r["y"] for r in rows])
    yhat = np.array([r["yhat"] for r in rows])
    return MetricReport(
        mae=mae(y, yhat),
        mape=mape(y, yhat),
        r2=r2(y, yhat),
        n=len(rows),
        per_fold=per_fold,
        fingerprint={
            **config.fingerprint(),
            "fingerprint_hash": config.fingerprint_hash(),
            "n_folds": n_folds,
        },
        footer={"r2_definition": R2_FOOTNOTE, "metrics_pooled_over": "test folds"},
    )


def run_pipeline(
    dataset: Dataset,
    plan: FoldPlan,
    config: PipelineConfig,
    artifact_dir: str | Path | None = None,
    n_jobs: int = 1,
) -> tuple[MetricReport, list[dict]]:
    """Group k-fold evaluation. Returns the report and per-row prediction
    dicts (post_id, user_id, fold, y, yhat) ordered by fold then row.
    Folds are independent; ``n_jobs`` > 1 runs them on a thread pool."""
    if len(plan.assignments) != dataset.n:
        raise LengthMismatch(
            f"plan covers {len(plan.assignments)} rows, dataset has {dataset.n}"
        )

    def one_fold(fold: int):
        train_idx, test_idx = plan.train_test(fold)
        train = dataset.subset(train_idx)
        test = dataset.subset(test_idx)
        yhat, _, _ = _fit_and_score_fold(
            train, test, config, fold, Path(artifact_dir) if artifact_dir else None
        )
        return test_idx, test.popularity, yhat

    if n_jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(one_fold, range(plan.n_folds)))
    else:
        results = [one_fold(f) for f in range(plan.n_folds)]

    rows: list[dict] = []
    per_fold: list[dict] = []
    for fold, (test_idx, y_test, yhat) in enumerate(results):
        for i, row_idx in enumerate(test_idx):
            rec = dataset.records[row_idx]
            rows.append(
                {
                    "post_id": rec.post_id,
                    "user_id": rec.user_id,
                    "fold": fold,
                    "y": float(y_test[i]),
                    "yhat": float(yhat[i]),
                }
            )
        per_fold.append(
            {
                "fold": fold,
                "n": int(len(test_idx)),
                "mae": mae(y_test, yhat),
                "mape": mape(y_test, yhat),
                "r2": r2(y_test, yhat),
            }
        )
    return _finalize_report(rows, per_fold, config, plan.n_folds), rows


def evaluate_holdout(
    train: Dataset,
    test: Dataset,
    config: PipelineConfig,
    artifact_dir: str | Path | None = None,
) -> tuple[MetricReport, list[dict]]:
    """Fit every stage on ``train`` and score ``test`` (drift scenario)."""
    yhat, _, _ = _fit_and_score_fold(
        train, test, config, 0, Path(artifact_dir) if artifact_dir else None
    )
    y_test = test.popularity
    rows = [
        {
            "post_id": rec.post_id,
            "user_id": rec.user_id,
            "fold": 0,
            "y": float(y_test[i]),
            "yhat": float(yhat[i]),
        }
        for i, rec in enumerate(test.records)
    ]
    per_fold = [
        {
            "fold": 0,
            "n": test.n,
            "mae": mae(y_test, yhat),
            "mape": mape(y_test, yhat),
            "r2": r2(y_test, yhat),
        }
    ]
    return _finalize_report(rows, per_fold, config, 1), rows


def write_predictions_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("post_id,user_id,fold,y,yhat\n")
        for r in rows:
            fh.write(f"{r['post_id']},{r['user_id']},{r['fold']},{r['y']!r},{r['yhat']!r}\n")


def read_predictions_csv(path: str | Path) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            parts = line.rstrip("\n").split(",")
            row = dict(zip(header, parts))
            row["fold"] = int(row["fold"])
            row["y"] = float(row["y"])
            row["yhat"] = float(row["yhat"])
            rows.append(row)
    return rows


@dataclass
class AblationRow:
    name: str
    mape: float
    mae: float
    r2: float
    fingerprint_hash: str


@dataclass
class AblationReport:
    rows: list[AblationRow]

    def to_csv(self) -> str:
        lines = ["config,mape,mae,r2,fingerprint"]
        for r in self.rows:
            lines.append(f"{r.name},{r.mape!r},{r.mae!r},{r.r2!r},{r.fingerprint_hash}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        width = max([len("config")] + [len(r.name) for r in self.rows])
        lines = [f"{'config':<{width}}  {'MAPE%':>8}  {'MAE':>8}  {'R2':>8}"]
        for r in self.rows:
            lines.append(
                f"{r.name:<{width}}  {r.mape:>8.3f}  {r.mae:>8.4f}  {r.r2:>8.4f}"
            )
        return "\n".join(lines)


def _evaluate(train, test, plan, config) -> MetricReport:
    if test is None:
        report, _ = run_pipeline(train, plan, config)
    else:
        report, _ = evaluate_holdout(train, test, config)
    return report


def run_ablation(
    train: Dataset,
    configs: list[PipelineConfig],
    plan: FoldPlan | None = None,
    test: Dataset | None = None,
) -> AblationReport:
    """One pipeline run per config, in input order. Provide either a fold
    plan (CV mode) or a drift test set (holdout mode)."""
    if not configs:
        raise EvalError("ablation needs at least one config")
    if (plan is None) == (test is None):
        raise EvalError("provide exactly one of plan (CV) or test (holdout)")
    rows = []
    for i, config in enumerate(configs):
        report = _evaluate(train, test, plan, config)
        rows.append(
            AblationRow(
                name=config.name or f"config{i}",
                mape=report.mape,
                mae=report.mae,
                r2=report.r2,
                fingerprint_hash=config.fingerprint_hash(),
            )
        )
    return AblationReport(rows=rows)


def sweep_k(
    train: Dataset,
    base_config: PipelineConfig,
    ks: list[int],
    plan: FoldPlan | None = None,
    test: Dataset | None = None,
) -> list[dict]:
    """Re-run the pipeline for each k, everything else fixed."""
    if not ks:
        raise EvalError("sweep needs at least one k")
    out = []
    for k in ks:
        config = replace(base_config, k=k, k_overrides={}, name=f"k={k}")
        report = _evaluate(train, test, plan, config)
        out.append({"k": k, "mape": report.mape, "mae": report.mae, "r2": report.r2})
    return out


def sweep_csv(rows: list[dict], base_config: PipelineConfig | None = None) -> str:
    lines = ["k,mape,mae,r2"]
    for r in rows:
        lines.append(f"{r['k']},{r['mape']!r},{r['mae']!r},{r['r2']!r}")
    if base_config is not None:
        lines.append(
            f"# fingerprint={base_config.fingerprint_hash()} seed={base_config.seed}"
        )
    return "\n".join(lines) + "\n"
