"""Per-modality k-means (k-means++ init, Lloyd iterations) and 2D projection."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset_io import EmbeddingMatrix, read_embedding_matrix, write_embedding_matrix
from .preprocess import (
    PreprocessChain,
    Standardizer,
    SvdModel,
    fit_truncated_svd,
    load_svd,
    save_svd,
)


class ClusteringError(Exception):
    pass


class DimensionMismatch(ClusteringError):
    pass


@dataclass
class ClusterModel:
    modality: str | None
    k: int
    centroids: np.ndarray
    preprocessing: PreprocessChain | None
    inertia: float
    n_iter: int
    seed: int


@dataclass
class LabelVector:
    modality: str | None
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)


def _as_array(matrix) -> np.ndarray:
    data = matrix.data if isinstance(matrix, EmbeddingMatrix) else matrix
    return np.asarray(data, dtype=np.float64)


def _nearest(data: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Labels and squared distances to the nearest centroid.

    Ties resolve to the lowest cluster index (argmin picks the first
    minimum).
    """
    d2 = (
        np.sum(data**2, axis=1)[:, None]
        - 2.0 * data @ centroids.T
        + np.sum(centroids**2, axis=1)[None, :]
    )
    np.maximum(d2, 0.0, out=d2)
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(len(data)), labels]


def _kmeans_plusplus(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = data.shape[0]
    centroids = np.empty((k, data.shape[1]), dtype=np.float64)
    centroids[0] = data[rng.integers(n)]
    d2 = np.sum((data - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all mass already covered; fall back to uniform picks
            centroids[i] = data[rng.integers(n)]
        else:
            idx = rng.choice(n, p=d2 / total)
            centroids[i] = data[idx]
        d2 = np.minimum(d2, np.sum((data - centroids[i]) ** 2, axis=1))
    return centroids


def fit_kmeans(
    matrix,
    k: int,
    seed: int,
    max_iter: int = 100,
    tol: float = 1e-4,
    preprocessing: PreprocessChain | None = None,
    init_centroids: np.ndarray | None = None,
    debug: bool = False,
    modality: str | None = None,
) -> ClusterModel:
    """Lloyd's algorithm with k-means++ seeding.

    Stops when the relative inertia improvement drops below ``tol`` or
    after ``max_iter`` update steps. Empty clusters are re-seeded to the
    point currently farthest from its assigned centroid. Deterministic
    given (matrix, k, seed).
    """
    data = _as_array(matrix)
    if preprocessing is not None:
        data = preprocessing.apply(data)
    n = data.shape[0]
    if n == 0:
        raise ClusteringError("cannot cluster an empty matrix")
    if k < 1:
        raise ClusteringError(f"k must be >= 1, got {k}")
    if k > n:
        warnings.warn(f"k={k} exceeds {n} rows; reducing k to {n}")
        k = n

    rng = np.random.default_rng(seed)
    if init_centroids is not None:
        centroids = np.array(init_centroids, dtype=np.float64)
        if centroids.shape != (k, data.shape[1]):
            raise DimensionMismatch(
                f"init centroids shape {centroids.shape} != ({k}, {data.shape[1]})"
            )
    else:
        centroids = _kmeans_plusplus(data, k, rng)

    labels, d2 = _nearest(data, centroids)
    inertia = float(d2.sum())
    n_iter = 0
    for _ in range(max_iter):
        new_centroids = centroids.copy()
        counts = np.bincount(labels, minlength=k)
        for j in range(k):
            if counts[j] > 0:
                new_centroids[j] = data[labels == j].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            # farthest points from their assigned centroids, descending
            order = np.argsort(-d2, kind="stable")
            for slot, j in enumerate(empty):
                new_centroids[j] = data[order[slot]]
        new_labels, new_d2 = _nearest(data, new_centroids)
        new_inertia = float(new_d2.sum())
        n_iter += 1
        if debug:
            assert new_inertia <= inertia * (1 + 1e-9) + 1e-12, (
                f"inertia increased: {inertia} -> {new_inertia}"
            )
        improvement = inertia - new_inertia
        centroids, labels, d2 = new_centroids, new_labels, new_d2
        prev = inertia
        inertia = new_inertia
        if prev <= 0.0 or improvement < tol * prev:
            break

    return ClusterModel(
        modality=modality,
        k=k,
        centroids=centroids,
        preprocessing=preprocessing,
        inertia=inertia,
        n_iter=n_iter,
        seed=seed,
    )


def assign(model: ClusterModel, matrix) -> LabelVector:
    """Map each row to its nearest centroid (squared Euclidean)."""
    data = _as_array(matrix)
    if model.preprocessing is not None:
        data = model.preprocessing.apply(data)
    if data.shape[1] != model.centroids.shape[1]:
        raise DimensionMismatch(
            f"matrix width {data.shape[1]} != centroid width {model.centroids.shape[1]}"
        )
    labels, _ = _nearest(data, model.centroids)
    return LabelVector(model.modality, labels)


def inertia(model: ClusterModel, matrix, labels: LabelVector) -> float:
    data = _as_array(matrix)
    if model.preprocessing is not None:
        data = model.preprocessing.apply(data)
    lab = labels.labels
    if len(lab) != data.shape[0]:
        raise ClusteringError(
            f"{len(lab)} labels for {data.shape[0]} rows"
        )
    diff = data - model.centroids[lab]
    return float(np.sum(diff * diff))


def project_2d(matrix, labels: LabelVector, seed: int = 0) -> list[tuple[float, float, int]]:
    """2-component PCA projection for cluster visualization."""
    data = _as_array(matrix)
    if data.shape[0] < 3:
        raise ClusteringError(f"need at least 3 rows to project, got {data.shape[0]}")
    svd = fit_truncated_svd(data, rank=2, seed=seed)
    coords = (data - svd.column_means) @ svd.components.T
    if coords.shape[1] < 2:
        coords = np.hstack([coords, np.zeros((coords.shape[0], 1))])
    lab = labels.labels
    return [(float(x), float(y), int(l)) for (x, y), l in zip(coords, lab)]


def write_projection_csv(rows: list[tuple[float, float, int]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("x,y,cluster\n")
        for x, y, label in rows:
            fh.write(f"{x!r},{y!r},{label}\n")


def save_cluster_model(model: ClusterModel, json_path: str | Path) -> None:
    """JSON description plus AMCF sidecars for centroids and SVD components."""
    json_path = Path(json_path)
    centroid_file = json_path.with_suffix(".centroids.amcf")
    write_embedding_matrix(EmbeddingMatrix(None, model.centroids), centroid_file)
    steps = []
    for i, step in enumerate((model.preprocessing.steps if model.preprocessing else [])):
        if isinstance(step, Standardizer):
            steps.append({"kind": "standardizer", **step.to_dict()})
        elif isinstance(step, SvdModel):
            svd_file = json_path.with_suffix(f".svd{i}.json")
            save_svd(step, svd_file)
            steps.append({"kind": "svd", "file": svd_file.name})
        else:
            raise ClusteringError(f"cannot serialize preprocessing step {type(step)}")
    obj = {
        "modality": model.modality,
        "k": model.k,
        "inertia": model.inertia,
        "n_iter": model.n_iter,
        "seed": model.seed,
        "centroids_file": centroid_file.name,
        "preprocessing": steps,
    }
    json_path.write_text(json.dumps(obj, sort_keys=True), encoding="utf-8")


def load_cluster_model(json_path: str | Path) -> ClusterModel:
    json_path = Path(json_path)
    obj = json.loads(json_path.read_text(encoding="utf-8"))
    centroids = read_embedding_matrix(json_path.parent / obj["centroids_file"]).data
    steps = []
    for entry in obj["preprocessing"]:
        if entry["kind"] == "standardizer":
            steps.append(Standardizer.from_dict(entry))
        else:
            steps.append(load_svd(json_path.parent / entry["file"]))
    return ClusterModel(
        modality=obj["modality"],
        k=int(obj["k"]),
        centroids=np.asarray(centroids, dtype=np.float64),
        preprocessing=PreprocessChain(steps) if steps else None,
        inertia=float(obj["inertia"]),
        n_iter=int(obj["n_iter"]),
        seed=int(obj["seed"]),
    )
