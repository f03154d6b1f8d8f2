"""Fitted per-modality preprocessing: standardization and truncated SVD."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset_io import (
    EmbeddingMatrix,
    read_embedding_matrix,
    write_embedding_matrix,
)

CONSTANT_STD_FLOOR = 1e-12


class PreprocessError(Exception):
    pass


class DimensionMismatch(PreprocessError):
    pass


def _as_array(matrix) -> np.ndarray:
    data = matrix.data if isinstance(matrix, EmbeddingMatrix) else matrix
    return np.asarray(data, dtype=np.float64)


def _like(template, data: np.ndarray):
    if isinstance(template, EmbeddingMatrix):
        return EmbeddingMatrix(template.modality, data)
    return data


@dataclass
class Standardizer:
    """Column-wise (x - mean) / std with population statistics.

    Columns whose population std falls below ``CONSTANT_STD_FLOOR`` record
    std = 1 so that transformed constant columns become exactly zero.
    """

    means: np.ndarray
    stds: np.ndarray

    @property
    def fitted_dim(self) -> int:
        return len(self.means)

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "stds": self.stds.tolist()}

    @classmethod
    def from_dict(cls, obj: dict) -> "Standardizer":
        return cls(
            means=np.asarray(obj["means"], dtype=np.float64),
            stds=np.asarray(obj["stds"], dtype=np.float64),
        )


def fit_standardizer(matrix) -> Standardizer:
    data = _as_array(matrix)
    if data.shape[0] < 1 or data.size == 0:
        raise PreprocessError("cannot standardize an empty matrix")
    means = data.mean(axis=0)
    stds = data.std(axis=0)  # population (1/n)
    stds = np.where(stds < CONSTANT_STD_FLOOR, 1.0, stds)
    return Standardizer(means=means, stds=stds)


def apply_standardizer(s: Standardizer, matrix):
    data = _as_array(matrix)
    if data.shape[1] != s.fitted_dim:
        raise DimensionMismatch(
            f"standardizer fitted on {s.fitted_dim} columns, got {data.shape[1]}"
        )
    return _like(matrix, (data - s.means) / s.stds)


@dataclass
class SvdModel:
    """Truncated SVD of the column-centered fit matrix.

    ``components`` holds the top right singular vectors as rows
    (rank x d); projection is (X - column_means) @ components.T.
    """

    components: np.ndarray
    singular_values: np.ndarray
    column_means: np.ndarray
    seed: int = 0

    @property
    def rank(self) -> int:
        return self.components.shape[0]

    @property
    def input_dim(self) -> int:
        return self.components.shape[1]


def fit_truncated_svd(matrix, rank: int, seed: int = 0, center: bool = True) -> SvdModel:
    """Fit a rank-``rank`` truncated SVD on column-centered data.

    Uses an exact LAPACK decomposition (deterministic; ``seed`` is kept for
    interface stability). The effective rank is capped at min(n, d) with a
    warning. Component signs are fixed so the entry of largest magnitude in
    each component is positive.
    """
    if rank < 1:
        raise PreprocessError(f"rank must be >= 1, got {rank}")
    data = _as_array(matrix)
    n, d = data.shape
    if n < 2:
        raise PreprocessError(f"need at least 2 rows to fit SVD, got {n}")
    effective = min(rank, n, d)
    if effective < rank:
        warnings.warn(
            f"requested SVD rank {rank} capped at {effective} for a {n}x{d} matrix"
        )
    means = data.mean(axis=0) if center else np.zeros(d)
    centered = data - means
    _, sing, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:effective]
    # deterministic sign: largest-|.| entry of each component made positive
    anchor = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(effective), anchor])
    signs[signs == 0] = 1.0
    components = components * signs[:, None]
    return SvdModel(
        components=components,
        singular_values=sing[:effective],
        column_means=means,
        seed=seed,
    )


def apply_svd(m: SvdModel, matrix):
    data = _as_array(matrix)
    if data.shape[1] != m.input_dim:
        raise DimensionMismatch(
            f"SVD fitted on {m.input_dim} columns, got {data.shape[1]}"
        )
    return _like(matrix, (data - m.column_means) @ m.components.T)


@dataclass
class PreprocessChain:
    """Ordered fitted transforms applied before clustering."""

    steps: list = field(default_factory=list)

    def apply(self, matrix) -> np.ndarray:
        data = _as_array(matrix)
        for step in self.steps:
            if isinstance(step, Standardizer):
                data = apply_standardizer(step, data)
            elif isinstance(step, SvdModel):
                data = apply_svd(step, data)
            else:
                raise PreprocessError(f"unknown preprocessing step {type(step)}")
        return data

    @property
    def output_dim(self) -> int | None:
        for step in reversed(self.steps):
            if isinstance(step, SvdModel):
                return step.rank
            if isinstance(step, Standardizer):
                return step.fitted_dim
        return None


def save_svd(model: SvdModel, json_path: str | Path) -> None:
    """Persist an SvdModel as JSON plus an AMCF sidecar for the components."""
    json_path = Path(json_path)
    sidecar = json_path.with_suffix(".components.amcf")
    write_embedding_matrix(EmbeddingMatrix(None, model.components), sidecar)
    obj = {
        "singular_values": model.singular_values.tolist(),
        "column_means": model.column_means.tolist(),
        "seed": model.seed,
        "components_file": sidecar.name,
    }
    json_path.write_text(json.dumps(obj, sort_keys=True), encoding="utf-8")


def load_svd(json_path: str | Path) -> SvdModel:
    json_path = Path(json_path)
    obj = json.loads(json_path.read_text(encoding="utf-8"))
    components = read_embedding_matrix(json_path.parent / obj["components_file"]).data
    return SvdModel(
        components=np.asarray(components, dtype=np.float64),
        singular_values=np.asarray(obj["singular_values"], dtype=np.float64),
        column_means=np.asarray(obj["column_means"], dtype=np.float64),
        seed=int(obj["seed"]),
    )
