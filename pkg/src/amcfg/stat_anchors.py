"""Per-cluster popularity statistics (statistical anchors), train-fold only.

The anchor table is always fitted on training rows; evaluation rows only
ever look values up by cluster label, so test targets never enter fitting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clustering import LabelVector
from .dataset_io import MODALITIES


class AnchorError(Exception):
    pass


@dataclass
class AnchorStats:
    """Training popularity mean / population variance / member count per
    cluster, with the global statistics as fallback for empty clusters."""

    modality: str | None
    k: int
    mean: np.ndarray
    var: np.ndarray
    count: np.ndarray
    global_mean: float
    global_var: float

    def to_dict(self) -> dict:
        return {
            "modality": self.modality,
            "k": self.k,
            "mean": self.mean.tolist(),
            "var": self.var.tolist(),
            "count": self.count.tolist(),
            "global_mean": self.global_mean,
            "global_var": self.global_var,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "AnchorStats":
        return cls(
            modality=obj["modality"],
            k=int(obj["k"]),
            mean=np.asarray(obj["mean"], dtype=np.float64),
            var=np.asarray(obj["var"], dtype=np.float64),
            count=np.asarray(obj["count"], dtype=np.int64),
            global_mean=float(obj["global_mean"]),
            global_var=float(obj["global_var"]),
        )


def fit_anchor_stats(
    labels: LabelVector,
    popularity: np.ndarray,
    k: int,
    shrinkage: bool = False,
    shrinkage_alpha: float = 10.0,
) -> AnchorStats:
    """Group popularity by cluster label and record mean/variance/count.

    Variance is population (1/N), so single-member clusters report 0.
    Clusters with no training members carry the global mean/variance and
    count 0. Optional shrinkage pulls small-cluster means toward the
    global mean: mean <- (N*mean + alpha*global) / (N + alpha).
    """
    y = np.asarray(popularity, dtype=np.float64)
    lab = labels.labels
    if len(y) == 0:
        raise AnchorError("cannot fit anchor statistics on an empty training set")
    if len(lab) != len(y):
        raise AnchorError(f"{len(lab)} labels for {len(y)} targets")
    if lab.min() < 0 or lab.max() >= k:
        raise AnchorError(f"labels outside [0, {k})")

    count = np.bincount(lab, minlength=k)
    sums = np.bincount(lab, weights=y, minlength=k)
    populated = count > 0
    mean = np.zeros(k)
    mean[populated] = sums[populated] / count[populated]
    # two-pass variance for numerical stability
    sq_dev = np.bincount(lab, weights=(y - mean[lab]) ** 2, minlength=k)
    var = np.zeros(k)
    var[populated] = sq_dev[populated] / count[populated]
    np.maximum(var, 0.0, out=var)

    global_mean = float(y.mean())
    global_var = float(y.var())
    mean[~populated] = global_mean
    var[~populated] = global_var

    if shrinkage:
        a = float(shrinkage_alpha)
        mean[populated] = (
            count[populated] * mean[populated] + a * global_mean
        ) / (count[populated] + a)

    return AnchorStats(
        modality=labels.modality,
        k=k,
        mean=mean,
        var=var,
        count=count.astype(np.int64),
        global_mean=global_mean,
        global_var=global_var,
    )


@dataclass
class StatFeatureBlock:
    """n x (4*M) feature block: per modality (mean, var, count, label)."""

    matrix: np.ndarray
    column_names: list[str] = field(default_factory=list)


def lookup_stat_features(
    labels_by_modality: dict[str, LabelVector],
    stats_by_modality: dict[str, AnchorStats],
) -> StatFeatureBlock:
    """Materialize the per-post anchor features in fixed modality order."""
    present = [m for m in MODALITIES if m in labels_by_modality]
    if not present:
        raise AnchorError("no label vectors supplied")
    lengths = {len(labels_by_modality[m]) for m in present}
    if len(lengths) != 1:
        raise AnchorError(f"label vectors have differing lengths: {lengths}")
    n = lengths.pop()

    columns = []
    names: list[str] = []
    for m in present:
        if m not in stats_by_modality:
            raise AnchorError(f"labels present for modality {m!r} but no anchor stats")
        stats = stats_by_modality[m]
        lab = labels_by_modality[m].labels
        if lab.max(initial=-1) >= stats.k:
            raise AnchorError(f"modality {m!r}: label exceeds k={stats.k}")
        columns.extend(
            [
                stats.mean[lab],
                stats.var[lab],
                stats.count[lab].astype(np.float64),
                lab.astype(np.float64),
            ]
        )
        names.extend(
            [f"stat.{m}.mean_pop", f"stat.{m}.var_pop", f"stat.{m}.count", f"stat.{m}.label"]
        )
    matrix = np.column_stack(columns) if columns else np.zeros((n, 0))
    return StatFeatureBlock(matrix=matrix, column_names=names)


def save_anchor_stats(
    stats_by_modality: dict[str, AnchorStats], path: str | Path
) -> None:
    obj = {m: s.to_dict() for m, s in stats_by_modality.items()}
    Path(path).write_text(json.dumps(obj, sort_keys=True), encoding="utf-8")


def load_anchor_stats(path: str | Path) -> dict[str, AnchorStats]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return {m: AnchorStats.from_dict(s) for m, s in obj.items()}
