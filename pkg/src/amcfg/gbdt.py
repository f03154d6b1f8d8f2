"""Histogram-based gradient-boosted regression trees with an L1 objective.

Trees grow leaf-wise (best-first) over quantile-binned features, splitting
on the variance-reduction gain of the sign pseudo-gradients; leaf values
are then refit to the median of the raw residuals, which keeps training
MAE non-increasing for learning rates in (0, 1].
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MODEL_FORMAT_VERSION = 1


class GbdtError(Exception):
    pass


class EmptyTraining(GbdtError):
    pass


class NonFiniteFeature(GbdtError):
    pass


class DimensionMismatch(GbdtError):
    pass


@dataclass
class GbdtParams:
    learning_rate: float = 0.05
    num_leaves: int = 31
    n_rounds: int = 500
    min_samples_leaf: int = 20
    max_bins: int = 255
    early_stopping_rounds: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise GbdtError("learning_rate must be > 0")
        if self.num_leaves < 2:
            raise GbdtError("num_leaves must be >= 2")
        if not (2 <= self.max_bins <= 65535):
            raise GbdtError("max_bins must be in [2, 65535]")
        if self.min_samples_leaf < 1:
            raise GbdtError("min_samples_leaf must be >= 1")
        if self.n_rounds < 0 or self.early_stopping_rounds < 0:
            raise GbdtError("n_rounds and early_stopping_rounds must be >= 0")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "num_leaves": self.num_leaves,
            "n_rounds": self.n_rounds,
            "min_samples_leaf": self.min_samples_leaf,
            "max_bins": self.max_bins,
            "early_stopping_rounds": self.early_stopping_rounds,
            "seed": self.seed,
        }


@dataclass
class Tree:
    """Flat-array binary tree; feature == -1 marks a leaf."""

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)

    def add_node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        return len(self.feature) - 1

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(X.shape[0], dtype=np.float64)
        stack = [(0, np.arange(X.shape[0]))]
        while stack:
            node, rows = stack.pop()
            if self.feature[node] < 0:
                out[rows] = self.value[node]
                continue
            mask = X[rows, self.feature[node]] <= self.threshold[node]
            stack.append((self.left[node], rows[mask]))
            stack.append((self.right[node], rows[~mask]))
        return out


@dataclass
class BoostedModel:
    base_score: float
    learning_rate: float
    trees: list[Tree]
    bin_edges: list[np.ndarray]
    feature_names: list[str]
    params: GbdtParams
    split_counts: np.ndarray
    gain_totals: np.ndarray
    train_mae_history: list[float] = field(default_factory=list)
    valid_mae_history: list[float] = field(default_factory=list)
    best_round: int | None = None

    @property
    def n_features(self) -> int:
        return len(self.bin_edges)


def _check_finite_matrix(X: np.ndarray) -> None:
    if X.size and not np.isfinite(X).all():
        raise NonFiniteFeature("feature matrix contains non-finite values")


def _fit_bin_edges(X: np.ndarray, max_bins: int) -> list[np.ndarray]:
    """Per-feature split thresholds: midpoints between consecutive unique
    values when they fit in the bin budget, unique quantiles otherwise."""
    edges = []
    for f in range(X.shape[1]):
        u = np.unique(X[:, f])
        if len(u) <= 1:
            edges.append(np.empty(0, dtype=np.float64))
        elif len(u) <= max_bins:
            edges.append((u[:-1] + u[1:]) / 2.0)
        else:
            qs = np.quantile(X[:, f], np.linspace(0.0, 1.0, max_bins + 1)[1:-1])
            edges.append(np.unique(qs))
    return edges


def _bin_matrix(X: np.ndarray, edges: list[np.ndarray]) -> tuple[np.ndarray, int]:
    codes = np.empty(X.shape, dtype=np.int32)
    n_bins = 1
    for f, e in enumerate(edges):
        codes[:, f] = np.searchsorted(e, X[:, f], side="left")
        n_bins = max(n_bins, len(e) + 1)
    return codes, n_bins


class _LeafCandidate:
    __slots__ = ("node", "rows", "gain", "feature", "bin")

    def __init__(self, node: int, rows: np.ndarray, gain: float, feature: int, bin_: int):
        self.node = node
        self.rows = rows
        self.gain = gain
        self.feature = feature
        self.bin = bin_


def _best_split(
    codes: np.ndarray,
    g: np.ndarray,
    rows: np.ndarray,
    n_bins: int,
    min_samples_leaf: int,
) -> tuple[float, int, int]:
    """Best (gain, feature, bin) over all histogram split points.

    Gain is the reduction in sum-of-squares when fitting per-side constants
    to the pseudo-gradients. Ties resolve to the lowest feature index, then
    the lowest bin. Returns gain -inf when no valid split exists.
    """
    n = len(rows)
    if n < 2 * min_samples_leaf or n_bins < 2:
        return -np.inf, -1, -1
    d = codes.shape[1]
    sub = codes[rows]
    g_sub = g[rows]
    flat = (sub + np.arange(d, dtype=np.int32) * n_bins).ravel()
    weights = np.broadcast_to(g_sub[:, None], sub.shape).ravel()
    hist_g = np.bincount(flat, weights=weights, minlength=d * n_bins).reshape(d, n_bins)
    hist_n = np.bincount(flat, minlength=d * n_bins).reshape(d, n_bins)

    gl = np.cumsum(hist_g, axis=1)[:, :-1]
    nl = np.cumsum(hist_n, axis=1)[:, :-1]
    gt = float(g_sub.sum())
    gr = gt - gl
    nr = n - nl
    valid = (nl >= min_samples_leaf) & (nr >= min_samples_leaf)
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = gl * gl / nl + gr * gr / nr - gt * gt / n
    gain[~valid] = -np.inf
    best = int(np.argmax(gain))
    feature, bin_ = divmod(best, n_bins - 1)
    best_gain = float(gain[feature, bin_])
    if not np.isfinite(best_gain) or best_gain <= 1e-12:
        return -np.inf, -1, -1
    return best_gain, feature, bin_


def train(
    X: np.ndarray,
    y: np.ndarray,
    params: GbdtParams | None = None,
    valid: tuple[np.ndarray, np.ndarray] | None = None,
    feature_names: list[str] | None = None,
) -> BoostedModel:
    """Boost regression trees against mean absolute error.

    Per round: pseudo-gradient g_i = sign(prediction_i - y_i) drives the
    split search; leaf values are refit to the median residual in each
    leaf; predictions advance by learning_rate * leaf_value. With a
    validation pair, stops once validation MAE has not improved for
    early_stopping_rounds rounds and keeps trees up to the best round.
    """
    params = params or GbdtParams()
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2:
        raise GbdtError(f"X must be 2-D, got shape {X.shape}")
    if X.shape[0] == 0:
        raise EmptyTraining("no training rows")
    if X.shape[0] != len(y):
        raise DimensionMismatch(f"{X.shape[0]} rows but {len(y)} targets")
    _check_finite_matrix(X)
    if not np.isfinite(y).all():
        raise NonFiniteFeature("target contains non-finite values")
    n, d = X.shape
    if feature_names is None:
        feature_names = [f"f{i}" for i in range(d)]
    if len(feature_names) != d:
        raise DimensionMismatch(f"{len(feature_names)} names for {d} features")

    base = float(np.median(y))
    edges = _fit_bin_edges(X, params.max_bins)
    model = BoostedModel(
        base_score=base,
        learning_rate=params.learning_rate,
        trees=[],
        bin_edges=edges,
        feature_names=list(feature_names),
        params=params,
        split_counts=np.zeros(d, dtype=np.int64),
        gain_totals=np.zeros(d, dtype=np.float64),
    )
    pred = np.full(n, base)
    model.train_mae_history.append(float(np.mean(np.abs(y - pred))))

    if np.all(y == y[0]):
        if params.n_rounds > 0:
            warnings.warn("constant target; returning base-score-only model")
        return model

    codes, n_bins = _bin_matrix(X, edges)

    use_valid = valid is not None and params.early_stopping_rounds > 0
    if valid is not None:
        X_v = np.ascontiguousarray(valid[0], dtype=np.float64)
        y_v = np.asarray(valid[1], dtype=np.float64)
        if X_v.shape[1] != d:
            raise DimensionMismatch(
                f"validation width {X_v.shape[1]} != training width {d}"
            )
        pred_v = np.full(len(y_v), base)
        model.valid_mae_history.append(float(np.mean(np.abs(y_v - pred_v))))
    best_valid = np.inf
    best_round = 0
    per_tree_splits: list[list[tuple[int, float]]] = []

    for round_idx in range(params.n_rounds):
        g = np.sign(pred - y)
        tree = Tree()
        root = tree.add_node()
        all_rows = np.arange(n)
        gain, feat, bin_ = _best_split(
            codes, g, all_rows, n_bins, params.min_samples_leaf
        )
        if not np.isfinite(gain):
            break
        candidates = {root: _LeafCandidate(root, all_rows, gain, feat, bin_)}
        leaves = {root: all_rows}
        tree_splits: list[tuple[int, float]] = []
        while len(leaves) < params.num_leaves:
            splittable = [
                c for c in candidates.values() if np.isfinite(c.gain)
            ]
            if not splittable:
                break
            best = max(splittable, key=lambda c: (c.gain, -c.node))
            rows = best.rows
            f = best.feature
            go_left = codes[rows, f] <= best.bin
            left_rows = rows[go_left]
            right_rows = rows[~go_left]

            tree.feature[best.node] = f
            tree.threshold[best.node] = float(edges[f][best.bin])
            left = tree.add_node()
            right = tree.add_node()
            tree.left[best.node] = left
            tree.right[best.node] = right
            tree_splits.append((f, best.gain))

            del candidates[best.node], leaves[best.node]
            for child, child_rows in ((left, left_rows), (right, right_rows)):
                leaves[child] = child_rows
                c_gain, c_feat, c_bin = _best_split(
                    codes, g, child_rows, n_bins, params.min_samples_leaf
                )
                candidates[child] = _LeafCandidate(
                    child, child_rows, c_gain, c_feat, c_bin
                )

        residual = y - pred
        for node, rows in leaves.items():
            leaf_value = float(np.median(residual[rows]))
            tree.value[node] = leaf_value
            pred[rows] += params.learning_rate * leaf_value

        model.trees.append(tree)
        per_tree_splits.append(tree_splits)
        model.train_mae_history.append(float(np.mean(np.abs(y - pred))))

        if valid is not None:
            pred_v += params.learning_rate * tree.predict(X_v)
            v_mae = float(np.mean(np.abs(y_v - pred_v)))
            model.valid_mae_history.append(v_mae)
            if v_mae < best_valid - 1e-15:
                best_valid = v_mae
                best_round = round_idx + 1
            elif use_valid and (round_idx + 1) - best_round >= params.early_stopping_rounds:
                break

    if use_valid and model.trees:
        model.trees = model.trees[:best_round]
        per_tree_splits = per_tree_splits[:best_round]
        model.best_round = best_round
        model.train_mae_history = model.train_mae_history[: best_round + 1]
        model.valid_mae_history = model.valid_mae_history[: best_round + 1]
    for tree_splits in per_tree_splits:
        for f, split_gain in tree_splits:
            model.split_counts[f] += 1
            model.gain_totals[f] += split_gain
    return model


def predict(model: BoostedModel, X: np.ndarray) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise DimensionMismatch(
            f"expected {model.n_features} columns, got {X.shape}"
        )
    _check_finite_matrix(X)
    out = np.full(X.shape[0], model.base_score)
    for tree in model.trees:
        out += model.learning_rate * tree.predict(X)
    return out


def feature_importance(model: BoostedModel, kind: str = "gain") -> list[tuple[str, float]]:
    """(feature_name, score) sorted descending; ties by feature index."""
    if kind == "splits":
        scores = model.split_counts.astype(np.float64)
    elif kind == "gain":
        scores = model.gain_totals
    else:
        raise GbdtError(f"kind must be 'splits' or 'gain', got {kind!r}")
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return [(model.feature_names[i], float(scores[i])) for i in order]


def save_model(model: BoostedModel, path: str | Path) -> None:
    obj = {
        "format_version": MODEL_FORMAT_VERSION,
        "base_score": model.base_score,
        "learning_rate": model.learning_rate,
        "params": model.params.to_dict(),
        "feature_names": model.feature_names,
        "bin_edges": [e.tolist() for e in model.bin_edges],
        "split_counts": model.split_counts.tolist(),
        "gain_totals": model.gain_totals.tolist(),
        "best_round": model.best_round,
        "trees": [
            {
                "feature": t.feature,
                "threshold": t.threshold,
                "left": t.left,
                "right": t.right,
                "value": t.value,
            }
            for t in model.trees
        ],
    }
    Path(path).write_text(json.dumps(obj, sort_keys=True), encoding="utf-8")


def load_model(path: str | Path) -> BoostedModel:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if obj.get("format_version") != MODEL_FORMAT_VERSION:
        raise GbdtError(
            f"unsupported model format version {obj.get('format_version')}"
        )
    trees = [
        Tree(
            feature=list(t["feature"]),
            threshold=[float(v) for v in t["threshold"]],
            left=list(t["left"]),
            right=list(t["right"]),
            value=[float(v) for v in t["value"]],
        )
        for t in obj["trees"]
    ]
    return BoostedModel(
        base_score=float(obj["base_score"]),
        learning_rate=float(obj["learning_rate"]),
        trees=trees,
        bin_edges=[np.asarray(e, dtype=np.float64) for e in obj["bin_edges"]],
        feature_names=list(obj["feature_names"]),
        params=GbdtParams(**obj["params"]),
        split_counts=np.asarray(obj["split_counts"], dtype=np.int64),
        gain_totals=np.asarray(obj["gain_totals"], dtype=np.float64),
        best_round=obj.get("best_round"),
    )
