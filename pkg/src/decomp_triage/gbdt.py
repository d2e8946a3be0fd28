"""Gradient-boosted decision trees with logistic loss, from scratch.

Standard additive boosting: each round fits a regression tree to the
current gradients/hessians, exact greedy splits over every feature, L2
leaf regularization. Deliberately no row/column subsampling and no
parallelism inside training, so results are bit-reproducible for a fixed
input order.

Split selection rule (shared with the test oracle): candidate thresholds
are midpoints between adjacent distinct sorted feature values; gain =
0.5 * (GL^2/(HL+lambda) + GR^2/(HR+lambda) - G^2/(H+lambda)); a split is
taken only when the best gain exceeds GAIN_EPS; gains within TIE_REL_TOL
relative (or TIE_ABS_TOL absolute) of each other count as tied, and ties
break toward the lowest feature index, then the lowest threshold.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import TriageError

LAMBDA = 1.0
GAIN_EPS = 1e-12
TIE_ABS_TOL = 1e-12
TIE_REL_TOL = 1e-9

MODEL_FORMAT_VERSION = 1


class GbdtError(TriageError):
    pass


class EmptyDataset(GbdtError):
    pass


class SingleClassData(GbdtError):
    pass


class RaggedMatrix(GbdtError):
    pass


class WidthMismatch(GbdtError):
    pass


@dataclass(frozen=True)
class GbdtParams:
    num_rounds: int = 100
    max_depth: int = 4
    learning_rate: float = 0.1
    min_samples_leaf: int = 2

    def __post_init__(self) -> None:
        if self.num_rounds < 1:
            raise ValueError("num_rounds must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must be in (0, 1]")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")


@dataclass(frozen=True)
class Leaf:
    weight: float


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    left: "Tree"
    right: "Tree"


Tree = Union[Leaf, Split]


@dataclass(frozen=True)
class GbdtModel:
    trees: tuple[Tree, ...]
    learning_rate: float
    base_score: float
    num_rounds: int
    max_depth: int
    n_features: int


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def logistic_loss(margins: np.ndarray, labels: np.ndarray) -> float:
    """Mean logistic loss of raw margins against boolean labels."""
    signs = np.where(labels, 1.0, -1.0)
    return float(np.mean(np.logaddexp(0.0, -signs * margins)))


def apply_tree(tree: Tree, x: np.ndarray) -> float:
    node = tree
    while isinstance(node, Split):
        node = node.left if x[node.feature] <= node.threshold else node.right
    return node.weight


def _tied(a: float, b: float) -> bool:
    return abs(a - b) <= TIE_ABS_TOL + TIE_REL_TOL * max(abs(a), abs(b))


@dataclass(frozen=True)
class _Candidate:
    gain: float
    feature: int
    threshold: float


def _preferred(candidate: _Candidate, incumbent: _Candidate) -> bool:
    if _tied(candidate.gain, incumbent.gain):
        return (candidate.feature, candidate.threshold) < (
            incumbent.feature,
            incumbent.threshold,
        )
    return candidate.gain > incumbent.gain


def _best_split(
    X: np.ndarray, g: np.ndarray, h: np.ndarray, rows: np.ndarray, min_leaf: int
) -> _Candidate | None:
    G = float(g[rows].sum())
    H = float(h[rows].sum())
    parent_score = G * G / (H + LAMBDA)
    best: _Candidate | None = None
    n = len(rows)
    for feature in range(X.shape[1]):
        values = X[rows, feature]
        order = np.argsort(values, kind="stable")
        sv = values[order]
        sg = np.cumsum(g[rows][order])
        sh = np.cumsum(h[rows][order])
        for i in range(n - 1):
            if sv[i] == sv[i + 1]:
                continue
            left_n = i + 1
            if left_n < min_leaf or n - left_n < min_leaf:
                continue
            GL = float(sg[i])
            HL = float(sh[i])
            GR = G - GL
            HR = H - HL
            gain = 0.5 * (
                GL * GL / (HL + LAMBDA) + GR * GR / (HR + LAMBDA) - parent_score
            )
            candidate = _Candidate(gain, feature, float((sv[i] + sv[i + 1]) / 2.0))
            if best is None or _preferred(candidate, best):
                best = candidate
    if best is None or best.gain <= GAIN_EPS:
        return None
    return best


def _leaf(g: np.ndarray, h: np.ndarray, rows: np.ndarray) -> Leaf:
    return Leaf(weight=float(-g[rows].sum() / (h[rows].sum() + LAMBDA)))


def _fit_tree(
    X: np.ndarray,
    g: np.ndarray,
    h: np.ndarray,
    rows: np.ndarray,
    depth_left: int,
    min_leaf: int,
) -> Tree:
    if depth_left == 0 or len(rows) < 2 * min_leaf:
        return _leaf(g, h, rows)
    best = _best_split(X, g, h, rows, min_leaf)
    if best is None:
        return _leaf(g, h, rows)
    mask = X[rows, best.feature] <= best.threshold
    left_rows = rows[mask]
    right_rows = rows[~mask]
    return Split(
        feature=best.feature,
        threshold=best.threshold,
        left=_fit_tree(X, g, h, left_rows, depth_left - 1, min_leaf),
        right=_fit_tree(X, g, h, right_rows, depth_left - 1, min_leaf),
    )


def _validate_matrix(features, labels) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(features, np.ndarray) and features.dtype != object:
        X = features.astype(np.float64)
    else:
        rows = [np.asarray(r, dtype=np.float64) for r in features]
        if rows and any(r.ndim != 1 or len(r) != len(rows[0]) for r in rows):
            raise RaggedMatrix("feature rows have inconsistent lengths")
        X = np.array(rows, dtype=np.float64) if rows else np.empty((0, 0))
    if X.ndim != 2:
        raise RaggedMatrix(f"expected a 2-D feature matrix, got ndim={X.ndim}")
    y = np.asarray(labels, dtype=bool)
    if X.shape[0] == 0 or y.shape[0] == 0:
        raise EmptyDataset("no training rows")
    if X.shape[0] != y.shape[0]:
        raise RaggedMatrix(
            f"{X.shape[0]} feature rows but {y.shape[0]} labels"
        )
    if bool(y.all()) or not bool(y.any()):
        raise SingleClassData("training labels contain a single class")
    return X, y


def train_gbdt(features, labels, params: GbdtParams = GbdtParams()) -> GbdtModel:
    X, y = _validate_matrix(features, labels)
    prior = float(y.mean())
    base_score = math.log(prior / (1.0 - prior))
    margins = np.full(len(y), base_score, dtype=np.float64)
    all_rows = np.arange(len(y))
    trees: list[Tree] = []
    for _ in range(params.num_rounds):
        probs = 1.0 / (1.0 + np.exp(-margins))
        g = probs - y.astype(np.float64)
        h = probs * (1.0 - probs)
        tree = _fit_tree(X, g, h, all_rows, params.max_depth, params.min_samples_leaf)
        trees.append(tree)
        margins += params.learning_rate * np.array(
            [apply_tree(tree, X[i]) for i in range(len(y))]
        )
    return GbdtModel(
        trees=tuple(trees),
        learning_rate=params.learning_rate,
        base_score=base_score,
        num_rounds=params.num_rounds,
        max_depth=params.max_depth,
        n_features=X.shape[1],
    )


def predict_margin(model: GbdtModel, vector: Sequence[float]) -> float:
    x = np.asarray(vector, dtype=np.float64)
    if x.ndim != 1 or len(x) != model.n_features:
        raise WidthMismatch(
            f"vector length {x.shape} does not match model width {model.n_features}"
        )
    return model.base_score + model.learning_rate * sum(
        apply_tree(tree, x) for tree in model.trees
    )


def predict(model: GbdtModel, vector: Sequence[float]) -> tuple[float, bool]:
    """(probability, label) with Malware-positive threshold 0.5."""
    probability = _sigmoid(predict_margin(model, vector))
    return probability, probability > 0.5


def staged_margins(model: GbdtModel, features) -> np.ndarray:
    """Margins after base score and after each tree: shape (rounds+1, n)."""
    X = np.asarray(features, dtype=np.float64)
    out = np.empty((len(model.trees) + 1, X.shape[0]))
    out[0] = model.base_score
    for t, tree in enumerate(model.trees):
        out[t + 1] = out[t] + model.learning_rate * np.array(
            [apply_tree(tree, X[i]) for i in range(X.shape[0])]
        )
    return out


def _tree_to_obj(tree: Tree):
    if isinstance(tree, Leaf):
        return {"weight": tree.weight}
    return {
        "feature": tree.feature,
        "threshold": tree.threshold,
        "left": _tree_to_obj(tree.left),
        "right": _tree_to_obj(tree.right),
    }


def _tree_from_obj(obj) -> Tree:
    if "weight" in obj:
        return Leaf(weight=float(obj["weight"]))
    return Split(
        feature=int(obj["feature"]),
        threshold=float(obj["threshold"]),
        left=_tree_from_obj(obj["left"]),
        right=_tree_from_obj(obj["right"]),
    )


def save_model(model: GbdtModel, path: Path | str) -> None:
    """JSON persistence. Floats serialize via repr, so predictions of a
    reloaded model are bit-identical to the original's."""
    obj = {
        "format_version": MODEL_FORMAT_VERSION,
        "n_features": model.n_features,
        "learning_rate": model.learning_rate,
        "base_score": model.base_score,
        "num_rounds": model.num_rounds,
        "max_depth": model.max_depth,
        "trees": [_tree_to_obj(t) for t in model.trees],
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj), encoding="utf-8")
    os.replace(tmp, path)


def load_model(path: Path | str) -> GbdtModel:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise GbdtError(f"cannot load model from {path}: {exc}") from exc
    if obj.get("format_version") != MODEL_FORMAT_VERSION:
        raise GbdtError(
            f"unsupported model format_version {obj.get('format_version')!r}"
        )
    return GbdtModel(
        trees=tuple(_tree_from_obj(t) for t in obj["trees"]),
        learning_rate=float(obj["learning_rate"]),
        base_score=float(obj["base_score"]),
        num_rounds=int(obj["num_rounds"]),
        max_depth=int(obj["max_depth"]),
        n_features=int(obj["n_features"]),
    )
