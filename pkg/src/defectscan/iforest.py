"""Isolation forest over 2-D feature vectors, from the path-length definition.

Each tree recursively partitions a random subsample with uniform random
splits; anomalies isolate in few splits, so short expected path lengths map
to scores near 1 via s = 2^(-E[h] / c(psi)).  The decision threshold is the
(1 - contamination) quantile of the training scores.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError, StateError

EULER_GAMMA = 0.5772156649015329

FORMAT_VERSION = 1


def c_factor(n):
    """Average unsuccessful-search path length in a BST of n points.

    c(n) = 2 H(n-1) - 2 (n-1)/n with H(i) ~ ln(i) + gamma; c(0) = c(1) = 0.
    """
    if n <= 1:
        return 0.0
    return 2.0 * (math.log(n - 1) + EULER_GAMMA) - 2.0 * (n - 1) / n


@dataclass
class TreeNode:
    """Internal node (split_dim >= 0) or leaf (split_dim == -1, size set)."""

    split_dim: int = -1
    split_value: float = 0.0
    left: "TreeNode" = None
    right: "TreeNode" = None
    size: int = 0

    @property
    def is_leaf(self):
        return self.split_dim < 0


def _build_tree(x, rng, depth, limit):
    n = x.shape[0]
    if n <= 1 or depth >= limit:
        return TreeNode(size=n)
    mins, maxs = x.min(axis=0), x.max(axis=0)
    splittable = np.flatnonzero(maxs > mins)
    if splittable.size == 0:
        return TreeNode(size=n)
    dim = int(splittable[rng.integers(splittable.size)])
    value = None
    for _ in range(8):
        candidate = rng.uniform(mins[dim], maxs[dim])
        if mins[dim] < candidate < maxs[dim]:
            value = float(candidate)
            break
    if value is None:  # adjacent floats leave no representable interior point
        return TreeNode(size=n)
    mask = x[:, dim] < value
    return TreeNode(split_dim=dim, split_value=value,
                    left=_build_tree(x[mask], rng, depth + 1, limit),
                    right=_build_tree(x[~mask], rng, depth + 1, limit),
                    size=n)


def _path_lengths(root, x):
    """Per-point path length: tree edges walked plus c(leaf size)."""
    out = np.zeros(x.shape[0])

    def descend(node, idx, depth):
        if idx.size == 0:
            return
        if node.is_leaf:
            out[idx] = depth + c_factor(node.size)
            return
        mask = x[idx, node.split_dim] < node.split_value
        descend(node.left, idx[mask], depth + 1)
        descend(node.right, idx[~mask], depth + 1)

    descend(root, np.arange(x.shape[0]), 0)
    return out


@dataclass
class IsolationForestModel:
    trees: list
    n_estimators: int
    subsample_size: int
    contamination: float
    seed: int
    c_norm: float
    score_threshold: float = 0.0
    train_scores: np.ndarray = field(default=None, repr=False)


def _as_matrix(features):
    rows = [f.as_array() if hasattr(f, "as_array") else np.asarray(f, dtype=np.float64)
            for f in features]
    return np.asarray(rows, dtype=np.float64)


def _threshold_from_scores(scores, contamination):
    """Largest non-flagged training score: flags = strictly greater."""
    s = np.sort(np.asarray(scores))
    k = math.ceil(contamination * s.size)
    return float(s[s.size - k - 1])


def fit(features, n_estimators=100, subsample=256, contamination=0.05, seed=0):
    """Grow seeded trees on random subsamples and set the decision threshold.

    Tree i uses its own generator seeded with seed + i, so forests are
    reproducible and trees could be grown in parallel.
    """
    x = _as_matrix(features)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ConfigurationError(
            f"fit needs at least 2 training vectors, got {x.shape}")
    if not 0.0 <= contamination <= 0.5:
        raise ConfigurationError(f"contamination must be in [0, 0.5], got {contamination}")
    if n_estimators < 1:
        raise ConfigurationError(f"n_estimators must be >= 1, got {n_estimators}")
    if subsample < 2:
        raise ConfigurationError(f"subsample must be >= 2, got {subsample}")
    psi = min(subsample, x.shape[0])
    limit = math.ceil(math.log2(psi))
    trees = []
    for i in range(n_estimators):
        rng = np.random.default_rng(seed + i)
        idx = rng.choice(x.shape[0], size=psi, replace=False)
        trees.append(_build_tree(x[idx], rng, 0, limit))
    model = IsolationForestModel(trees=trees, n_estimators=n_estimators,
                                 subsample_size=psi, contamination=contamination,
                                 seed=seed, c_norm=c_factor(psi))
    model.train_scores = score_batch(model, x)
    model.score_threshold = _threshold_from_scores(model.train_scores, contamination)
    return model


def score_batch(model, features):
    """Anomaly scores in (0, 1] for a feature matrix; higher = more anomalous."""
    if not model.trees:
        raise StateError("isolation forest has no trees; fit it first")
    x = _as_matrix(features)
    mean_path = np.zeros(x.shape[0])
    for tree in model.trees:
        mean_path += _path_lengths(tree, x)
    mean_path /= len(model.trees)
    return np.power(2.0, -mean_path / model.c_norm)


def score(model, v):
    return float(score_batch(model, [v])[0])


def predict(model, v):
    """'anomalous' iff the score strictly exceeds the training-quantile threshold."""
    return "anomalous" if score(model, v) > model.score_threshold else "normal"


def rethreshold(train_scores, contamination):
    """Recompute the decision threshold for a new contamination level (no refit)."""
    if not 0.0 <= contamination <= 0.5:
        raise ConfigurationError(f"contamination must be in [0, 0.5], got {contamination}")
    return _threshold_from_scores(train_scores, contamination)


# ---------------------------------------------------------------------------
# serialization: nested JSON (preorder), exact float round-trip via repr
# ---------------------------------------------------------------------------

def _tree_to_obj(node):
    if node.is_leaf:
        return {"size": node.size}
    return {"dim": node.split_dim, "value": node.split_value, "size": node.size,
            "left": _tree_to_obj(node.left), "right": _tree_to_obj(node.right)}


def _tree_from_obj(obj):
    if "dim" not in obj:
        return TreeNode(size=obj["size"])
    return TreeNode(split_dim=obj["dim"], split_value=obj["value"], size=obj["size"],
                    left=_tree_from_obj(obj["left"]), right=_tree_from_obj(obj["right"]))


def to_json(model):
    return json.dumps({
        "format_version": FORMAT_VERSION,
        "n_estimators": model.n_estimators,
        "subsample_size": model.subsample_size,
        "contamination": model.contamination,
        "seed": model.seed,
        "c_norm": model.c_norm,
        "score_threshold": model.score_threshold,
        "train_scores": [float(s) for s in model.train_scores],
        "trees": [_tree_to_obj(t) for t in model.trees],
    }, sort_keys=True)


def save(model, path):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write(to_json(model))
    os.replace(tmp, path)


def load(path):
    with open(path) as f:
        obj = json.load(f)
    if obj.get("format_version") != FORMAT_VERSION:
        raise ContractError(f"{path}: unsupported forest format {obj.get('format_version')}")
    return IsolationForestModel(
        trees=[_tree_from_obj(t) for t in obj["trees"]],
        n_estimators=obj["n_estimators"],
        subsample_size=obj["subsample_size"],
        contamination=obj["contamination"],
        seed=obj["seed"],
        c_norm=obj["c_norm"],
        score_threshold=obj["score_threshold"],
        train_scores=np.asarray(obj["train_scores"]),
    )
