"""Random-forest regression of post-GPTQ NLL from measured features.

Trees are grown greedily on variance reduction over every feature (no
feature subsampling). Each tree draws its bootstrap sample from its own RNG
stream seeded by ``(seed, tree_index)`` against a canonical record order, so
fits are independent of input order and of how trees are scheduled.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

import numpy as np

FEATURES = ("D", "nll_fp", "sqnr_rtn_db", "nll_rtn", "slope_db", "precision", "ebits", "block")
CSV_HEADER = ("model_id",) + FEATURES + ("nll_gptq",)


@dataclass
class FeatureRecord:
    model_id: str
    D: float
    nll_fp: float
    sqnr_rtn_db: float
    nll_rtn: float
    slope_db: float
    precision: float
    ebits: float
    block: float
    nll_gptq: float | None = None
    format: str = ""  # informational, not serialized in the feature table

    def features(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in FEATURES], dtype=np.float64)

    def validate(self) -> None:
        x = self.features()
        if not np.all(np.isfinite(x)):
            raise ValueError(f"non-finite feature in record {self.model_id}/{self.format}")
        if self.D <= 0 or self.precision < 2:
            raise ValueError(f"invalid record {self.model_id}/{self.format}: D={self.D}, P={self.precision}")


def write_records(records: Iterable[FeatureRecord], fh: TextIO) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in records:
        row = [r.model_id] + [_num(getattr(r, f)) for f in FEATURES]
        row.append("" if r.nll_gptq is None else repr(float(r.nll_gptq)))
        writer.writerow(row)


def _num(value: float) -> str:
    v = float(value)
    return str(int(v)) if v.is_integer() and abs(v) < 2**53 else repr(v)


def read_records(fh: TextIO) -> list[FeatureRecord]:
    reader = csv.reader(fh)
    header = tuple(next(reader, ()))
    if header != CSV_HEADER:
        raise ValueError(f"feature table header mismatch: {header!r}")
    out = []
    for row in reader:
        if not row:
            continue
        vals = {f: float(v) for f, v in zip(FEATURES, row[1:9])}
        target = float(row[9]) if len(row) > 9 and row[9] != "" else None
        rec = FeatureRecord(row[0], nll_gptq=target, **vals)
        rec.validate()
        out.append(rec)
    return out


# ---------------------------------------------------------------------------
# Trees
# ---------------------------------------------------------------------------


@dataclass
class Node:
    value: float
    n: int
    feature: int = -1
    threshold: float = 0.0
    left: "Node | None" = None
    right: "Node | None" = None
    gain: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth(), self.right.depth())

    def to_json(self) -> dict:
        if self.is_leaf:
            return {"value": self.value}
        return {
            "feature": self.feature,
            "threshold": self.threshold,
            "left": self.left.to_json(),
            "right": self.right.to_json(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Node":
        if "value" in obj:
            return cls(value=float(obj["value"]), n=0)
        return cls(
            value=math.nan,
            n=0,
            feature=int(obj["feature"]),
            threshold=float(obj["threshold"]),
            left=cls.from_json(obj["left"]),
            right=cls.from_json(obj["right"]),
        )


def _best_split(X: np.ndarray, y: np.ndarray) -> tuple[int, float, float] | None:
    """Largest SSE reduction over all features and midpoint thresholds.

    Ties keep the lowest feature index, then the lowest threshold.
    """
    n = y.size
    total_sse = float(np.sum((y - y.mean()) ** 2))
    best: tuple[int, float, float] | None = None
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        xs, ys = X[order, f], y[order]
        distinct = xs[1:] > xs[:-1]
        if not distinct.any():
            continue
        csum = np.cumsum(ys)
        csq = np.cumsum(ys * ys)
        nl = np.arange(1, n)
        sl, ql = csum[:-1], csq[:-1]
        sr, qr = csum[-1] - sl, csq[-1] - ql
        sse = (ql - sl * sl / nl) + (qr - sr * sr / (n - nl))
        gain = np.where(distinct, total_sse - sse, -np.inf)
        i = int(np.argmax(gain))  # first maximum = lowest threshold
        if best is None or gain[i] > best[2]:
            best = (f, float((xs[i] + xs[i + 1]) / 2), float(gain[i]))
    return best


def grow_tree(X: np.ndarray, y: np.ndarray, max_depth: int | None, depth: int = 0) -> Node:
    node = Node(value=float(y.mean()), n=y.size)
    if (max_depth is not None and depth >= max_depth) or y.size < 2 or np.all(y == y[0]):
        return node
    split = _best_split(X, y)
    if split is None:
        return node
    f, thr, gain = split
    mask = X[:, f] <= thr
    node.feature, node.threshold, node.gain = f, thr, max(gain, 0.0)
    node.left = grow_tree(X[mask], y[mask], max_depth, depth + 1)
    node.right = grow_tree(X[~mask], y[~mask], max_depth, depth + 1)
    return node


def predict_tree(node: Node, x: np.ndarray) -> float:
    while not node.is_leaf:
        node = node.left if x[node.feature] <= node.threshold else node.right
    return node.value


def _credit(node: Node, out: np.ndarray) -> None:
    if node.is_leaf:
        return
    out[node.feature] += node.gain
    _credit(node.left, out)
    _credit(node.right, out)


# ---------------------------------------------------------------------------
# Forest
# ---------------------------------------------------------------------------


@dataclass
class Forest:
    trees: list[Node]
    n_estimators: int
    max_depth: int | None
    seed: int
    bootstrap: bool = True
    feature_names: tuple[str, ...] = FEATURES

    def to_json(self) -> dict:
        return {
            "n_estimators": self.n_estimators,
            "max_depth": self.max_depth,
            "seed": self.seed,
            "bootstrap": self.bootstrap,
            "feature_names": list(self.feature_names),
            "trees": [t.to_json() for t in self.trees],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Forest":
        return cls(
            trees=[Node.from_json(t) for t in obj["trees"]],
            n_estimators=obj["n_estimators"],
            max_depth=obj["max_depth"],
            seed=obj["seed"],
            bootstrap=obj.get("bootstrap", True),
            feature_names=tuple(obj["feature_names"]),
        )


def _canonical(records: Sequence[FeatureRecord]) -> list[FeatureRecord]:
    return sorted(records, key=lambda r: (r.model_id, tuple(r.features()), r.nll_gptq))


def fit(
    records: Sequence[FeatureRecord],
    n_estimators: int = 120,
    max_depth: int | None = 8,
    seed: int = 0,
    bootstrap: bool = True,
) -> Forest:
    """Fit a random forest on records carrying ``nll_gptq`` targets."""
    if not records:
        raise ValueError("cannot fit a forest on zero records")
    recs = _canonical(records)
    if any(r.nll_gptq is None for r in recs):
        raise ValueError("every training record needs an nll_gptq target")
    for r in recs:
        r.validate()
    X = np.stack([r.features() for r in recs])
    y = np.array([r.nll_gptq for r in recs], dtype=np.float64)
    n = y.size
    trees = []
    for t in range(n_estimators):
        if bootstrap:
            idx = np.random.default_rng([seed, t]).integers(0, n, n)
            trees.append(grow_tree(X[idx], y[idx], max_depth))
        else:
            trees.append(grow_tree(X, y, max_depth))
    return Forest(trees, n_estimators, max_depth, seed, bootstrap)


def _feature_matrix(records) -> np.ndarray:
    if isinstance(records, FeatureRecord):
        records = [records]
    if isinstance(records, np.ndarray):
        return np.atleast_2d(records).astype(np.float64)
    return np.stack([r.features() for r in records])


def predict(forest: Forest, records) -> np.ndarray:
    """Mean of tree predictions, one value per record (or feature row)."""
    if not forest.trees:
        raise ValueError("forest is not fitted")
    X = _feature_matrix(records)
    return np.array([sum(predict_tree(t, x) for t in forest.trees) / len(forest.trees) for x in X])


def importance(forest: Forest) -> tuple[np.ndarray, np.ndarray]:
    """Mean-decrease-in-impurity importance and its across-tree std.

    Each tree's SSE-reduction credits are normalized to sum 1, averaged over
    trees that split at all, and the average is renormalized.
    """
    per_tree = []
    for tree in forest.trees:
        credit = np.zeros(len(forest.feature_names))
        _credit(tree, credit)
        total = credit.sum()
        if total > 0:
            per_tree.append(credit / total)
    if not per_tree:
        raise ValueError("forest has no splits; importance is undefined")
    stack = np.stack(per_tree)
    mean = stack.mean(axis=0)
    return mean / mean.sum(), stack.std(axis=0)


def partial_dependence(
    forest: Forest, records: Sequence[FeatureRecord], feature: int | str, grid: Sequence[float]
) -> list[tuple[float, float]]:
    if not records or len(grid) == 0:
        raise ValueError("partial dependence needs records and a grid")
    f = FEATURES.index(feature) if isinstance(feature, str) else int(feature)
    X = _feature_matrix(records)
    out = []
    for v in grid:
        Xv = X.copy()
        Xv[:, f] = v
        out.append((float(v), float(predict(forest, Xv).mean())))
    return out


def rmse(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.sqrt(np.mean((np.asarray(pred) - np.asarray(target)) ** 2)))


def r2(pred: np.ndarray, target: np.ndarray) -> float:
    target = np.asarray(target, dtype=np.float64)
    ss_tot = float(np.sum((target - target.mean()) ** 2))
    ss_res = float(np.sum((target - np.asarray(pred)) ** 2))
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else math.nan
