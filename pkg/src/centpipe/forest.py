"""From-scratch random-forest classifier.

Axis-aligned CART trees grown on seeded bootstrap resamples, mtry features
per split (default floor(sqrt(p))), thresholds at midpoints of adjacent
observed values, ties broken toward the lowest feature index then lowest
threshold. Every tree draws from np.random.default_rng([seed, tree_index]),
so fits are bit-for-bit reproducible and schedule-independent.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass

import numpy as np

MODEL_MAGIC = b"CENTFRST"
MODEL_VERSION = 1

CRITERIA = ("gini", "entropy")


class ForestError(Exception):
    """Model file load failure (magic/version/truncation/checksum)."""


@dataclass(frozen=True)
class ForestConfig:
    tree_count: int = 100
    mtry: int | None = None  # None: floor(sqrt(feature_count)) at fit time
    max_depth: int | None = None
    min_leaf: int = 1
    seed: int = 0
    bootstrap: bool = True
    criterion: str = "gini"

    def __post_init__(self):
        if self.tree_count < 1:
            raise ValueError(f"tree_count must be >= 1, got {self.tree_count}")
        if self.min_leaf < 1:
            raise ValueError(f"min_leaf must be >= 1, got {self.min_leaf}")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError(f"mtry must be >= 1, got {self.mtry}")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError(f"max_depth must be >= 1, got {self.max_depth}")
        if self.criterion not in CRITERIA:
            raise ValueError(f"criterion must be one of {CRITERIA}, got {self.criterion!r}")


@dataclass
class DecisionTree:
    """Flat node arrays; feature == -1 marks a leaf, children are -1 there.

    counts[i] holds the training class counts reaching node i; gain[i] is the
    split's impurity decrease weighted by the fraction of bootstrap samples
    at the node (0 at leaves).
    """
    feature: np.ndarray    # int32
    threshold: np.ndarray  # float64
    left: np.ndarray       # int32
    right: np.ndarray      # int32
    counts: np.ndarray     # float64 (nodes, classes)
    gain: np.ndarray       # float64


@dataclass
class ForestModel:
    trees: list[DecisionTree]
    feature_count: int
    class_count: int
    config: ForestConfig
    mtry: int  # resolved value actually used
    split_counts: np.ndarray       # int64 per feature
    oob_indices: list[np.ndarray]  # per tree, sorted sample indices left out


def _impurity(counts: np.ndarray, criterion: str) -> float:
    p = counts / counts.sum()
    if criterion == "gini":
        return float(1.0 - (p * p).sum())
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def _row_impurity(counts: np.ndarray, sizes: np.ndarray, criterion: str) -> np.ndarray:
    p = counts / sizes[:, None]
    if criterion == "gini":
        return 1.0 - (p * p).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log2(p), 0.0)
    return -terms.sum(axis=1)


def _best_threshold(values: np.ndarray, labels: np.ndarray, class_count: int,
                    min_leaf: int, criterion: str, parent_imp: float):
    """Best midpoint split of one feature: (decrease, threshold) or None.

    Candidate thresholds sit between adjacent distinct sorted values; a
    candidate must actually separate in float (value <= t routes left) and
    satisfy min_leaf on both sides. First maximum wins, so equal decreases
    resolve to the lowest threshold.
    """
    n = len(values)
    order = np.argsort(values, kind="stable")
    sv = values[order]
    onehot = np.zeros((n, class_count))
    onehot[np.arange(n), labels[order]] = 1.0
    cum = np.cumsum(onehot, axis=0)

    thr = (sv[:-1] + sv[1:]) / 2.0
    n_left = np.arange(1, n, dtype=np.float64)
    n_right = n - n_left
    valid = (sv[:-1] <= thr) & (thr < sv[1:])
    valid &= (n_left >= min_leaf) & (n_right >= min_leaf)
    if not valid.any():
        return None

    left_counts = cum[:-1]
    right_counts = cum[-1] - left_counts
    weighted = (n_left * _row_impurity(left_counts, n_left, criterion)
                + n_right * _row_impurity(right_counts, n_right, criterion)) / n
    decrease = np.where(valid, parent_imp - weighted, -np.inf)
    best = int(np.argmax(decrease))
    if decrease[best] <= 1e-12:
        return None
    return float(decrease[best]), float(thr[best])


def _build_tree(X: np.ndarray, y: np.ndarray, sample_idx: np.ndarray, class_count: int,
                config: ForestConfig, mtry: int, rng) -> DecisionTree:
    feature, threshold, left, right, counts, gain = [], [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(None)
        gain.append(0.0)
        return len(feature) - 1

    n_boot = len(sample_idx)
    stack = [(new_node(), sample_idx, 0)]
    while stack:
        nid, idx, depth = stack.pop()
        labs = y[idx]
        cnt = np.bincount(labs, minlength=class_count).astype(np.float64)
        counts[nid] = cnt
        if ((cnt > 0).sum() < 2 or len(idx) < 2 * config.min_leaf
                or (config.max_depth is not None and depth >= config.max_depth)):
            continue
        parent_imp = _impurity(cnt, config.criterion)
        candidates = np.sort(rng.choice(X.shape[1], size=mtry, replace=False))
        best = None  # (decrease, feature, threshold); strict > keeps lowest feature on ties
        for f in candidates:
            found = _best_threshold(X[idx, f], labs, class_count,
                                    config.min_leaf, config.criterion, parent_imp)
            if found is not None and (best is None or found[0] > best[0]):
                best = (found[0], int(f), found[1])
        if best is None:
            continue
        dec, f, t = best
        mask = X[idx, f] <= t
        lid, rid = new_node(), new_node()
        feature[nid], threshold[nid] = f, t
        left[nid], right[nid] = lid, rid
        gain[nid] = dec * len(idx) / n_boot
        stack.append((rid, idx[~mask], depth + 1))
        stack.append((lid, idx[mask], depth + 1))

    return DecisionTree(np.array(feature, np.int32), np.array(threshold, np.float64),
                        np.array(left, np.int32), np.array(right, np.int32),
                        np.stack(counts), np.array(gain, np.float64))


def fit(features, labels, config: ForestConfig = ForestConfig()) -> ForestModel:
    """Grow the forest. Constant features with mixed labels yield single-leaf
    trees rather than an error."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {X.shape}")
    n, p = X.shape
    if n != len(y):
        raise ValueError(f"{n} feature rows but {len(y)} labels")
    if n < 2:
        raise ValueError("need at least 2 samples")
    if y.min() < 0:
        raise ValueError("labels must be nonnegative class indices")
    class_count = int(y.max()) + 1
    if len(np.unique(y)) < 2:
        raise ValueError("need at least 2 classes present")
    mtry = config.mtry if config.mtry is not None else max(1, int(math.sqrt(p)))
    if mtry > p:
        raise ValueError(f"mtry {mtry} exceeds feature count {p}")

    trees, oob = [], []
    for t in range(config.tree_count):
        rng = np.random.default_rng([config.seed, t])
        if config.bootstrap:
            boot = rng.integers(0, n, n)
            oob.append(np.setdiff1d(np.arange(n), boot))
        else:
            boot = np.arange(n)
            oob.append(np.empty(0, dtype=np.int64))
        trees.append(_build_tree(X, y, boot, class_count, config, mtry, rng))

    split_counts = np.zeros(p, dtype=np.int64)
    for tree in trees:
        used = tree.feature[tree.feature >= 0]
        split_counts += np.bincount(used, minlength=p)
    return ForestModel(trees, p, class_count, config, mtry, split_counts, oob)


def _walk(tree: DecisionTree, x: np.ndarray) -> int:
    nid = 0
    while tree.feature[nid] >= 0:
        nid = tree.left[nid] if x[tree.feature[nid]] <= tree.threshold[nid] else tree.right[nid]
    return nid


def predict_proba(model: ForestModel, feature_vector) -> np.ndarray:
    """Mean of per-tree leaf class distributions; sums to 1."""
    x = np.asarray(feature_vector, dtype=np.float64).ravel()
    if len(x) != model.feature_count:
        raise ValueError(f"feature vector length {len(x)} != {model.feature_count}")
    acc = np.zeros(model.class_count)
    for tree in model.trees:
        cnt = tree.counts[_walk(tree, x)]
        acc += cnt / cnt.sum()
    return acc / len(model.trees)


def predict_proba_many(model: ForestModel, features) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.feature_count:
        raise ValueError(f"features must be (n, {model.feature_count}), got {X.shape}")
    return np.stack([predict_proba(model, row) for row in X])


@dataclass(frozen=True)
class FeatureImportance:
    split_counts: np.ndarray       # int64, per feature
    impurity_decrease: np.ndarray  # float64, per feature, averaged over trees


def feature_importance(model: ForestModel) -> FeatureImportance:
    """Split counts plus sample-weighted impurity decrease per feature.

    Each split contributes its decrease scaled by the fraction of that tree's
    bootstrap samples reaching the node; totals are averaged over trees.
    Features never chosen score 0 on both measures.
    """
    if not model.trees:
        raise ValueError("model has no trees")
    decrease = np.zeros(model.feature_count)
    for tree in model.trees:
        internal = tree.feature >= 0
        np.add.at(decrease, tree.feature[internal], tree.gain[internal])
    return FeatureImportance(model.split_counts.copy(), decrease / len(model.trees))


def oob_score(model: ForestModel, features, labels) -> float:
    """Out-of-bag accuracy: each sample voted on only by trees that never saw
    it. Samples in every bootstrap are skipped."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    votes = np.zeros((len(X), model.class_count))
    seen = np.zeros(len(X), dtype=bool)
    for tree, oob in zip(model.trees, model.oob_indices):
        for i in oob:
            cnt = tree.counts[_walk(tree, X[i])]
            votes[i] += cnt / cnt.sum()
            seen[i] = True
    if not seen.any():
        raise ValueError("no out-of-bag samples (bootstrap disabled?)")
    pred = votes[seen].argmax(axis=1)
    return float((pred == y[seen]).mean())


def _config_json(model: ForestModel) -> bytes:
    c = model.config
    return json.dumps({
        "tree_count": c.tree_count, "mtry": c.mtry, "max_depth": c.max_depth,
        "min_leaf": c.min_leaf, "seed": c.seed, "bootstrap": c.bootstrap,
        "criterion": c.criterion, "resolved_mtry": model.mtry,
    }, sort_keys=True).encode()


def save_model(model: ForestModel, path) -> None:
    parts = [MODEL_MAGIC, np.uint32(MODEL_VERSION).tobytes(),
             np.uint32(model.feature_count).tobytes(),
             np.uint32(model.class_count).tobytes(),
             np.uint32(len(model.trees)).tobytes()]
    blob = _config_json(model)
    parts.append(np.uint32(len(blob)).tobytes())
    parts.append(blob)
    for tree, oob in zip(model.trees, model.oob_indices):
        parts.append(np.uint32(len(tree.feature)).tobytes())
        parts.append(tree.feature.astype("<i4").tobytes())
        parts.append(tree.threshold.astype("<f8").tobytes())
        parts.append(tree.left.astype("<i4").tobytes())
        parts.append(tree.right.astype("<i4").tobytes())
        parts.append(tree.counts.astype("<f8").tobytes())
        parts.append(tree.gain.astype("<f8").tobytes())
        parts.append(np.uint32(len(oob)).tobytes())
        parts.append(np.asarray(oob, dtype="<i8").tobytes())
    parts.append(model.split_counts.astype("<i8").tobytes())
    body = b"".join(parts)
    with open(path, "wb") as f:
        f.write(body)
        f.write(np.uint32(zlib.crc32(body)).tobytes())


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ForestError("truncated model file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return int(np.frombuffer(self.take(4), "<u4")[0])

    def array(self, dtype: str, count: int, itemsize: int) -> np.ndarray:
        return np.frombuffer(self.take(itemsize * count), dtype).copy()


def load_model(path) -> ForestModel:
    # parse structure first, CRC last: truncation reports as truncation
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(MODEL_MAGIC) + 8 or raw[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ForestError(f"{path}: not a forest model file (bad magic)")
    cur = _Cursor(raw[:-4])
    cur.take(len(MODEL_MAGIC))
    version = cur.u32()
    if version != MODEL_VERSION:
        raise ForestError(f"{path}: unsupported model version {version}")
    feature_count = cur.u32()
    class_count = cur.u32()
    n_trees = cur.u32()
    meta = json.loads(cur.take(cur.u32()).decode())
    config = ForestConfig(meta["tree_count"], meta["mtry"], meta["max_depth"],
                          meta["min_leaf"], meta["seed"], meta["bootstrap"],
                          meta["criterion"])
    trees, oob = [], []
    for _ in range(n_trees):
        n_nodes = cur.u32()
        tree = DecisionTree(
            cur.array("<i4", n_nodes, 4).astype(np.int32),
            cur.array("<f8", n_nodes, 8),
            cur.array("<i4", n_nodes, 4).astype(np.int32),
            cur.array("<i4", n_nodes, 4).astype(np.int32),
            cur.array("<f8", n_nodes * class_count, 8).reshape(n_nodes, class_count),
            cur.array("<f8", n_nodes, 8))
        trees.append(tree)
        oob.append(cur.array("<i8", cur.u32(), 8))
    split_counts = cur.array("<i8", feature_count, 8)
    if cur.pos != len(cur.buf):
        raise ForestError(f"{path}: trailing bytes after model tables")
    if zlib.crc32(raw[:-4]) != int(np.frombuffer(raw[-4:], "<u4")[0]):
        raise ForestError(f"{path}: checksum mismatch")
    return ForestModel(trees, feature_count, class_count, config,
                       meta["resolved_mtry"], split_counts, oob)


def dump_model(model: ForestModel) -> str:
    """Human-readable tree listing for debugging."""
    lines = [f"forest: {len(model.trees)} trees, {model.feature_count} features, "
             f"{model.class_count} classes, criterion={model.config.criterion}"]
    for ti, tree in enumerate(model.trees):
        lines.append(f"tree {ti}: {len(tree.feature)} nodes")

        def emit(nid: int, depth: int):
            pad = "  " * (depth + 1)
            if tree.feature[nid] < 0:
                dist = ", ".join(f"{int(c)}" for c in tree.counts[nid])
                lines.append(f"{pad}leaf [{dist}]")
            else:
                lines.append(f"{pad}node {nid}: f{tree.feature[nid]} <= "
                             f"{tree.threshold[nid]:.6g} (gain {tree.gain[nid]:.4g})")
                emit(tree.left[nid], depth + 1)
                emit(tree.right[nid], depth + 1)

        emit(0, 0)
    return "\n".join(lines) + "\n"
