"""Cross-validation, ROC/AUC, and the label-permutation control.

AUC is the trapezoid over a tie-grouped threshold sweep, which equals the
Mann-Whitney pairwise statistic (ties count half) exactly; tests pin the two
against each other. Fold assignment is deterministic in the seed, and the
permutation control shuffles labels before folds are built so the null
experiment re-stratifies on the shuffled labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forest import ForestConfig, fit, predict_proba_many


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    stratified: bool
    test_folds: tuple  # tuple of int64 index arrays, one per fold

    def __post_init__(self):
        allidx = np.concatenate(self.test_folds)
        if len(np.unique(allidx)) != len(allidx):
            raise ValueError("fold test sets overlap")
        sizes = [len(f) for f in self.test_folds]
        if max(sizes) - min(sizes) > 1:
            raise ValueError(f"fold sizes differ by more than 1: {sizes}")

    def train_fold(self, i: int) -> np.ndarray:
        n = sum(len(f) for f in self.test_folds)
        mask = np.ones(n, dtype=bool)
        mask[self.test_folds[i]] = False
        return np.flatnonzero(mask)


def kfold_split(labels, k: int = 5, seed: int = 0, stratified: bool = True) -> FoldPlan:
    """Deal permuted indices round-robin into k test folds.

    Stratified dealing goes class by class with a continuing fold offset, so
    fold sizes differ by at most 1 overall and per class.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if n < k:
        raise ValueError(f"need at least k={k} samples, got {n}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    folds = [[] for _ in range(k)]
    if stratified:
        cursor = 0
        for cls in np.unique(labels):
            members = order[labels[order] == cls]
            if len(members) < k:
                raise ValueError(f"class {cls} has {len(members)} members, fewer than k={k}")
            for i, idx in enumerate(members):
                folds[(cursor + i) % k].append(idx)
            cursor += len(members)
    else:
        for i, idx in enumerate(order):
            folds[i % k].append(idx)
    tests = tuple(np.sort(np.array(f, dtype=np.int64)) for f in folds)
    return FoldPlan(k, seed, stratified, tests)


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray  # starts at +inf (no positives predicted)
    fpr: np.ndarray
    tpr: np.ndarray

    def __post_init__(self):
        f, t = np.asarray(self.fpr), np.asarray(self.tpr)
        if not (f[0] == 0 and t[0] == 0 and f[-1] == 1 and t[-1] == 1):
            raise ValueError("curve must run from (0,0) to (1,1)")
        if (np.diff(f) < 0).any() or (np.diff(t) < 0).any():
            raise ValueError("curve coordinates must be nondecreasing")


def roc_curve(scores, labels) -> RocCurve:
    """Threshold sweep over distinct scores, ties grouped into single steps."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.int64).ravel()
    if len(s) != len(y):
        raise ValueError(f"{len(s)} scores but {len(y)} labels")
    pos = int((y == 1).sum())
    neg = int((y == 0).sum())
    if pos == 0 or neg == 0 or pos + neg != len(y):
        raise ValueError("labels must be binary 0/1 with both classes present")
    order = np.argsort(-s, kind="stable")
    ss, yy = s[order], y[order]
    distinct = np.flatnonzero(np.diff(ss) != 0)
    cut = np.concatenate([distinct, [len(ss) - 1]])  # last index of each tie group
    tp = np.cumsum(yy == 1)[cut]
    fp = np.cumsum(yy == 0)[cut]
    thresholds = np.concatenate([[np.inf], ss[cut]])
    fpr = np.concatenate([[0.0], fp / neg])
    tpr = np.concatenate([[0.0], tp / pos])
    return RocCurve(thresholds, fpr, tpr)


def auc(scores_or_curve, labels=None) -> float:
    """Trapezoidal area under the ROC curve, in [0, 1]."""
    curve = (scores_or_curve if isinstance(scores_or_curve, RocCurve)
             else roc_curve(scores_or_curve, labels))
    df = np.diff(curve.fpr)
    mid = (curve.tpr[1:] + curve.tpr[:-1]) / 2.0
    return float((df * mid).sum())


def mann_whitney(scores, labels) -> float:
    """Fraction of (positive, negative) pairs ranked correctly, ties half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    p, n = s[y == 1], s[y == 0]
    if len(p) == 0 or len(n) == 0:
        raise ValueError("labels must contain both classes")
    diff = p[:, None] - n[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (len(p) * len(n)))


def one_vs_rest_auc(probs, labels) -> float:
    """Macro mean of per-class one-vs-rest AUCs for multiclass score matrices."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    vals = [auc(probs[:, c], (labels == c).astype(np.int64))
            for c in np.unique(labels)]
    return float(np.mean(vals))


@dataclass(frozen=True)
class Metrics:
    per_fold_auc: tuple
    mean_auc: float
    fold_scores: tuple        # positive-class scores per fold, for audit
    fold_test_indices: tuple  # matching test index arrays

    def __post_init__(self):
        if any(not 0.0 <= a <= 1.0 for a in self.per_fold_auc):
            raise ValueError("per-fold AUC outside [0, 1]")


def cross_validate(features, labels, config: ForestConfig, plan: FoldPlan) -> Metrics:
    """Fit on each fold's train split, score its test split, average fold AUCs."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(X) != len(y):
        raise ValueError(f"{len(X)} feature rows but {len(y)} labels")
    fold_auc, fold_scores = [], []
    for i, test_idx in enumerate(plan.test_folds):
        train_idx = plan.train_fold(i)
        model = fit(X[train_idx], y[train_idx], config)
        scores = predict_proba_many(model, X[test_idx])[:, 1]
        fold_auc.append(auc(scores, y[test_idx]))
        fold_scores.append(scores)
    return Metrics(tuple(fold_auc), float(np.mean(fold_auc)),
                   tuple(fold_scores), tuple(plan.test_folds))


def permute_labels(labels, perm_seed: int | None) -> np.ndarray:
    """Seeded label shuffle; None is the identity permutation."""
    y = np.asarray(labels, dtype=np.int64)
    if perm_seed is None:
        return y.copy()
    return y[np.random.default_rng(perm_seed).permutation(len(y))]


def permutation_baseline(features, labels, config: ForestConfig, *, k: int = 5,
                         fold_seed: int = 0, stratified: bool = True,
                         perm_seed: int | None = None) -> Metrics:
    """Null control: shuffle labels, rebuild folds on the shuffled labels, then
    cross-validate. perm_seed None applies the identity permutation, making
    the result equal cross_validate on an identically-parameterized plan."""
    y = permute_labels(labels, perm_seed)
    plan = kfold_split(y, k=k, seed=fold_seed, stratified=stratified)
    return cross_validate(features, y, config, plan)


def write_roc_csv(curve: RocCurve, path) -> None:
    # float() unwrapping keeps repr output plain across numpy versions
    with open(path, "w", newline="\n") as f:
        f.write("threshold,fpr,tpr\n")
        for t, x, y in zip(curve.thresholds, curve.fpr, curve.tpr):
            f.write(f"{float(t)!r},{float(x)!r},{float(y)!r}\n")


def write_metrics_csv(metrics: Metrics, path, permutation_seed: int | None = None) -> None:
    with open(path, "w", newline="\n") as f:
        if permutation_seed is not None:
            f.write(f"# permutation_seed: {permutation_seed}\n")
        f.write("fold,auc\n")
        for i, a in enumerate(metrics.per_fold_auc):
            f.write(f"{i},{float(a)!r}\n")
        f.write(f"mean,{float(metrics.mean_auc)!r}\n")
