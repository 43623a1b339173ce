"""Histogram entropy estimation, CENT feature extraction, and the executable
information-theoretic checks (conditioning reduction, partition decomposition,
data-processing inequality).

All entropies are plug-in estimates in bits (log base 2), 0*log(0) := 0.
Cross-class comparisons use shared fixed-range binning: with priors taken
proportional to sample counts, the plug-in conditional entropy then never
exceeds the pooled entropy (exact concavity at the estimator level), which is
what the conditioning checks rely on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .net import Network, forward_collect

RangeMode = "minmax"  # the other accepted form is an explicit (lo, hi) pair


def _resolve_range(values: np.ndarray, range_mode):
    if isinstance(range_mode, str):
        if range_mode != "minmax":
            raise ValueError(f"range_mode must be 'minmax' or (lo, hi), got {range_mode!r}")
        return float(values.min()), float(values.max())
    lo, hi = float(range_mode[0]), float(range_mode[1])
    if not lo < hi:
        raise ValueError(f"fixed range needs lo < hi, got ({lo}, {hi})")
    return lo, hi


@dataclass(frozen=True)
class Histogram:
    bin_count: int
    lo: float
    hi: float
    counts: np.ndarray  # int64, length bin_count
    total: int
    degenerate: bool = False  # constant samples: single loaded bin, lo == hi


def _bin_indices(values: np.ndarray, lo: float, hi: float, bin_count: int) -> np.ndarray:
    clipped = np.clip(values.astype(np.float64), lo, hi)
    idx = np.floor((clipped - lo) / (hi - lo) * bin_count).astype(np.int64)
    return np.clip(idx, 0, bin_count - 1)  # upper edge lands in the last bin


def make_histogram(samples, bin_count: int = 256, range_mode="minmax") -> Histogram:
    """Equal-width histogram over the resolved range.

    range_mode "minmax" uses the sample min/max; an explicit (lo, hi) pair
    fixes the range and clips outliers into the edge bins. Constant samples
    under minmax set the degenerate flag and load a single bin.
    """
    values = np.asarray(samples, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("samples must be nonempty")
    if bin_count < 2:
        raise ValueError(f"bin_count must be >= 2, got {bin_count}")
    lo, hi = _resolve_range(values, range_mode)
    counts = np.zeros(bin_count, dtype=np.int64)
    if lo == hi:
        counts[0] = values.size
        return Histogram(bin_count, lo, hi, counts, int(values.size), degenerate=True)
    np.add.at(counts, _bin_indices(values, lo, hi, bin_count), 1)
    return Histogram(bin_count, lo, hi, counts, int(values.size))


def _entropy_p(p: np.ndarray) -> float:
    nz = p[p > 0]
    h = float(-(nz * np.log2(nz)).sum())
    return h if h > 0.0 else 0.0


def entropy(hist: Histogram) -> float:
    """Shannon entropy of the histogram in bits, in [0, log2(bin_count)]."""
    if hist.total <= 0:
        raise ValueError("histogram has no counts")
    return _entropy_p(hist.counts / hist.total)


@dataclass(frozen=True)
class LabelSpace:
    class_count: int
    priors: np.ndarray  # float64, nonnegative, sums to 1 within 1e-9

    def __post_init__(self):
        p = np.asarray(self.priors, dtype=np.float64)
        if len(p) != self.class_count:
            raise ValueError(f"{len(p)} priors for {self.class_count} classes")
        if (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("priors must be nonnegative and sum to 1 within 1e-9")
        object.__setattr__(self, "priors", p)

    @classmethod
    def from_labels(cls, labels, class_count: int | None = None) -> "LabelSpace":
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size == 0:
            raise ValueError("labels must be nonempty")
        m = int(labels.max()) + 1 if class_count is None else class_count
        counts = np.bincount(labels, minlength=m)
        return cls(m, counts / labels.size)


def conditional_entropy(per_class_samples: dict, labels: LabelSpace,
                        bin_count: int = 256, range_mode="minmax") -> float:
    """Plug-in H(Y|C) = sum_j p(c_j) * H(class-j histogram), shared bins.

    per_class_samples maps class index -> sample sequence; every class with a
    positive prior must have samples. range_mode "minmax" resolves to the
    pooled min/max so all classes share one bin grid.
    """
    groups = {}
    for j in range(labels.class_count):
        s = np.asarray(per_class_samples.get(j, ()), dtype=np.float64).ravel()
        if s.size == 0 and labels.priors[j] > 0:
            raise ValueError(f"class {j} has no samples")
        groups[j] = s
    if isinstance(range_mode, str):
        pooled = np.concatenate([s for s in groups.values() if s.size])
        shared = _resolve_range(pooled, range_mode)
        if shared[0] == shared[1]:
            return 0.0  # every sample identical: all class histograms degenerate
    else:
        shared = (float(range_mode[0]), float(range_mode[1]))
        if not shared[0] < shared[1]:
            raise ValueError(f"fixed range needs lo < hi, got {shared}")
    h = 0.0
    for j in range(labels.class_count):
        if labels.priors[j] > 0:
            h += labels.priors[j] * entropy(make_histogram(groups[j], bin_count, shared))
    return float(h)


def mutual_information(joint_counts) -> float:
    """I(Y;C) from an M x K contingency table (rows Y, columns C), in bits.

    Computed as H(Y) - H(Y|C) and cross-checked against H(C) - H(C|Y)
    within 1e-9.
    """
    table = np.asarray(joint_counts, dtype=np.float64)
    if table.ndim != 2:
        raise ValueError(f"contingency table must be 2-D, got shape {table.shape}")
    if (table < 0).any():
        raise ValueError("contingency table entries must be nonnegative")
    total = table.sum()
    if total <= 0:
        raise ValueError("contingency table is all-zero")
    p = table / total
    row = p.sum(axis=1)  # Y marginal
    col = p.sum(axis=0)  # C marginal
    h_y_given_c = sum(col[k] * _entropy_p(p[:, k] / col[k]) for k in range(p.shape[1])
                      if col[k] > 0)
    h_c_given_y = sum(row[m] * _entropy_p(p[m, :] / row[m]) for m in range(p.shape[0])
                      if row[m] > 0)
    i_forward = _entropy_p(row) - h_y_given_c
    i_reverse = _entropy_p(col) - h_c_given_y
    if abs(i_forward - i_reverse) > 1e-9:
        raise ArithmeticError(
            f"mutual information forms disagree: {i_forward} vs {i_reverse}")
    return float(i_forward) if i_forward > 0.0 else 0.0


def cent_per_filter(feature_map, bin_count: int = 256, range_mode="minmax") -> float:
    """Entropy of one filter's response histogram (all spatial values pooled)."""
    return entropy(make_histogram(np.asarray(feature_map).ravel(), bin_count, range_mode))


def cent_per_layer(layer_activations, bin_count: int = 256, range_mode="minmax") -> float:
    """Entropy of the pooled histogram over every value in the layer."""
    return entropy(make_histogram(np.asarray(layer_activations).ravel(), bin_count, range_mode))


@dataclass(frozen=True)
class CentVector:
    mode: str  # "per-filter" | "per-layer"
    values: np.ndarray  # float64 entropies in bits
    provenance: tuple  # (layer index, filter index or None) per entry
    bin_count: int

    def __post_init__(self):
        if self.mode not in ("per-filter", "per-layer"):
            raise ValueError(f"mode must be per-filter or per-layer, got {self.mode!r}")
        v = np.asarray(self.values, dtype=np.float64)
        if len(v) != len(self.provenance):
            raise ValueError("values and provenance lengths differ")
        top = math.log2(self.bin_count)
        if (v < -1e-9).any() or (v > top + 1e-9).any():
            raise ValueError(f"entropy values outside [0, log2({self.bin_count})]")
        object.__setattr__(self, "values", v)


def extract_cent_from_activations(activations, mode: str = "per-filter",
                                  bin_count: int = 256, range_mode="minmax") -> CentVector:
    """CENT vector from a list of layer activations in read order.

    Rank >= 2 arrays carry filters on axis 0: per-filter mode emits one entropy
    per filter, per-layer mode pools the whole layer. Rank-1 arrays (vector
    layers) contribute exactly one pooled value in both modes.
    """
    values, provenance = [], []
    for li, act in enumerate(activations):
        act = np.asarray(act)
        if act.ndim >= 2 and mode == "per-filter":
            for fi in range(act.shape[0]):
                values.append(cent_per_filter(act[fi], bin_count, range_mode))
                provenance.append((li, fi))
        else:
            values.append(cent_per_layer(act, bin_count, range_mode))
            provenance.append((li, None))
    return CentVector(mode, np.array(values), tuple(provenance), bin_count)


def extract_cent_features(net: Network, image: np.ndarray, mode: str = "per-filter",
                          bin_count: int = 256, range_mode="minmax",
                          pre_relu: bool = False) -> CentVector:
    """Run the network on one image and summarize each read point's responses.

    Reference 3D stack: 10 + 10 + 1 = 21 values per-filter, 1 + 1 + 1 = 3
    per-layer (the fully-connected layer pools to one value in both modes).
    """
    acts, _ = forward_collect(net, image, pre_relu=pre_relu)
    return extract_cent_from_activations(acts, mode, bin_count, range_mode)


@dataclass(frozen=True)
class FilterSelector:
    """Selects filters at one CENT read point; filters=None means all of them."""
    layer: int
    filters: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.layer < 0:
            raise ValueError("layer index must be >= 0")
        if self.filters is not None and len(self.filters) == 0:
            raise ValueError("filters tuple must be nonempty (or None for all)")


def _collect_filter_samples(dataset, net: Network, selector: FilterSelector,
                            pre_relu: bool = False):
    """Per-(filter, class) pooled activation values plus image-count priors.

    Returns (samples[fi][cls] -> 1-D array, filter ids, LabelSpace, class ids).
    """
    labels = np.asarray(dataset.labels, dtype=np.int64)
    classes = [int(c) for c in np.unique(labels)]
    first_acts, _ = forward_collect(net, dataset.images[0], pre_relu=pre_relu)
    if selector.layer >= len(first_acts):
        raise ValueError(f"selector layer {selector.layer} out of range "
                         f"(network has {len(first_acts)} read points)")
    act0 = np.asarray(first_acts[selector.layer])
    available = act0.shape[0] if act0.ndim >= 2 else 1
    filter_ids = list(selector.filters) if selector.filters is not None else list(range(available))
    for fi in filter_ids:
        if not 0 <= fi < available:
            raise ValueError(f"filter {fi} out of range (layer has {available})")

    per = {fi: {c: [] for c in classes} for fi in filter_ids}
    for img, lab in zip(dataset.images, labels):
        acts, _ = forward_collect(net, img, pre_relu=pre_relu)
        layer = np.asarray(acts[selector.layer])
        for fi in filter_ids:
            vals = layer[fi] if layer.ndim >= 2 else layer
            per[fi][int(lab)].append(np.asarray(vals, dtype=np.float64).ravel())
    samples = {fi: {c: np.concatenate(per[fi][c]) for c in classes} for fi in filter_ids}
    counts = np.array([(labels == c).sum() for c in classes], dtype=np.float64)
    space = LabelSpace(len(classes), counts / counts.sum())
    return samples, filter_ids, space, classes


def _shared_filter_range(samples_by_class: dict) -> tuple[float, float]:
    pooled = np.concatenate(list(samples_by_class.values()))
    lo, hi = float(pooled.min()), float(pooled.max())
    if lo == hi:
        hi = lo + 1.0  # constant filter: any shared grid gives 0-bit entropies
    return lo, hi


def expected_cent(dataset, net: Network, selector: FilterSelector,
                  bin_count: int = 256, pre_relu: bool = False) -> float:
    """Class-conditioned expected entropy over the selected filters.

    For each filter, class-conditional entropies use a shared fixed range
    (global min/max over the dataset) and empirical class priors; filters are
    weighted uniformly. Images contribute equally many values, so priors by
    image count equal priors by value count and the result is bounded above
    by pooled_unconditional_entropy (plug-in concavity).
    """
    samples, filter_ids, space, classes = _collect_filter_samples(dataset, net, selector, pre_relu)
    total = 0.0
    for fi in filter_ids:
        shared = _shared_filter_range(samples[fi])
        per_class = {j: samples[fi][c] for j, c in enumerate(classes)}
        total += conditional_entropy(per_class, space, bin_count, shared)
    return float(total / len(filter_ids))


def pooled_unconditional_entropy(dataset, net: Network, selector: FilterSelector,
                                 bin_count: int = 256, pre_relu: bool = False) -> float:
    """Unconditioned counterpart of expected_cent: pooled entropy per filter,
    same shared ranges, uniform filter weighting."""
    samples, filter_ids, _, _ = _collect_filter_samples(dataset, net, selector, pre_relu)
    total = 0.0
    for fi in filter_ids:
        shared = _shared_filter_range(samples[fi])
        pooled = np.concatenate(list(samples[fi].values()))
        total += entropy(make_histogram(pooled, bin_count, shared))
    return float(total / len(filter_ids))


@dataclass(frozen=True)
class PartitionReport:
    h_informative: float      # H(Y | C', F)
    h_uninformative: float    # H(Y | C'', F)
    decomposition_residual: float
    inequality_holds: bool    # h_informative < h_uninformative as given
    p_informative: float
    p_uninformative: float
    h_conditional: float      # H(Y | C, F) over all classes
    partition: tuple = field(default=((), ()))


def partition_check(dataset, net: Network, selector: FilterSelector,
                    partition: tuple, bin_count: int = 256,
                    pre_relu: bool = False) -> PartitionReport:
    """Binary class-partition decomposition for one filter.

    Verifies H(Y|C,F) = p(C')H(Y|C',F) + p(C'')H(Y|C'',F) with shared binning
    and reports whether H(Y|C',F) < H(Y|C'',F) for the partition as given.
    The direction is reported, never assumed.
    """
    if selector.filters is None or len(selector.filters) != 1:
        raise ValueError("partition_check needs a selector naming exactly one filter")
    part_a, part_b = tuple(partition[0]), tuple(partition[1])
    if not part_a or not part_b:
        raise ValueError("both partition sides must be nonempty")
    if set(part_a) & set(part_b):
        raise ValueError("partition sides must be disjoint")

    samples, filter_ids, space, classes = _collect_filter_samples(dataset, net, selector, pre_relu)
    if set(part_a) | set(part_b) != set(classes):
        raise ValueError(f"partition {partition} does not cover the classes {classes}")
    fi = filter_ids[0]
    shared = _shared_filter_range(samples[fi])
    class_h = {c: entropy(make_histogram(samples[fi][c], bin_count, shared)) for c in classes}
    prior = {c: space.priors[j] for j, c in enumerate(classes)}

    def side(members):
        p = sum(prior[c] for c in members)
        h = sum(prior[c] * class_h[c] for c in members) / p
        return p, h

    p_a, h_a = side(part_a)
    p_b, h_b = side(part_b)
    h_all = sum(prior[c] * class_h[c] for c in classes)
    residual = abs(h_all - (p_a * h_a + p_b * h_b))
    return PartitionReport(float(h_a), float(h_b), float(residual), bool(h_a < h_b),
                           float(p_a), float(p_b), float(h_all), (part_a, part_b))


def contingency_table(a, b) -> np.ndarray:
    """Joint count table of two integer-coded sequences (rows: a, cols: b)."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.size != b.size or a.size == 0:
        raise ValueError("sequences must be nonempty and equal length")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def discretize(values, max_levels: int = 64) -> np.ndarray:
    """Integer codes for a sequence: unique values if few enough, else
    equal-width bins over the observed range."""
    values = np.asarray(values).ravel()
    if values.size == 0:
        raise ValueError("values must be nonempty")
    uniq = np.unique(values)
    if uniq.size <= max_levels:
        return np.searchsorted(uniq, values).astype(np.int64)
    lo, hi = float(values.min()), float(values.max())
    return _bin_indices(values.astype(np.float64), lo, hi, max_levels)


@dataclass(frozen=True)
class DpiReport:
    i_xc: float  # I(X;C)
    i_yc: float  # I(Y;C)
    holds: bool
    slack: float


def dpi_check(chain, slack: float = 0.02) -> DpiReport:
    """Data-processing inequality on samples from a chain X -> Y -> C.

    `chain` carries integer-coded .x, .y, .c arrays. Plug-in MI from
    contingency tables; holds = I(Y;C) <= I(X;C) + slack.
    """
    i_xc = mutual_information(contingency_table(chain.x, chain.c))
    i_yc = mutual_information(contingency_table(chain.y, chain.c))
    return DpiReport(float(i_xc), float(i_yc), bool(i_yc <= i_xc + slack), slack)
