"""Differentiable layer primitives over dense numpy arrays.

Arrays are the tensor carrier: C-order ndarrays, float32 for network storage.
Every op is a pure function; backward passes take explicitly returned caches.
All ops preserve the input dtype but accumulate in float64, so float64 inputs
give full-precision results for finite-difference checking.

Layouts: convolution input is (channels, *spatial), filters are
(filter_count, channels, *kernel), 2D and 3D spatial ranks supported.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeMismatch(ValueError):
    """Contract violation: operand shapes are inconsistent."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeMismatch(msg)


@dataclass(frozen=True)
class ConvSpec:
    """Convolution geometry: per-axis kernel extent and stride, padding mode."""

    kernel: tuple[int, ...]
    stride: tuple[int, ...]
    padding: str = "valid"  # "valid" | "same" (zero-padded)
    filter_count: int = 1

    def __post_init__(self):
        _require(len(self.kernel) == len(self.stride),
                 f"kernel rank {self.kernel} != stride rank {self.stride}")
        _require(all(k >= 1 for k in self.kernel), f"kernel extents must be >= 1, got {self.kernel}")
        _require(all(s >= 1 for s in self.stride), f"strides must be >= 1, got {self.stride}")
        _require(self.padding in ("valid", "same"), f"unknown padding mode {self.padding!r}")
        _require(self.filter_count >= 1, f"filter_count must be >= 1, got {self.filter_count}")

    def output_extent(self, spatial: tuple[int, ...]) -> tuple[int, ...]:
        return _out_extent(spatial, self.kernel, self.stride, self.padding)


def _out_extent(spatial, kernel, stride, padding) -> tuple[int, ...]:
    _require(len(spatial) == len(kernel),
             f"spatial rank {spatial} does not match kernel rank {kernel}")
    out = []
    for s, k, st in zip(spatial, kernel, stride):
        if padding == "valid":
            o = (s - k) // st + 1
        else:
            o = -(-s // st)  # ceil
        _require(o >= 1, f"window {kernel} stride {stride} on extent {spatial} "
                         f"gives empty output on some axis")
        out.append(o)
    return tuple(out)


def _pad_amounts(spatial, kernel, stride, out) -> list[tuple[int, int]]:
    pads = []
    for s, k, st, o in zip(spatial, kernel, stride, out):
        total = max((o - 1) * st + k - s, 0)
        pads.append((total // 2, total - total // 2))
    return pads


def _spatial_windows(x: np.ndarray, kernel, stride) -> np.ndarray:
    """Strided view of all kernel-sized windows over the trailing len(kernel) axes."""
    rank = len(kernel)
    axes = tuple(range(x.ndim - rank, x.ndim))
    win = sliding_window_view(x, kernel, axis=axes)
    sub = (slice(None),) * (x.ndim - rank) + tuple(slice(None, None, s) for s in stride)
    return win[sub]


def conv_forward(x: np.ndarray, filters: np.ndarray, bias: np.ndarray,
                 spec: ConvSpec) -> np.ndarray:
    """Cross-correlate (channels, *spatial) input with (F, channels, *kernel) filters.

    Returns (F, *out_spatial); each element is the windowed dot product plus bias.
    """
    rank = len(spec.kernel)
    _require(x.ndim == rank + 1, f"input {x.shape} is not (channels, {rank} spatial axes)")
    _require(filters.ndim == rank + 2,
             f"filters {filters.shape} are not (filter_count, channels, {rank} kernel axes)")
    _require(filters.shape[0] == spec.filter_count,
             f"filters {filters.shape} disagree with spec filter_count {spec.filter_count}")
    _require(filters.shape[1] == x.shape[0],
             f"input channels {x.shape[0]} != filter channels {filters.shape[1]} "
             f"(input {x.shape}, filters {filters.shape})")
    _require(tuple(filters.shape[2:]) == spec.kernel,
             f"filter kernel {filters.shape[2:]} != spec kernel {spec.kernel}")
    _require(bias.shape == (spec.filter_count,),
             f"bias {bias.shape} != (filter_count,) = ({spec.filter_count},)")

    spatial = x.shape[1:]
    out = _out_extent(spatial, spec.kernel, spec.stride, spec.padding)
    xw = x.astype(np.float64, copy=False)
    if spec.padding == "same":
        pads = [(0, 0)] + _pad_amounts(spatial, spec.kernel, spec.stride, out)
        xw = np.pad(xw, pads)
    else:
        _require(all(s >= k for s, k in zip(spatial, spec.kernel)),
                 f"kernel {spec.kernel} exceeds input extent {spatial}")
    windows = _spatial_windows(xw, spec.kernel, spec.stride)  # (C, *out, *kernel)
    contract = ([1] + list(range(2, rank + 2)),
                [0] + list(range(rank + 1, 2 * rank + 1)))
    y = np.tensordot(filters.astype(np.float64, copy=False), windows, axes=contract)
    y += bias.astype(np.float64, copy=False).reshape((-1,) + (1,) * rank)
    return y.astype(x.dtype, copy=False)


def conv_backward(grad_output: np.ndarray, cached_input: np.ndarray,
                  filters: np.ndarray, spec: ConvSpec
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a scalar loss through conv_forward.

    Returns (grad_input, grad_filters, grad_bias) for the cached forward input.
    """
    rank = len(spec.kernel)
    spatial = cached_input.shape[1:]
    out = _out_extent(spatial, spec.kernel, spec.stride, spec.padding)
    expect = (spec.filter_count,) + out
    _require(grad_output.shape == expect,
             f"grad_output {grad_output.shape} != forward output shape {expect}")

    g = grad_output.astype(np.float64, copy=False)
    xw = cached_input.astype(np.float64, copy=False)
    if spec.padding == "same":
        pads = _pad_amounts(spatial, spec.kernel, spec.stride, out)
        xw = np.pad(xw, [(0, 0)] + pads)
    else:
        pads = [(0, 0)] * rank
    windows = _spatial_windows(xw, spec.kernel, spec.stride)  # (C, *out, *kernel)

    grad_bias = g.sum(axis=tuple(range(1, rank + 1)))
    spatial_axes = list(range(1, rank + 1))
    # (F, *out) x (C, *out, *kernel) over out -> (F, C, *kernel)
    grad_filters = np.tensordot(g, windows, axes=(spatial_axes, spatial_axes))

    gpad = np.zeros(xw.shape, dtype=np.float64)
    fw = filters.astype(np.float64, copy=False)
    for offset in itertools.product(*(range(k) for k in spec.kernel)):
        taps = fw[(slice(None), slice(None)) + offset]          # (F, C)
        contrib = np.tensordot(taps, g, axes=([0], [0]))         # (C, *out)
        sl = tuple(slice(o, o + st * n, st) for o, st, n in zip(offset, spec.stride, out))
        gpad[(slice(None),) + sl] += contrib
    crop = tuple(slice(b, b + s) for (b, _), s in zip(pads, spatial))
    grad_input = gpad[(slice(None),) + crop]

    dt = cached_input.dtype
    return (grad_input.astype(dt, copy=False),
            grad_filters.astype(dt, copy=False),
            grad_bias.astype(dt, copy=False))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_output: np.ndarray, cached_input: np.ndarray) -> np.ndarray:
    """Pass-through where the cached input was strictly positive, zero elsewhere."""
    _require(grad_output.shape == cached_input.shape,
             f"grad_output {grad_output.shape} != input {cached_input.shape}")
    return grad_output * (cached_input > 0)


@dataclass(frozen=True)
class PoolCache:
    """Everything maxpool_backward needs: geometry plus per-window argmax."""

    input_shape: tuple[int, ...]
    window: tuple[int, ...]
    stride: tuple[int, ...]
    padding: str
    pad_before: tuple[int, ...]
    padded_spatial: tuple[int, ...]
    argmax: np.ndarray  # flat index into each window, lowest-index tie break


def maxpool(x: np.ndarray, window: tuple[int, ...], stride: tuple[int, ...],
            padding: str = "valid") -> tuple[np.ndarray, PoolCache]:
    """Max over sliding windows on the trailing len(window) axes.

    Leading axes (e.g. channels) are untouched. Returns the pooled array and a
    cache recording the argmax of every window for gradient routing.
    """
    rank = len(window)
    _require(len(stride) == rank, f"window rank {window} != stride rank {stride}")
    _require(x.ndim >= rank, f"input {x.shape} has fewer axes than window {window}")
    _require(all(w >= 1 for w in window) and all(s >= 1 for s in stride),
             f"window {window} and stride {stride} must be positive")
    _require(padding in ("valid", "same"), f"unknown padding mode {padding!r}")

    spatial = x.shape[x.ndim - rank:]
    if padding == "valid":
        _require(all(s >= w for s, w in zip(spatial, window)),
                 f"window {window} larger than input extent {spatial}")
    out = _out_extent(spatial, window, stride, padding)
    xw = x.astype(np.float64, copy=False)
    if padding == "same":
        pads = _pad_amounts(spatial, window, stride, out)
        lead_pads = [(0, 0)] * (x.ndim - rank)
        xw = np.pad(xw, lead_pads + pads, constant_values=-np.inf)
    else:
        pads = [(0, 0)] * rank
    windows = _spatial_windows(xw, window, stride)
    flat = windows.reshape(windows.shape[:x.ndim] + (-1,))
    argmax = np.argmax(flat, axis=-1)  # first occurrence = lowest flat index
    pooled = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    cache = PoolCache(x.shape, tuple(window), tuple(stride), padding,
                      tuple(b for b, _ in pads), xw.shape[x.ndim - rank:], argmax)
    return pooled.astype(x.dtype, copy=False), cache


def maxpool_backward(grad_output: np.ndarray, cache: PoolCache) -> np.ndarray:
    """Scatter the upstream gradient to each window's recorded argmax position."""
    rank = len(cache.window)
    lead = cache.input_shape[:len(cache.input_shape) - rank]
    out = grad_output.shape[len(lead):]
    expect = lead + tuple(_out_extent(cache.input_shape[len(lead):], cache.window,
                                      cache.stride, cache.padding))
    _require(grad_output.shape == expect,
             f"grad_output {grad_output.shape} != pooled shape {expect}")

    nlead = int(np.prod(lead)) if lead else 1
    g = grad_output.astype(np.float64, copy=False).reshape((nlead,) + out)
    arg = cache.argmax.reshape((nlead,) + out)
    gpad = np.zeros((nlead,) + cache.padded_spatial, dtype=np.float64)

    offs = np.unravel_index(arg, cache.window)
    grids = np.indices((nlead,) + out)
    idx = [grids[0]]
    for d in range(rank):
        idx.append(grids[1 + d] * cache.stride[d] + offs[d])
    np.add.at(gpad, tuple(idx), g)  # overlapping windows accumulate

    crop = tuple(slice(b, b + s)
                 for b, s in zip(cache.pad_before, cache.input_shape[len(lead):]))
    grad_input = gpad[(slice(None),) + crop].reshape(cache.input_shape)
    return grad_input.astype(np.asarray(grad_output).dtype, copy=False)


def fully_connected(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map: weights (m, n) @ flattened input (n,) + bias (m,)."""
    flat = x.reshape(-1)
    _require(weights.ndim == 2 and weights.shape[1] == flat.shape[0],
             f"weights {weights.shape} incompatible with flattened input "
             f"({flat.shape[0]},) from {x.shape}")
    _require(bias.shape == (weights.shape[0],),
             f"bias {bias.shape} != ({weights.shape[0]},)")
    y = weights.astype(np.float64, copy=False) @ flat.astype(np.float64, copy=False)
    y += bias.astype(np.float64, copy=False)
    return y.astype(x.dtype, copy=False)


def fully_connected_backward(grad_output: np.ndarray, cached_input: np.ndarray,
                             weights: np.ndarray
                             ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Standard affine gradients; grad_input is reshaped to the cached input."""
    _require(grad_output.shape == (weights.shape[0],),
             f"grad_output {grad_output.shape} != ({weights.shape[0]},)")
    g = grad_output.astype(np.float64, copy=False)
    flat = cached_input.astype(np.float64, copy=False).reshape(-1)
    grad_input = (weights.astype(np.float64, copy=False).T @ g).reshape(cached_input.shape)
    grad_weights = np.outer(g, flat)
    dt = cached_input.dtype
    return (grad_input.astype(dt, copy=False),
            grad_weights.astype(dt, copy=False),
            g.astype(dt, copy=False))


def softmax_cross_entropy(logits: np.ndarray, true_class: int
                          ) -> tuple[np.ndarray, float, np.ndarray]:
    """Stabilized softmax with log loss against a class index.

    Returns (probs, loss, grad_logits) with grad = probs - one_hot(true_class).
    """
    _require(logits.ndim == 1 and logits.shape[0] >= 2,
             f"logits {logits.shape} must be a vector of length >= 2")
    k = logits.shape[0]
    _require(0 <= true_class < k,
             f"true_class {true_class} out of range for {k} logits")
    z = logits.astype(np.float64, copy=False)
    shifted = z - z.max()
    e = np.exp(shifted)
    total = e.sum()
    probs = e / total
    loss = float(np.log(total) - shifted[true_class])
    grad = probs.copy()
    grad[true_class] -= 1.0
    dt = logits.dtype
    return probs.astype(dt, copy=False), loss, grad.astype(dt, copy=False)
