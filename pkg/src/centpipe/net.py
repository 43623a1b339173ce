"""Layer stacks: construction, SGD training, activation snapshots, checkpoints.

A Network is an ordered list of LayerSpec plus float32 parameter arrays.
Shapes are chained and validated at build time, so the published shape trace
is available without running a forward pass.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .ops import ConvSpec, ShapeMismatch

CHECKPOINT_MAGIC = b"CENTCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Structured checkpoint load failure (magic/version/truncation/checksum)."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer: kind plus the fields that kind uses.

    conv uses `conv`; maxpool uses window/stride/padding; fully_connected and
    softmax use `width` (softmax is an affine map to `width` logits followed by
    softmax normalization).
    """

    kind: str
    conv: ConvSpec | None = None
    window: tuple[int, ...] | None = None
    stride: tuple[int, ...] | None = None
    padding: str = "valid"
    width: int | None = None

    KINDS = ("conv", "relu", "maxpool", "fully_connected", "softmax")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and self.conv is None:
            raise ValueError("conv layer needs a ConvSpec")
        if self.kind == "maxpool" and (self.window is None or self.stride is None):
            raise ValueError("maxpool layer needs window and stride")
        if self.kind in ("fully_connected", "softmax") and not self.width:
            raise ValueError(f"{self.kind} layer needs a positive width")

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.kind == "conv":
            c = self.conv
            d["conv"] = {"kernel": list(c.kernel), "stride": list(c.stride),
                         "padding": c.padding, "filter_count": c.filter_count}
        elif self.kind == "maxpool":
            d.update(window=list(self.window), stride=list(self.stride),
                     padding=self.padding)
        elif self.kind in ("fully_connected", "softmax"):
            d["width"] = self.width
        return d

    @staticmethod
    def from_dict(d: dict) -> "LayerSpec":
        kind = d["kind"]
        if kind == "conv":
            c = d["conv"]
            return LayerSpec("conv", conv=ConvSpec(tuple(c["kernel"]), tuple(c["stride"]),
                                                   c["padding"], c["filter_count"]))
        if kind == "maxpool":
            return LayerSpec("maxpool", window=tuple(d["window"]),
                             stride=tuple(d["stride"]), padding=d["padding"])
        if kind in ("fully_connected", "softmax"):
            return LayerSpec(kind, width=d["width"])
        return LayerSpec(kind)


@dataclass
class Network:
    input_shape: tuple[int, ...]
    specs: list[LayerSpec]
    params: list[tuple[np.ndarray, np.ndarray] | None]  # (weights, bias) per layer
    seed: int
    layer_shapes: list[tuple[int, ...]] = field(default_factory=list)  # post-layer shapes


def _chain_shapes(input_shape: tuple[int, ...], specs: list[LayerSpec]) -> list[tuple[int, ...]]:
    shapes = []
    cur = tuple(input_shape)
    for i, spec in enumerate(specs):
        if spec.kind == "conv":
            c = spec.conv
            if len(cur) != len(c.kernel) + 1:
                raise ShapeMismatch(f"layer {i}: conv expects (channels, spatial) rank "
                                    f"{len(c.kernel) + 1}, got {cur}")
            cur = (c.filter_count,) + c.output_extent(cur[1:])
        elif spec.kind == "relu":
            pass
        elif spec.kind == "maxpool":
            rank = len(spec.window)
            if len(cur) < rank:
                raise ShapeMismatch(f"layer {i}: pool window {spec.window} deeper than {cur}")
            out = ops._out_extent(cur[len(cur) - rank:], spec.window, spec.stride, spec.padding)
            cur = cur[:len(cur) - rank] + out
        elif spec.kind in ("fully_connected", "softmax"):
            cur = (spec.width,)
        shapes.append(cur)
    return shapes


def _init_params(input_shape, specs, layer_shapes, seed):
    """Uniform[-s, s] with s = sqrt(6 / (fan_in + fan_out)); zero biases."""
    rng = np.random.default_rng(seed)
    params: list[tuple[np.ndarray, np.ndarray] | None] = []
    prev = tuple(input_shape)
    for spec, shape in zip(specs, layer_shapes):
        if spec.kind == "conv":
            c = spec.conv
            ksize = math.prod(c.kernel)
            fan_in, fan_out = prev[0] * ksize, c.filter_count * ksize
            s = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-s, s, size=(c.filter_count, prev[0]) + c.kernel)
            params.append((w.astype(np.float32), np.zeros(c.filter_count, np.float32)))
        elif spec.kind in ("fully_connected", "softmax"):
            n = math.prod(prev)
            s = math.sqrt(6.0 / (n + spec.width))
            w = rng.uniform(-s, s, size=(spec.width, n))
            params.append((w.astype(np.float32), np.zeros(spec.width, np.float32)))
        else:
            params.append(None)
        prev = shape
    return params


def build_network(input_shape: tuple[int, ...], specs: list[LayerSpec], seed: int = 0) -> Network:
    shapes = _chain_shapes(tuple(input_shape), specs)
    params = _init_params(input_shape, specs, shapes, seed)
    return Network(tuple(input_shape), list(specs), params, seed, shapes)


def _conv_block(filters: int, kernel: tuple[int, ...], conv_stride: tuple[int, ...],
                conv_pad: str, pool_stride: tuple[int, ...], pool_pad: str) -> list[LayerSpec]:
    rank = len(kernel)
    return [
        LayerSpec("conv", conv=ConvSpec(kernel, conv_stride, conv_pad, filters)),
        LayerSpec("relu"),
        LayerSpec("maxpool", window=(2,) * rank, stride=pool_stride, padding=pool_pad),
    ]


REFERENCE_VARIANTS = ("pool-reduces", "conv-stride-reduces")


def build_reference_3d(variant: str = "pool-reduces", seed: int = 0) -> Network:
    """4-layer volumetric stack: 64^3 input -> 10x32^3 -> 10x16^3 -> 128 -> 2.

    pool-reduces: unit-stride zero-padded conv, pooling halves each extent.
    conv-stride-reduces: stride-2 conv halves, same-extent stride-1 pooling.
    """
    if variant not in REFERENCE_VARIANTS:
        raise ValueError(f"variant must be one of {REFERENCE_VARIANTS}, got {variant!r}")
    if variant == "pool-reduces":
        block = lambda f: _conv_block(f, (2, 2, 2), (1, 1, 1), "same", (2, 2, 2), "valid")
    else:
        block = lambda f: _conv_block(f, (2, 2, 2), (2, 2, 2), "valid", (1, 1, 1), "same")
    specs = block(10) + block(10) + [
        LayerSpec("fully_connected", width=128),
        LayerSpec("softmax", width=2),
    ]
    return build_network((1, 64, 64, 64), specs, seed)


DESK_EXTENTS = (32, 64)


def build_desk_2d(input_extent: int, classes: int, seed: int = 0) -> Network:
    """2D analog of the volumetric stack for desk-scale synthetic experiments."""
    if input_extent not in DESK_EXTENTS:
        raise ValueError(f"input_extent must be one of {DESK_EXTENTS}, got {input_extent}")
    if classes < 2:
        raise ValueError(f"classes must be >= 2, got {classes}")
    block = lambda f: _conv_block(f, (2, 2), (1, 1), "same", (2, 2), "valid")
    specs = block(10) + block(10) + [
        LayerSpec("fully_connected", width=128),
        LayerSpec("softmax", width=classes),
    ]
    return build_network((1, input_extent, input_extent), specs, seed)


def block_ends(specs: list[LayerSpec]) -> list[int]:
    """Index of the last layer of each block (conv + its relu/pool tail, fc, softmax)."""
    ends = []
    i = 0
    while i < len(specs):
        if specs[i].kind == "conv":
            j = i
            while j + 1 < len(specs) and specs[j + 1].kind in ("relu", "maxpool"):
                j += 1
            ends.append(j)
            i = j + 1
        else:
            ends.append(i)
            i += 1
    return ends


def shape_trace(net: Network) -> list[tuple[int, ...]]:
    """Input shape followed by each block's output shape."""
    return [net.input_shape] + [net.layer_shapes[i] for i in block_ends(net.specs)]


def cent_read_points(specs: list[LayerSpec], pre_relu: bool = False) -> list[int]:
    """Layer indices whose outputs feed CENT extraction.

    Each conv block contributes its block-end output (or the raw conv output
    when pre_relu), and every fully_connected layer contributes its output.
    The softmax layer never does.
    """
    points = []
    i = 0
    while i < len(specs):
        if specs[i].kind == "conv":
            j = i
            while j + 1 < len(specs) and specs[j + 1].kind in ("relu", "maxpool"):
                j += 1
            points.append(i if pre_relu else j)
            i = j + 1
        else:
            if specs[i].kind == "fully_connected":
                points.append(i)
            i += 1
    return points


def _forward_layers(net: Network, x: np.ndarray):
    """Run all layers, returning per-layer outputs and backward caches."""
    if tuple(x.shape) != net.input_shape:
        raise ShapeMismatch(f"input {x.shape} != network input shape {net.input_shape}")
    outs, caches = [], []
    cur = x
    for spec, par in zip(net.specs, net.params):
        if spec.kind == "conv":
            w, b = par
            nxt = ops.conv_forward(cur, w, b, spec.conv)
            caches.append(cur)
        elif spec.kind == "relu":
            nxt = ops.relu(cur)
            caches.append(cur)
        elif spec.kind == "maxpool":
            nxt, cache = ops.maxpool(cur, spec.window, spec.stride, spec.padding)
            caches.append(cache)
        elif spec.kind == "fully_connected":
            w, b = par
            nxt = ops.fully_connected(cur, w, b)
            caches.append(cur)
        else:  # softmax: affine to logits; probs computed by the caller's need
            w, b = par
            nxt = ops.fully_connected(cur, w, b)  # logits
            caches.append(cur)
        outs.append(nxt)
        cur = nxt
    return outs, caches


def forward_collect(net: Network, x: np.ndarray, pre_relu: bool = False
                    ) -> tuple[list[np.ndarray], np.ndarray]:
    """Forward pass returning (CENT-eligible activations, softmax output vector).

    Activations default to post-ReLU block outputs; pre_relu reads the raw conv
    outputs instead (ablation switch).
    """
    outs, _ = _forward_layers(net, x)
    acts = [outs[i] for i in cent_read_points(net.specs, pre_relu)]
    logits = outs[-1]
    probs, _, _ = ops.softmax_cross_entropy(logits, 0)
    return acts, probs


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    """Softmax output vector for one input."""
    return forward_collect(net, x)[1]


def _loss_and_grads(net: Network, x: np.ndarray, label: int):
    """Per-sample loss and float64 parameter gradients, chain rule layer by layer."""
    outs, caches = _forward_layers(net, x)
    _, loss, grad = ops.softmax_cross_entropy(outs[-1], int(label))
    grads: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    g = grad.astype(np.float64)
    for i in range(len(net.specs) - 1, -1, -1):
        spec = net.specs[i]
        if spec.kind == "conv":
            w, _ = net.params[i]
            g, gw, gb = ops.conv_backward(g, caches[i].astype(np.float64), w, spec.conv)
            grads[i] = (gw, gb)
        elif spec.kind == "relu":
            g = ops.relu_backward(g, caches[i])
        elif spec.kind == "maxpool":
            g = ops.maxpool_backward(g, caches[i])
        else:  # fully_connected or softmax affine
            w, _ = net.params[i]
            g, gw, gb = ops.fully_connected_backward(g, caches[i].astype(np.float64), w)
            grads[i] = (gw, gb)
    return loss, grads


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    epochs: int
    batch_size: int
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


def train(net: Network, dataset, config: TrainConfig) -> tuple[Network, list[float]]:
    """Mini-batch SGD on softmax cross-entropy; mutates `net` in place.

    `dataset` is anything with .images (n, *input_shape) and .labels (n,).
    Batch order is a pure function of config.seed. Returns (net, per-epoch
    mean loss). Raises TrainingDiverged naming the epoch/batch on NaN loss.
    """
    images, labels = dataset.images, np.asarray(dataset.labels)
    n = len(images)
    if n == 0:
        raise ValueError("dataset is empty")
    if config.batch_size > n:
        raise ValueError(f"batch_size {config.batch_size} exceeds dataset size {n}")
    n_classes = net.specs[-1].width
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels outside [0, {n_classes})")

    rng = np.random.default_rng(config.seed)
    trace = []
    for epoch in range(config.epochs):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        epoch_losses = []
        for bi, start in enumerate(range(0, n, config.batch_size)):
            batch = order[start:start + config.batch_size]
            acc: dict[int, list[np.ndarray]] = {}
            for idx in batch:
                loss, grads = _loss_and_grads(net, images[idx], labels[idx])
                if not np.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, batch {bi} (sample {idx})")
                epoch_losses.append(loss)
                for li, (gw, gb) in grads.items():
                    if li in acc:
                        acc[li][0] += gw.astype(np.float64)
                        acc[li][1] += gb.astype(np.float64)
                    else:
                        acc[li] = [gw.astype(np.float64), gb.astype(np.float64)]
            scale = config.learning_rate / len(batch)
            for li, (gw, gb) in acc.items():
                w, b = net.params[li]
                net.params[li] = ((w.astype(np.float64) - scale * gw).astype(np.float32),
                                  (b.astype(np.float64) - scale * gb).astype(np.float32))
        for par in net.params:
            if par is not None and not (np.isfinite(par[0]).all() and np.isfinite(par[1]).all()):
                raise TrainingDiverged(f"non-finite parameters after epoch {epoch}")
        trace.append(float(np.mean(epoch_losses)))
    return net, trace


def _write_tensor(parts: list[bytes], arr: np.ndarray) -> None:
    parts.append(np.uint32(arr.ndim).tobytes())
    parts.append(np.asarray(arr.shape, dtype="<u8").tobytes())
    parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(net: Network, path) -> None:
    header = {"input_shape": list(net.input_shape),
              "specs": [s.to_dict() for s in net.specs]}
    blob = json.dumps(header, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC,
             np.uint32(CHECKPOINT_VERSION).tobytes(),
             np.int64(net.seed).tobytes(),
             np.uint32(len(blob)).tobytes(), blob]
    tensors = [a for par in net.params if par is not None for a in par]
    parts.append(np.uint32(len(tensors)).tobytes())
    for arr in tensors:
        _write_tensor(parts, arr)
    body = b"".join(parts)
    with open(path, "wb") as f:
        f.write(body)
        f.write(np.uint32(zlib.crc32(body)).tobytes())


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return int(np.frombuffer(self.take(4), "<u4")[0])

    def i64(self) -> int:
        return int(np.frombuffer(self.take(8), "<i8")[0])


def load_checkpoint(path) -> Network:
    # parse structure first, CRC last: truncation reports as truncation
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 8 or raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    cur = _Cursor(raw[:-4])
    cur.take(len(CHECKPOINT_MAGIC))
    version = cur.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    seed = cur.i64()
    try:
        header = json.loads(cur.take(cur.u32()).decode())
        specs = [LayerSpec.from_dict(d) for d in header["specs"]]
        input_shape = tuple(header["input_shape"])
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: corrupt layer table ({exc})") from None
    n_tensors = cur.u32()
    tensors = []
    for _ in range(n_tensors):
        rank = cur.u32()
        dims = tuple(int(d) for d in np.frombuffer(cur.take(8 * rank), "<u8"))
        count = math.prod(dims)
        data = np.frombuffer(cur.take(4 * count), "<f4").reshape(dims).copy()
        tensors.append(data)
    if cur.pos != len(cur.buf):
        raise CheckpointError(f"{path}: trailing bytes after parameter table")
    if zlib.crc32(raw[:-4]) != int(np.frombuffer(raw[-4:], "<u4")[0]):
        raise CheckpointError(f"{path}: checksum mismatch")

    shapes = _chain_shapes(input_shape, specs)
    params: list[tuple[np.ndarray, np.ndarray] | None] = []
    it = iter(tensors)
    try:
        for spec in specs:
            if spec.kind in ("conv", "fully_connected", "softmax"):
                params.append((next(it), next(it)))
            else:
                params.append(None)
    except StopIteration:
        raise CheckpointError(f"{path}: parameter table shorter than layer table") from None
    if any(True for _ in it):
        raise CheckpointError(f"{path}: parameter table longer than layer table")
    return Network(input_shape, specs, params, seed, shapes)
