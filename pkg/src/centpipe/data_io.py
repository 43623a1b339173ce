"""Tensor file format, dataset manifests, synthetic image generation,
Markov-chain sampling for the data-processing check, and activation-dump
exchange so CENT extraction can run on activations from any network.

TensorFile layout (little-endian): magic "CENTTNSR", u32 version, u32 rank,
u64 dims[rank], float32 payload, trailing u32 CRC32 of everything before it.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
import zlib

import numpy as np

from .net import Network, forward_collect

TENSOR_MAGIC = b"CENTTNSR"
TENSOR_VERSION = 1


class TensorFileError(Exception):
    """Base class for tensor file failures."""


class BadMagicError(TensorFileError):
    pass


class VersionError(TensorFileError):
    pass


class TruncatedError(TensorFileError):
    pass


class ChecksumError(TensorFileError):
    pass


def save_tensor(path, tensor) -> None:
    arr = np.asarray(tensor)
    if arr.ndim == 0:
        raise ValueError("rank-0 tensors are not supported")
    parts = [TENSOR_MAGIC,
             np.uint32(TENSOR_VERSION).tobytes(),
             np.uint32(arr.ndim).tobytes(),
             np.asarray(arr.shape, dtype="<u8").tobytes(),
             np.ascontiguousarray(arr, dtype="<f4").tobytes()]
    body = b"".join(parts)
    with open(path, "wb") as f:
        f.write(body)
        f.write(np.uint32(zlib.crc32(body)).tobytes())


def load_tensor(path) -> np.ndarray:
    # structural checks precede the CRC so truncation classifies as truncation
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(TENSOR_MAGIC) or raw[:len(TENSOR_MAGIC)] != TENSOR_MAGIC:
        raise BadMagicError(f"{path}: not a tensor file (bad magic)")
    if len(raw) < len(TENSOR_MAGIC) + 12:
        raise TruncatedError(f"{path}: too short for a tensor header")
    pos = len(TENSOR_MAGIC)
    version = int(np.frombuffer(raw[pos:pos + 4], "<u4")[0])
    if version != TENSOR_VERSION:
        raise VersionError(f"{path}: unsupported tensor version {version}")
    rank = int(np.frombuffer(raw[pos + 4:pos + 8], "<u4")[0])
    pos += 8
    if pos + 8 * rank > len(raw) - 4:
        raise TruncatedError(f"{path}: dimension table cut short")
    dims = tuple(int(d) for d in np.frombuffer(raw[pos:pos + 8 * rank], "<u8"))
    pos += 8 * rank
    count = math.prod(dims)
    if pos + 4 * count != len(raw) - 4:
        raise TruncatedError(f"{path}: payload length does not match dims {dims}")
    if zlib.crc32(raw[:-4]) != int(np.frombuffer(raw[-4:], "<u4")[0]):
        raise ChecksumError(f"{path}: checksum mismatch")
    return np.frombuffer(raw[pos:pos + 4 * count], "<f4").reshape(dims).copy()


MANIFEST_HEADER = "image_id,path,label"


def write_manifest(path, rows, class_names) -> None:
    """rows: (image_id, relative path, label index) triples."""
    with open(path, "w", newline="\n") as f:
        f.write(f"# classes: {','.join(class_names)}\n")
        f.write(MANIFEST_HEADER + "\n")
        for image_id, rel, label in rows:
            f.write(f"{image_id},{rel},{label}\n")


def read_manifest(path):
    """Returns (rows, class_names); validates ids unique and labels in range."""
    with open(path, "r") as f:
        lines = [ln.rstrip("\n") for ln in f]
    if not lines or not lines[0].startswith("# classes: "):
        raise ValueError(f"{path}: missing '# classes:' header line")
    class_names = tuple(lines[0][len("# classes: "):].split(","))
    if len(lines) < 2 or lines[1] != MANIFEST_HEADER:
        raise ValueError(f"{path}: expected header '{MANIFEST_HEADER}'")
    rows, seen = [], set()
    for ln in lines[2:]:
        if not ln:
            continue
        parts = ln.split(",")
        if len(parts) != 3:
            raise ValueError(f"{path}: malformed row {ln!r}")
        image_id, rel, label = parts[0], parts[1], int(parts[2])
        if image_id in seen:
            raise ValueError(f"{path}: duplicate image_id {image_id!r}")
        seen.add(image_id)
        if not 0 <= label < len(class_names):
            raise ValueError(f"{path}: label {label} outside class table "
                             f"of {len(class_names)}")
        rows.append((image_id, rel, label))
    return rows, class_names


@dataclass
class LabeledDataset:
    images: np.ndarray  # (n, channels, *spatial) float32
    labels: np.ndarray  # (n,) int64
    class_names: tuple
    image_ids: tuple = ()

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and not 0 <= self.labels.max() < len(self.class_names):
            raise ValueError("labels outside class-name table")
        if not self.image_ids:
            self.image_ids = tuple(f"img_{i:04d}" for i in range(len(self.images)))
        if len(self.image_ids) != len(self.images):
            raise ValueError("image_ids length mismatch")


def save_dataset(dataset: LabeledDataset, out_dir) -> None:
    """Writes out_dir/manifest.csv plus one TensorFile per image under tensors/."""
    tensor_dir = os.path.join(out_dir, "tensors")
    os.makedirs(tensor_dir, exist_ok=True)
    rows = []
    for i, image_id in enumerate(dataset.image_ids):
        rel = f"tensors/{image_id}.tnsr"
        save_tensor(os.path.join(out_dir, rel), dataset.images[i])
        rows.append((image_id, rel, int(dataset.labels[i])))
    write_manifest(os.path.join(out_dir, "manifest.csv"), rows, dataset.class_names)


def load_dataset(path) -> LabeledDataset:
    """Accepts a dataset directory or a manifest.csv path."""
    manifest = os.path.join(path, "manifest.csv") if os.path.isdir(path) else path
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"manifest not found: {manifest}")
    rows, class_names = read_manifest(manifest)
    if not rows:
        raise ValueError(f"{manifest}: no image rows")
    base = os.path.dirname(manifest)
    images, labels, ids = [], [], []
    shape = None
    for image_id, rel, label in rows:
        arr = load_tensor(os.path.join(base, rel))
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise ValueError(f"image {image_id!r} has shape {arr.shape}, expected {shape}")
        images.append(arr)
        labels.append(label)
        ids.append(image_id)
    return LabeledDataset(np.stack(images), np.array(labels), class_names, tuple(ids))


@dataclass(frozen=True)
class SyntheticSpec:
    """Per-class texture parameters for the synthetic image generator.

    Classes must differ in at least one parameter unless null_generator is
    set (the null mode deliberately makes classes indistinguishable).
    """
    class_count: int = 2
    extent: int = 32
    per_class: int = 50
    seed: int = 0
    noise_scale: tuple = (0.1, 0.4)
    spatial_frequency: tuple = (0.0, 6.0)
    blob_density: tuple = (0.5, 0.1)
    null_generator: bool = False

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if self.extent < 4:
            raise ValueError(f"extent must be >= 4, got {self.extent}")
        if self.per_class < 1:
            raise ValueError("per_class must be >= 1")
        for name in ("noise_scale", "spatial_frequency", "blob_density"):
            if len(getattr(self, name)) != self.class_count:
                raise ValueError(f"{name} needs {self.class_count} entries")
        triples = list(zip(self.noise_scale, self.spatial_frequency, self.blob_density))
        if not self.null_generator and len(set(triples)) != len(triples):
            raise ValueError("class parameters must be distinct unless null_generator")


def _blob_field(rng, extent: int, density: float) -> np.ndarray:
    count = max(0, round(density * extent / 4))
    if count == 0:
        return np.zeros((extent, extent))
    yy, xx = np.mgrid[0:extent, 0:extent].astype(np.float64)
    sigma = extent / 8.0
    field = np.zeros((extent, extent))
    centers = rng.uniform(0, extent, size=(count, 2))
    for cy, cx in centers:
        field += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma * sigma))
    return field


def _grating(rng, extent: int, frequency: float) -> np.ndarray:
    if frequency <= 0:
        return np.zeros((extent, extent))
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:extent, 0:extent].astype(np.float64)
    phase = rng.uniform(0, 2 * np.pi)
    proj = xx * np.cos(theta) + yy * np.sin(theta)
    return np.sin(2 * np.pi * frequency * proj / extent + phase)


def generate_synthetic(spec: SyntheticSpec) -> LabeledDataset:
    """Blobby/grating/Laplace-noise images whose texture statistics separate
    the classes; no per-image normalization. Deterministic per seed."""
    rng = np.random.default_rng(spec.seed)
    n = spec.class_count * spec.per_class
    images = np.empty((n, 1, spec.extent, spec.extent), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    i = 0
    for c in range(spec.class_count):
        for _ in range(spec.per_class):
            img = (_blob_field(rng, spec.extent, spec.blob_density[c])
                   + _grating(rng, spec.extent, spec.spatial_frequency[c])
                   + rng.laplace(0.0, spec.noise_scale[c], size=(spec.extent, spec.extent)))
            images[i, 0] = img.astype(np.float32)
            labels[i] = c
            i += 1
    names = tuple(f"class_{c}" for c in range(spec.class_count))
    return LabeledDataset(images, labels, names)


@dataclass(frozen=True)
class ChainSamples:
    """Draws from X -> Y -> C (stored as x, y, c integer codes)."""
    x: np.ndarray
    y: np.ndarray
    c: np.ndarray
    noise_levels: int
    quantizer_levels: int | None


def generate_markov_chain(n: int, noise_levels: int, quantizer_levels: int | None,
                          classes: int = 2, seed: int = 0) -> ChainSamples:
    """c uniform; x = class signal + integer noise; y = quantization of x only.

    y is computed from x alone (never from c), so X -> Y -> C holds by
    construction. noise_levels=1 makes x noiseless; quantizer_levels None is
    the identity channel, 1 collapses y to a constant.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if noise_levels < 1:
        raise ValueError("noise_levels must be >= 1")
    if classes < 2:
        raise ValueError("classes must be >= 2")
    if quantizer_levels is not None and quantizer_levels < 1:
        raise ValueError("quantizer_levels must be >= 1 or None")
    rng = np.random.default_rng(seed)
    c = rng.integers(0, classes, size=n)
    step = max(1, noise_levels // 2)  # < noise_levels so class ranges overlap
    x = c * step + rng.integers(0, noise_levels, size=n)
    x_span = (classes - 1) * step + noise_levels  # theoretical code count
    if quantizer_levels is None:
        y = x.copy()
    else:
        y = np.floor(x / x_span * quantizer_levels).astype(np.int64)
        y = np.clip(y, 0, quantizer_levels - 1)
    return ChainSamples(x.astype(np.int64), y.astype(np.int64), c.astype(np.int64),
                        noise_levels, quantizer_levels)


@dataclass
class ActivationDump:
    """Per-image layer activations in read order, as forward_collect yields."""
    activations: list       # activations[i][layer] -> np.ndarray
    labels: np.ndarray
    class_names: tuple
    image_ids: tuple


def export_activation_dump(dataset: LabeledDataset, net: Network, out_dir,
                           pre_relu: bool = False) -> None:
    """One directory per image holding layer_00.tnsr, layer_01.tnsr, ...;
    the manifest's path column names the per-image directory."""
    os.makedirs(os.path.join(out_dir, "activations"), exist_ok=True)
    rows = []
    for i, image_id in enumerate(dataset.image_ids):
        rel = f"activations/{image_id}"
        img_dir = os.path.join(out_dir, rel)
        os.makedirs(img_dir, exist_ok=True)
        acts, _ = forward_collect(net, dataset.images[i], pre_relu=pre_relu)
        for li, act in enumerate(acts):
            save_tensor(os.path.join(img_dir, f"layer_{li:02d}.tnsr"), act)
        rows.append((image_id, rel, int(dataset.labels[i])))
    write_manifest(os.path.join(out_dir, "manifest.csv"), rows, dataset.class_names)


def import_activation_dump(path) -> ActivationDump:
    """Inverse of export_activation_dump; validates per-layer shape consistency
    across images and names the offending image_id on any mismatch."""
    manifest = os.path.join(path, "manifest.csv") if os.path.isdir(path) else path
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"manifest not found: {manifest}")
    rows, class_names = read_manifest(manifest)
    if not rows:
        raise ValueError(f"{manifest}: no image rows")
    base = os.path.dirname(manifest)
    per_image, labels, ids = [], [], []
    shapes = None
    for image_id, rel, label in rows:
        img_dir = os.path.join(base, rel)
        if not os.path.isdir(img_dir):
            raise FileNotFoundError(f"image {image_id!r}: activation directory missing ({img_dir})")
        layer_files = sorted(f for f in os.listdir(img_dir)
                             if f.startswith("layer_") and f.endswith(".tnsr"))
        if not layer_files:
            raise ValueError(f"image {image_id!r}: no layer tensors in {img_dir}")
        acts = [load_tensor(os.path.join(img_dir, f)) for f in layer_files]
        got = [a.shape for a in acts]
        if shapes is None:
            shapes = got
        elif got != shapes:
            raise ValueError(f"image {image_id!r}: layer shapes {got} differ from {shapes}")
        per_image.append(acts)
        labels.append(label)
        ids.append(image_id)
    return ActivationDump(per_image, np.array(labels, dtype=np.int64),
                          class_names, tuple(ids))


def write_features_csv(path, image_ids, labels, matrix) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "w", newline="\n") as f:
        cols = ",".join(f"feat_{j}" for j in range(matrix.shape[1]))
        f.write(f"image_id,label,{cols}\n")
        for image_id, label, row in zip(image_ids, labels, matrix):
            vals = ",".join(repr(float(v)) for v in row)
            f.write(f"{image_id},{int(label)},{vals}\n")


def read_features_csv(path):
    """Returns (image_ids, labels int64, feature matrix float64)."""
    with open(path, "r") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    if not lines or not lines[0].startswith("image_id,label,"):
        raise ValueError(f"{path}: expected header 'image_id,label,feat_0,...'")
    ids, labels, rows = [], [], []
    width = len(lines[0].split(",")) - 2
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != width + 2:
            raise ValueError(f"{path}: row width {len(parts)} != header width {width + 2}")
        ids.append(parts[0])
        labels.append(int(parts[1]))
        rows.append([float(v) for v in parts[2:]])
    return tuple(ids), np.array(labels, dtype=np.int64), np.array(rows, dtype=np.float64)
