"""Data ingestion: synthetic Gaussian-blob classification sets, an IDX
binary image parser/writer, and deterministic batching.

All inputs live in [0, 1]; attacks rely on that box.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["Dataset", "IdxFormatError", "make_gaussians", "load_idx", "save_idx", "batches"]

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

# per-coordinate standard deviation of the synthetic blobs; class separation
# is expressed as a multiple of this
GAUSSIAN_SIGMA = 0.05


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    split: str = "train"
    provenance: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.shape[0] == 0:
            raise ValueError("dataset is empty")
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError(f"inputs/labels count mismatch: {self.x.shape[0]} vs {self.y.shape[0]}")
        if self.x.min() < 0.0 or self.x.max() > 1.0:
            raise ValueError("inputs must lie in [0, 1]")
        if self.y.min() < 0 or self.y.max() >= self.num_classes:
            raise ValueError(f"labels out of range [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.x.shape[1:]


def _simplex_vertices(k: int, d: int) -> np.ndarray:
    """K unit vectors forming a centered regular simplex, embedded in R^d."""
    if d < k:
        raise ValueError(f"need d >= K to embed a {k}-vertex simplex, got d={d}")
    verts = np.eye(k) - 1.0 / k
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    out = np.zeros((k, d))
    out[:, :k] = verts
    return out


def make_gaussians(num_classes: int, dim: int, n_per_class: int, class_separation: float,
                   seed: int, split: str = "train") -> Dataset:
    """Isotropic Gaussian blobs with means on a simplex around the box center.

    ``class_separation`` scales the mean offsets in units of the blob sigma;
    at separation >= 10 the classes are linearly separable in practice.
    Samples are clamped into [0, 1]. Deterministic per seed.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if class_separation <= 0:
        raise ValueError("class_separation must be > 0")
    rng = np.random.default_rng(seed)
    means = 0.5 + class_separation * GAUSSIAN_SIGMA * _simplex_vertices(num_classes, dim)
    y = np.repeat(np.arange(num_classes), n_per_class)
    x = means[y] + GAUSSIAN_SIGMA * rng.standard_normal((y.size, dim))
    np.clip(x, 0.0, 1.0, out=x)
    prov = f"gaussians(K={num_classes},d={dim},n={n_per_class},sep={class_separation},seed={seed})"
    return Dataset(x, y, num_classes, split=split, provenance=prov)


def _read_idx(path: str, expect_magic: int) -> tuple[np.ndarray, tuple[int, ...]]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    magic = int.from_bytes(raw[:4], "big")
    if magic != expect_magic:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated dimension header")
    dims = tuple(int.from_bytes(raw[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim))
    count = int(np.prod(dims))
    if len(raw) != header + count:
        raise IdxFormatError(f"{path}: expected {count} data bytes, found {len(raw) - header}")
    data = np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)
    return data, dims


def load_idx(images_path: str, labels_path: str, num_classes: int | None = None,
             split: str = "train") -> Dataset:
    """Parse an IDX image/label file pair; pixels scale to [0, 1] by /255.

    3-d image files (n, h, w) gain a singleton channel axis. Counts are
    cross-checked between the two files.
    """
    images, idims = _read_idx(images_path, IMAGES_MAGIC)
    labels, _ = _read_idx(labels_path, LABELS_MAGIC)
    if idims[0] != labels.shape[0]:
        raise IdxFormatError(f"image/label count mismatch: {idims[0]} vs {labels.shape[0]}")
    if images.ndim == 3:
        images = images[:, None, :, :]
    x = images.astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    k = num_classes if num_classes is not None else int(y.max()) + 1
    if y.max() >= k:
        raise IdxFormatError(f"label {int(y.max())} out of range for {k} classes")
    return Dataset(x, y, k, split=split, provenance=f"idx({images_path})")


def save_idx(images_path: str, labels_path: str, dataset: Dataset) -> None:
    """Write a dataset back to the IDX pair (byte-quantized by *255)."""
    x = dataset.x
    if x.ndim == 4 and x.shape[1] == 1:
        x = x[:, 0]
    pixels = np.rint(x * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(IMAGES_MAGIC.to_bytes(4, "big"))
        for dim in pixels.shape:
            f.write(int(dim).to_bytes(4, "big"))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(LABELS_MAGIC.to_bytes(4, "big"))
        f.write(int(len(dataset)).to_bytes(4, "big"))
        f.write(dataset.y.astype(np.uint8).tobytes())


def batches(dataset: Dataset, batch_size: int, shuffle_seed: int):
    """Deterministic shuffled minibatches; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(shuffle_seed).permutation(len(dataset))
    for start in range(0, len(dataset), batch_size):
        idx = order[start : start + batch_size]
        yield dataset.x[idx], dataset.y[idx]
