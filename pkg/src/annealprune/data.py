"""Small-image datasets: file loaders, a synthetic task, stratified splits and batching.

Corpus formats
--------------
CSV
    One example per line: ``label,p0,p1,...`` with pixels in C-major order
    (all of channel 0 row by row, then channel 1, ...). An optional first
    line ``# shape C H W`` fixes the image shape; without it images are
    taken to be single-channel squares.
idx-like binary
    Two IDX records back to back: images then labels. Each record is a
    4-byte magic ``0x00 0x00 <type> <ndim>`` (type ``0x08`` = uint8,
    ``0x0D`` = float32 big-endian), ``ndim`` big-endian uint32 dimensions,
    then the raw values. Images have dims ``(N, C, H, W)`` or ``(N, H, W)``;
    labels have dims ``(N,)`` and type uint8. uint8 pixels are scaled to
    [0, 1].
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

IDX_TYPES = {0x08: np.dtype(">u1"), 0x0D: np.dtype(">f4")}


class CorpusFormatError(ValueError):
    """Malformed corpus file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64
    num_classes: int
    mean: Optional[np.ndarray] = None  # per-channel normalization stats
    std: Optional[np.ndarray] = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index: np.ndarray) -> "Dataset":
        return replace(self, images=self.images[index], labels=self.labels[index])

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()


@dataclass
class SplitDataset:
    train: Dataset
    val: Dataset
    train_index: np.ndarray
    val_index: np.ndarray
    ratio: float = 0.7

    def merged(self) -> Dataset:
        """Train and validation together (the single-level ablation trains on both)."""
        return replace(
            self.train,
            images=np.concatenate([self.train.images, self.val.images]),
            labels=np.concatenate([self.train.labels, self.val.labels]),
        )


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


def load_small_image_corpus(path, format: Optional[str] = None, shape: Optional[Tuple[int, int, int]] = None,
                            num_classes: Optional[int] = None) -> Dataset:
    """Read a CSV or idx-like corpus into a :class:`Dataset`."""
    path = Path(path)
    raw = path.read_bytes()
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "idx"
    if not raw:
        raise CorpusFormatError(f"{path}: zero examples in empty file", 0)
    if format == "csv":
        images, labels = _parse_csv(raw, shape)
    elif format == "idx":
        images, labels = _parse_idx(raw)
    else:
        raise ValueError(f"unknown corpus format {format!r}")
    if len(labels) == 0:
        raise CorpusFormatError(f"{path}: zero examples", len(raw))
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    ds = Dataset(images, labels, k)
    logger.info("loaded %s: %d examples, sha256 %s", path, len(ds), ds.checksum())
    return ds


def _parse_csv(raw: bytes, shape):
    offset = 0
    rows, labels = [], []
    for line in raw.splitlines(keepends=True):
        text = line.decode("ascii", errors="replace").strip()
        start = offset
        offset += len(line)
        if not text:
            continue
        if text.startswith("#"):
            parts = text[1:].split()
            if parts and parts[0] == "shape":
                try:
                    shape = tuple(int(v) for v in parts[1:4])
                except ValueError:
                    raise CorpusFormatError("bad shape header", start) from None
            continue
        fields = text.split(",")
        try:
            labels.append(int(fields[0]))
            rows.append([float(v) for v in fields[1:]])
        except ValueError:
            raise CorpusFormatError(f"non-numeric field in {text[:40]!r}", start) from None
        if rows and len(rows[-1]) != len(rows[0]):
            raise CorpusFormatError("row length differs from first row", start)
    if not rows:
        return np.zeros((0, 1, 1, 1), np.float32), np.zeros(0, np.int64)
    pixels = np.asarray(rows, dtype=np.float32)
    if shape is None:
        side = int(round(np.sqrt(pixels.shape[1])))
        if side * side != pixels.shape[1]:
            raise CorpusFormatError("cannot infer square image shape; add '# shape C H W'", 0)
        shape = (1, side, side)
    if int(np.prod(shape)) != pixels.shape[1]:
        raise CorpusFormatError(f"{pixels.shape[1]} pixels do not fit shape {shape}", 0)
    return pixels.reshape((-1,) + tuple(shape)), np.asarray(labels, dtype=np.int64)


def _read_idx_record(raw: bytes, offset: int):
    if len(raw) - offset < 4:
        raise CorpusFormatError("truncated IDX magic", offset)
    zero1, zero2, code, ndim = raw[offset : offset + 4]
    if zero1 or zero2 or code not in IDX_TYPES:
        raise CorpusFormatError(f"bad IDX magic {raw[offset:offset + 4].hex()}", offset)
    offset += 4
    if len(raw) - offset < 4 * ndim:
        raise CorpusFormatError("truncated IDX dimensions", offset)
    dims = struct.unpack(f">{ndim}I", raw[offset : offset + 4 * ndim])
    offset += 4 * ndim
    dtype = IDX_TYPES[code]
    nbytes = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - offset < nbytes:
        raise CorpusFormatError(f"IDX payload needs {nbytes} bytes, {len(raw) - offset} remain", offset)
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=offset).reshape(dims)
    return data, offset + nbytes, code


def _parse_idx(raw: bytes):
    images, offset, code = _read_idx_record(raw, 0)
    labels, end, _ = _read_idx_record(raw, offset)
    if end != len(raw):
        raise CorpusFormatError("trailing bytes after label record", end)
    if labels.ndim != 1 or len(labels) != len(images):
        raise CorpusFormatError("label record does not match image count", offset)
    images = images.astype(np.float32)
    if code == 0x08:
        images = images / 255.0
    if images.ndim == 3:
        images = images[:, None]
    return images, labels.astype(np.int64)


def save_idx(path, dataset: Dataset) -> None:
    """Write ``dataset`` in the idx-like layout with float32 pixels."""
    imgs = np.ascontiguousarray(dataset.images, dtype=">f4")
    labels = np.ascontiguousarray(dataset.labels, dtype=">u1")
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, 0x0D, imgs.ndim]) + struct.pack(f">{imgs.ndim}I", *imgs.shape))
        fh.write(imgs.tobytes())
        fh.write(bytes([0, 0, 0x08, 1]) + struct.pack(">I", len(labels)))
        fh.write(labels.tobytes())


def save_csv(path, dataset: Dataset) -> None:
    c, h, w = dataset.image_shape
    with open(path, "w") as fh:
        fh.write(f"# shape {c} {h} {w}\n")
        for img, lab in zip(dataset.images, dataset.labels):
            fh.write(",".join([str(int(lab))] + [repr(float(v)) for v in img.ravel()]) + "\n")


# ---------------------------------------------------------------------------
# synthetic task
# ---------------------------------------------------------------------------


def make_synthetic_task(
    num_classes: int = 10,
    examples_per_class: int = 100,
    image_size: int = 12,
    seed: int = 0,
    noise: float = 0.25,
    channels: int = 3,
) -> Dataset:
    """Oriented-bar images; the bar angle ``pi * k / num_classes`` encodes class ``k``.

    Each image gets a random sub-pixel offset, bar width, contrast and
    per-channel tint, plus i.i.d. Gaussian noise of std ``noise``.
    """
    rng = np.random.default_rng(seed)
    n = num_classes * examples_per_class
    labels = np.repeat(np.arange(num_classes), examples_per_class)
    rng.shuffle(labels)
    coords = np.arange(image_size) - (image_size - 1) / 2.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    theta = np.pi * labels / num_classes + rng.normal(0.0, 0.02, n)
    offset = rng.uniform(-1.5, 1.5, n)
    width = rng.uniform(0.8, 1.4, n)
    contrast = rng.uniform(0.7, 1.3, n)
    # signed distance of each pixel from the bar's centre line
    dist = (-np.sin(theta)[:, None, None] * xx + np.cos(theta)[:, None, None] * yy) - offset[:, None, None]
    bar = np.exp(-0.5 * (dist / width[:, None, None]) ** 2) * contrast[:, None, None]
    tint = rng.uniform(0.6, 1.0, (n, channels))
    images = bar[:, None] * tint[:, :, None, None]
    images = images + rng.normal(0.0, noise, images.shape)
    return Dataset(images.astype(np.float32), labels, num_classes)


# ---------------------------------------------------------------------------
# splitting, normalization, batching
# ---------------------------------------------------------------------------


def channel_stats(dataset: Dataset) -> Tuple[np.ndarray, np.ndarray]:
    x = dataset.images.astype(np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return mean, np.where(std > 0, std, 1.0)


def normalize(dataset: Dataset, mean: np.ndarray, std: np.ndarray) -> Dataset:
    imgs = (dataset.images - mean[None, :, None, None]) / std[None, :, None, None]
    return replace(dataset, images=imgs.astype(np.float32), mean=np.asarray(mean), std=np.asarray(std))


def split(dataset: Dataset, ratio: float = 0.7, seed: int = 0, normalize_stats: bool = True) -> SplitDataset:
    """Stratified, seed-deterministic train/validation split.

    Each class contributes ``round(ratio * n_class)`` examples to train,
    clipped so both sides get at least one. Normalization statistics come
    from the train side only and are applied to both.
    """
    if not 0 < ratio < 1:
        raise ValueError("split ratio must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for cls in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == cls)
        if len(idx) == 0:
            continue
        if len(idx) < 2:
            raise ValueError(f"class {cls} has fewer than 2 examples; cannot split")
        idx = rng.permutation(idx)
        n_train = int(np.floor(ratio * len(idx) + 0.5))
        n_train = min(max(n_train, 1), len(idx) - 1)
        train_idx.append(idx[:n_train])
        val_idx.append(idx[n_train:])
    train_idx = np.sort(np.concatenate(train_idx))
    val_idx = np.sort(np.concatenate(val_idx))
    train, val = dataset.subset(train_idx), dataset.subset(val_idx)
    if normalize_stats:
        mean, std = channel_stats(train)
        train, val = normalize(train, mean, std), normalize(val, mean, std)
    return SplitDataset(train, val, train_idx, val_idx, ratio)


def augment(images: np.ndarray, rng: np.random.Generator, pad: int = 4, flip: bool = True) -> np.ndarray:
    """Random crop after zero padding, plus optional horizontal flip."""
    n, c, h, w = images.shape
    out = np.empty_like(images)
    if pad:
        padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        dy = rng.integers(0, 2 * pad + 1, n)
        dx = rng.integers(0, 2 * pad + 1, n)
        for i in range(n):
            out[i] = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
    else:
        out[...] = images
    if flip:
        mask = rng.random(n) < 0.5
        out[mask] = out[mask, :, :, ::-1]
    return out


def batches(
    dataset: Dataset,
    batch_size: int,
    rng: Optional[np.random.Generator] = None,
    augment_pad: int = 0,
    augment_flip: bool = False,
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)`` mini-batches; shuffled and augmented when ``rng`` is given."""
    n = len(dataset)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        x = dataset.images[idx]
        if rng is not None and (augment_pad or augment_flip):
            x = augment(x, rng, augment_pad, augment_flip)
        yield x, dataset.labels[idx]
