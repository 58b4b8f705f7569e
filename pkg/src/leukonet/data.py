"""Dataset ingestion, packing, splitting and SMOTE balancing.

Packed ``.alld`` layout (little-endian)::

    "ALLD"  u32 version=1  u32 count  u16 H  u16 W  u16 C  u16 class_count
    class_count x (u16 length + UTF-8 name)
    count x u8 label
    count*H*W*C x u8 pixel, sample order, HWC within a sample
"""
from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Rng

log = logging.getLogger(__name__)

CLASS_NAMES = ("Benign", "Early", "Pre", "Pro")
ALLD_MAGIC = b"ALLD"
ALLD_VERSION = 1


class DataError(Exception):
    """Malformed input data (bad image, bad packed file, unusable class)."""


@dataclass
class Dataset:
    images: np.ndarray  # u8 [count, H, W, C]
    labels: np.ndarray  # u8 [count]
    class_names: tuple

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.class_names = tuple(self.class_names)
        if self.images.ndim != 4:
            raise DataError(f"images must be [count, H, W, C], got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and int(self.labels.max()) >= len(self.class_names):
            raise DataError("label index outside the class list")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.class_names)

    def class_counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=len(self.class_names)).tolist()


# ---------------------------------------------------------------------------
# PPM


def _ppm_tokens(data: bytes, count: int, path):
    """Read ``count`` whitespace-separated header tokens; returns (tokens, offset)."""
    tokens = []
    i = 0
    while len(tokens) < count:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if i < len(data) and data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(data) and not data[i:i + 1].isspace() and data[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise DataError(f"{path}: truncated PPM header")
        tokens.append(data[start:i])
    return tokens, i


def decode_ppm(data: bytes, path="<bytes>") -> np.ndarray:
    """Decode a binary P6 PPM with maxval 255 into a u8 [H, W, 3] array."""
    tokens, i = _ppm_tokens(data, 4, path)
    if tokens[0] != b"P6":
        raise DataError(f"{path}: not a binary PPM (P6) file")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"{path}: malformed PPM header") from None
    if w <= 0 or h <= 0:
        raise DataError(f"{path}: invalid PPM dimensions {w}x{h}")
    if maxval != 255:
        raise DataError(f"{path}: unsupported PPM maxval {maxval} (need 255)")
    if i >= len(data) or not data[i:i + 1].isspace():
        raise DataError(f"{path}: malformed PPM header")
    body = data[i + 1:]
    need = w * h * 3
    if len(body) < need:
        raise DataError(f"{path}: truncated PPM pixel data ({len(body)} of {need} bytes)")
    return np.frombuffer(body[:need], dtype=np.uint8).reshape(h, w, 3).copy()


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.uint8)
    h, w, c = img.shape
    if c != 3:
        raise ValueError("PPM needs 3 channels")
    return b"P6\n%d %d\n255\n" % (w, h) + img.tobytes()


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_ppm(f.read(), path)


def write_ppm(path, img):
    Path(path).write_bytes(encode_ppm(img))


def resize_nearest(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h == size and w == size:
        return img
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return img[rows][:, cols]


# ---------------------------------------------------------------------------
# labels


def encode_labels(names, class_names=CLASS_NAMES) -> list[int]:
    index = {n: i for i, n in enumerate(class_names)}
    out = []
    for n in names:
        if n not in index:
            raise DataError(f"unknown label {n!r}; expected one of {list(class_names)}")
        out.append(index[n])
    return out


def class_order(dir_names) -> list[str]:
    """Known classes in their fixed order, then unknown names alphabetically."""
    known = [c for c in CLASS_NAMES if c in dir_names]
    extra = sorted(n for n in dir_names if n not in CLASS_NAMES)
    return known + extra


def ingest_directory(root, size: int) -> Dataset:
    """Load ``root/<class>/*.ppm``.  Known classes keep indices Benign=0, Early=1,
    Pre=2, Pro=3; other subdirectories are appended alphabetically."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    subdirs = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not subdirs:
        raise DataError(f"{root}: no class subdirectories")
    names = list(CLASS_NAMES) + sorted(n for n in subdirs if n not in CLASS_NAMES)
    images, labels = [], []
    for name in class_order(subdirs):
        files = sorted(p for p in (root / name).iterdir() if p.is_file() and p.suffix.lower() == ".ppm")
        if not files:
            log.warning("class directory %s contains no PPM images", root / name)
        for f in files:
            images.append(resize_nearest(read_ppm(f), size))
            labels.append(names.index(name))
    if not images:
        raise DataError(f"{root}: no images found")
    return Dataset(np.stack(images), np.array(labels, dtype=np.uint8), tuple(names))


def normalize(d: Dataset, dtype=np.float32) -> np.ndarray:
    return d.images.astype(dtype) / dtype(255.0)


# ---------------------------------------------------------------------------
# packed format


def pack_dataset(d: Dataset) -> bytes:
    count, h, w, c = d.images.shape
    parts = [ALLD_MAGIC, struct.pack("<IIHHHH", ALLD_VERSION, count, h, w, c, len(d.class_names))]
    for name in d.class_names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    parts.append(d.labels.tobytes())
    parts.append(np.ascontiguousarray(d.images).tobytes())
    return b"".join(parts)


def unpack_dataset(data: bytes, path="<bytes>") -> Dataset:
    if data[:4] != ALLD_MAGIC:
        raise DataError(f"{path}: bad magic, not an .alld dataset")
    try:
        version, count, h, w, c, ncls = struct.unpack_from("<IIHHHH", data, 4)
    except struct.error:
        raise DataError(f"{path}: truncated header") from None
    if version != ALLD_VERSION:
        raise DataError(f"{path}: unsupported dataset version {version}")
    off = 4 + struct.calcsize("<IIHHHH")
    names = []
    for _ in range(ncls):
        if off + 2 > len(data):
            raise DataError(f"{path}: truncated class table")
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        if off + n > len(data):
            raise DataError(f"{path}: truncated class table")
        names.append(data[off:off + n].decode("utf-8"))
        off += n
    npix = count * h * w * c
    if len(data) != off + count + npix:
        raise DataError(f"{path}: size mismatch (expected {off + count + npix} bytes, got {len(data)})")
    labels = np.frombuffer(data, dtype=np.uint8, count=count, offset=off).copy()
    images = np.frombuffer(data, dtype=np.uint8, count=npix, offset=off + count).copy()
    return Dataset(images.reshape(count, h, w, c), labels, tuple(names))


def atomic_write(path, data: bytes):
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def save_dataset(d: Dataset, path):
    atomic_write(path, pack_dataset(d))


def load_dataset(path) -> Dataset:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"{path}: {e.strerror}") from None
    return unpack_dataset(data, path)


# ---------------------------------------------------------------------------
# shuffling, splitting, balancing


def shuffle(d: Dataset, rng: Rng) -> Dataset:
    return d.subset(rng.permutation(len(d)))


def _allocate(n: int, fractions) -> list[int]:
    """Largest-remainder rounding of n * fractions: every count is within 1 of
    its exact share and the counts sum to n.  Remainder ties go to the earlier part."""
    exact = [f * n for f in fractions]
    # small epsilon so e.g. 0.7 * 10 does not floor to 6
    counts = [int(np.floor(e + 1e-9)) for e in exact]
    rem = [e - c for e, c in zip(exact, counts)]
    for i in sorted(range(len(counts)), key=lambda i: -rem[i])[:n - sum(counts)]:
        counts[i] += 1
    return counts


def stratified_split(d: Dataset, fractions=(0.8, 0.1, 0.1), rng: Rng | None = None):
    """Per class: shuffle, then cut into train/val/test by largest-remainder counts."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    rng = rng if rng is not None else Rng(0)
    parts = ([], [], [])
    for cls in range(len(d.class_names)):
        idx = np.flatnonzero(d.labels == cls)
        if len(idx) == 0:
            continue
        if len(idx) < 3:
            raise DataError(f"class {d.class_names[cls]!r} has {len(idx)} samples; need at least 3 to split")
        idx = idx[rng.permutation(len(idx))]
        n_train, n_val, _ = _allocate(len(idx), fractions)
        parts[0].extend(idx[:n_train])
        parts[1].extend(idx[n_train:n_train + n_val])
        parts[2].extend(idx[n_train + n_val:])
    return tuple(d.subset(np.array(p, dtype=np.int64)) for p in parts)


def nearest_neighbors(vectors: np.ndarray, k: int) -> np.ndarray:
    """Exact k nearest neighbours (Euclidean, self excluded); ties go to the lower index."""
    x = vectors.astype(np.float64)
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    np.fill_diagonal(d2, np.inf)
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def smote_balance(train: Dataset, k: int = 5, rng: Rng | None = None) -> Dataset:
    """Oversample every minority class up to the majority count with SMOTE.

    Features are flattened pixel vectors scaled to [0, 1].  A synthetic sample
    is x + delta * (neighbour - x), delta ~ U[0, 1), re-quantized to u8.
    Originals are kept unchanged and in order; synthetics follow, class by class.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = rng if rng is not None else Rng(0)
    counts = train.class_counts()
    target = max(counts) if counts else 0
    new_images, new_labels = [train.images], [train.labels]
    for cls, n in enumerate(counts):
        need = target - n
        if need <= 0:
            continue
        if n < 2:
            raise DataError(f"class {train.class_names[cls]!r} has {n} sample(s); SMOTE needs at least 2")
        idx = np.flatnonzero(train.labels == cls)
        feats = train.images[idx].reshape(n, -1).astype(np.float64) / 255.0
        nbrs = nearest_neighbors(feats, min(k, n - 1))
        synth = np.empty((need, feats.shape[1]))
        for j in range(need):
            a = rng.below(n)
            b = nbrs[a, rng.below(nbrs.shape[1])]
            delta = rng.random()
            synth[j] = feats[a] + delta * (feats[b] - feats[a])
        synth = np.clip(synth, 0.0, 1.0)
        new_images.append(np.round(synth * 255.0).astype(np.uint8).reshape((need,) + train.images.shape[1:]))
        new_labels.append(np.full(need, cls, dtype=np.uint8))
    return Dataset(np.concatenate(new_images), np.concatenate(new_labels), train.class_names)
