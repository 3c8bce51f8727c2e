"""Datasets, IDX ingestion and non-IID client partitioning."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, InvalidArgument, ParseError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    features: np.ndarray  # (n, dim) float64
    labels: np.ndarray  # (n,) int64
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise InvalidArgument("features must be (n, dim) with one label per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InvalidArgument("label outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass
class ClientShard:
    client_id: int
    train: LabeledDataset
    test: LabeledDataset
    # positions of the train/test samples in the pre-partition dataset
    train_idx: np.ndarray | None = None
    test_idx: np.ndarray | None = None


def synth_gaussian(num_classes: int, per_class: int, dim: int, class_sep: float, seed: int) -> LabeledDataset:
    """Class c ~ N(mu_c, I) with mu_c a random unit direction scaled by ``class_sep``."""
    if min(num_classes, per_class, dim) <= 0:
        raise InvalidArgument("classes, per_class and dim must be positive")
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(num_classes, dim))
    means = class_sep * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    labels = np.repeat(np.arange(num_classes), per_class)
    feats = means[labels] + rng.normal(size=(len(labels), dim))
    return LabeledDataset(feats, labels, num_classes)


def dirichlet_partition(
    data: LabeledDataset, K: int, alpha: float, seed: int, min_size: int = 2, max_retries: int = 1000
) -> list[np.ndarray]:
    """Per-class Dirichlet(alpha) split of sample positions into K client partitions.

    Redraws the whole split until every client holds at least ``min_size`` samples.
    """
    n = len(data)
    if K < 1:
        raise InvalidArgument("K must be >= 1")
    if alpha <= 0:
        raise InvalidArgument("alpha must be positive")
    if K * min_size > n:
        raise InvalidArgument(f"cannot give {K} clients {min_size} samples each from {n}")
    if K == 1:
        return [np.arange(n)]
    rng = np.random.default_rng(seed)
    by_class = [np.flatnonzero(data.labels == c) for c in range(data.num_classes)]
    for _ in range(max_retries):
        parts: list[list[int]] = [[] for _ in range(K)]
        for members in by_class:
            if len(members) == 0:
                continue
            p = rng.dirichlet(np.full(K, alpha))
            counts = rng.multinomial(len(members), p)
            shuffled = rng.permutation(members)
            bounds = np.cumsum(counts)[:-1]
            for k, chunk in enumerate(np.split(shuffled, bounds)):
                parts[k].extend(chunk.tolist())
        if min(len(p) for p in parts) >= min_size:
            return [np.array(sorted(p), dtype=np.int64) for p in parts]
    raise InvalidArgument(f"no partition with >= {min_size} samples per client after {max_retries} draws")


def split_shard(
    data: LabeledDataset, positions: np.ndarray, client_id: int, test_fraction: float, seed: int
) -> ClientShard:
    if not 0 < test_fraction < 1:
        raise InvalidArgument("test_fraction must be in (0, 1)")
    positions = np.asarray(positions, dtype=np.int64)
    n = len(positions)
    if n < 2:
        raise InvalidArgument("a shard needs at least 2 samples")
    order = np.random.default_rng(seed).permutation(positions)
    n_test = min(max(math.ceil(test_fraction * n), 1), n - 1)
    train_idx, test_idx = order[: n - n_test], order[n - n_test :]
    return ClientShard(client_id, data.subset(train_idx), data.subset(test_idx), train_idx, test_idx)


def make_shards(
    data: LabeledDataset, K: int, alpha: float, seed: int, test_fraction: float = 0.2
) -> list[ClientShard]:
    parts = dirichlet_partition(data, K, alpha, seed)
    seeds = np.random.SeedSequence([seed, 1]).spawn(K)
    return [
        split_shard(data, part, k, test_fraction, int(seeds[k].generate_state(1)[0]))
        for k, part in enumerate(parts)
    ]


def subsample_train(shard: ClientShard, n_keep: int, seed: int) -> ClientShard:
    """Keep ``n_keep`` training samples (local data proportion ablation)."""
    n = len(shard.train)
    n_keep = max(1, min(int(n_keep), n))
    keep = np.sort(np.random.default_rng(seed).permutation(n)[:n_keep])
    train_idx = None if shard.train_idx is None else shard.train_idx[keep]
    return ClientShard(shard.client_id, shard.train.subset(keep), shard.test, train_idx, shard.test_idx)


def label_tv_distance(partition_labels: Sequence[np.ndarray], num_classes: int) -> float:
    """Mean total-variation distance between each client's label mix and the global mix."""
    all_labels = np.concatenate(list(partition_labels))
    glob = np.bincount(all_labels, minlength=num_classes) / len(all_labels)
    tvs = []
    for labels in partition_labels:
        local = np.bincount(labels, minlength=num_classes) / max(len(labels), 1)
        tvs.append(0.5 * np.abs(local - glob).sum())
    return float(np.mean(tvs))


def _read_u32(buf: bytes, offset: int, what: str) -> int:
    if offset + 4 > len(buf):
        raise ParseError(f"truncated {what}", offset=offset)
    return struct.unpack_from(">I", buf, offset)[0]


def read_idx_images(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    magic = _read_u32(buf, 0, "magic number")
    if magic != IDX_IMAGES_MAGIC:
        raise ParseError(f"bad image magic 0x{magic:08x}", offset=0)
    n, rows, cols = (_read_u32(buf, 4 * j, "header") for j in (1, 2, 3))
    need = 16 + n * rows * cols
    if len(buf) < need:
        raise ParseError(f"image data truncated: need {need} bytes, have {len(buf)}", offset=len(buf))
    if len(buf) > need:
        raise ParseError(f"{len(buf) - need} trailing bytes after image data", offset=need)
    pixels = np.frombuffer(buf, dtype=np.uint8, count=n * rows * cols, offset=16)
    return pixels.reshape(n, rows * cols).astype(np.float64) / 255.0


def read_idx_labels(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    magic = _read_u32(buf, 0, "magic number")
    if magic != IDX_LABELS_MAGIC:
        raise ParseError(f"bad label magic 0x{magic:08x}", offset=0)
    n = _read_u32(buf, 4, "header")
    if len(buf) < 8 + n:
        raise ParseError(f"label data truncated: need {8 + n} bytes, have {len(buf)}", offset=len(buf))
    if len(buf) > 8 + n:
        raise ParseError(f"{len(buf) - 8 - n} trailing bytes after label data", offset=8 + n)
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=8).astype(np.int64)


def load_idx(images_path: str | Path, labels_path: str | Path, num_classes: int | None = None) -> LabeledDataset:
    feats = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(feats) != len(labels):
        raise FormatError(f"{len(feats)} images but {len(labels)} labels")
    C = num_classes if num_classes is not None else (int(labels.max()) + 1 if len(labels) else 1)
    return LabeledDataset(feats, labels, C)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path: str | Path, labels_path: str | Path) -> None:
    """Write uint8 images (n, rows, cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def manifest_line(shard: ClientShard) -> str:
    counts = shard.train.class_counts() + shard.test.class_counts()
    return f"{shard.client_id}, {len(shard.train)}, {len(shard.test)}, {' '.join(str(int(c)) for c in counts)}"
