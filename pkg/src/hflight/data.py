"""Datasets, federated partitioning and file ingestion."""

from __future__ import annotations

import csv
import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


class InfeasibleSplitError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int | None = None

    def __post_init__(self):
        X = np.ascontiguousarray(self.features, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        y = np.ascontiguousarray(self.labels).astype(np.int64, copy=False)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise ValueError(f"features {X.shape} and labels {y.shape} do not line up")
        if X.shape[0] < 1:
            raise ValueError("dataset must contain at least one sample")
        if y.min() < 0:
            raise ValueError("labels must be nonnegative class ids")
        c = int(y.max()) + 1 if self.n_classes is None else int(self.n_classes)
        if y.max() >= c:
            raise ValueError(f"label {int(y.max())} out of range for {c} classes")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "n_classes", c)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: Sequence[int]) -> LabeledDataset:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size == 0:
            raise ValueError("dataset must contain at least one sample")
        # rows of an already validated dataset need no second check
        out = object.__new__(LabeledDataset)
        object.__setattr__(out, "features", self.features[idx])
        object.__setattr__(out, "labels", self.labels[idx])
        object.__setattr__(out, "n_classes", self.n_classes)
        return out


class FederatedSubsets(Mapping[str, np.ndarray]):
    """Mapping of worker id to index array into a shared base dataset."""

    def __init__(self, dataset: LabeledDataset, indices: Mapping[str, Iterable[int]]):
        self.dataset = dataset
        self._indices = {w: np.asarray(list(ix), dtype=np.int64) for w, ix in indices.items()}
        n = len(dataset)
        for w, ix in self._indices.items():
            if ix.size and (ix.min() < 0 or ix.max() >= n):
                raise IndexError(f"worker {w!r} has indices outside the dataset")

    def __getitem__(self, worker: str) -> np.ndarray:
        return self._indices[worker]

    def __iter__(self):
        return iter(self._indices)

    def __len__(self) -> int:
        return len(self._indices)

    def data(self, worker: str) -> LabeledDataset:
        return self.dataset.subset(self._indices[worker])

    def num_samples(self, worker: str) -> int:
        return int(self._indices[worker].size)

    @property
    def total(self) -> int:
        return sum(ix.size for ix in self._indices.values())

    def union(self) -> LabeledDataset:
        return self.dataset.subset(np.concatenate(list(self._indices.values())))

    def to_json(self) -> str:
        return json.dumps({w: ix.tolist() for w, ix in self._indices.items()}, indent=None)

    @classmethod
    def from_json(cls, dataset: LabeledDataset, text: str) -> FederatedSubsets:
        return cls(dataset, json.loads(text))


@dataclass(frozen=True)
class DirichletSplitConfig:
    alpha_samples: float = 3.0
    alpha_labels: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not (self.alpha_samples > 0 and self.alpha_labels > 0):
            raise ValueError("Dirichlet concentrations must be > 0")


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    raw = weights / weights.sum() * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _sample_counts(rng, n_workers: int, total: int, alpha: float) -> np.ndarray:
    props = rng.dirichlet(np.full(n_workers, alpha))
    counts = _largest_remainder(props, total)
    # every worker needs at least one sample for well-defined weights
    while np.any(counts < 1):
        counts[np.argmax(counts)] -= 1
        counts[np.argmin(counts)] += 1
    return counts


def federated_split(
    data: LabeledDataset,
    workers: Sequence[str],
    cfg: DirichletSplitConfig = DirichletSplitConfig(),
    num_samples: int | None = None,
) -> FederatedSubsets:
    """Dual-Dirichlet non-IID partition of ``data`` across ``workers``.

    Worker sample counts follow Dirichlet(alpha_samples) proportions of the
    ``num_samples`` budget (all of ``data`` by default). Each worker's label
    mix follows Dirichlet(alpha_labels), realized by drawing without
    replacement from per-class pools; mass for an exhausted class moves to
    the classes that still have samples.
    """
    workers = list(workers)
    n = len(data)
    budget = n if num_samples is None else int(num_samples)
    if not workers:
        raise InfeasibleSplitError("at least one worker is required")
    if budget > n:
        raise InfeasibleSplitError(f"requested {budget} samples from a dataset of {n}")
    if budget < len(workers):
        raise InfeasibleSplitError(f"{budget} samples cannot cover {len(workers)} workers")

    rng = np.random.default_rng(cfg.seed)
    counts = _sample_counts(rng, len(workers), budget, cfg.alpha_samples)
    c = data.n_classes
    pools = [rng.permutation(np.flatnonzero(data.labels == k)) for k in range(c)]
    cursor = np.zeros(c, dtype=np.int64)
    sizes = np.array([len(p) for p in pools], dtype=np.int64)

    # one call consumes the stream exactly as per-worker draws would
    mixes = rng.dirichlet(np.full(c, cfg.alpha_labels), size=len(workers))
    out = {}
    for worker, count, mix in zip(workers, counts, mixes):
        taken: list[np.ndarray] = []
        need = int(count)
        while need > 0:
            avail = sizes - cursor
            weights = mix * (avail > 0)
            if weights.sum() <= 0:
                weights = avail.astype(np.float64)
            want = np.minimum(_largest_remainder(weights, need), avail)
            if want.sum() == 0:
                want[np.argmax(avail)] = 1
            for k in np.flatnonzero(want):
                taken.append(pools[k][cursor[k] : cursor[k] + want[k]])
            cursor += want
            need -= int(want.sum())
        out[worker] = np.sort(np.concatenate(taken).astype(np.int64))
    return FederatedSubsets(data, out)


def synth_blobs(
    classes: int,
    dims: int,
    per_class: int,
    spread: float = 1.0,
    seed: int = 0,
    scale: float = 5.0,
) -> LabeledDataset:
    """Isotropic Gaussian clusters, one per class, ``per_class`` samples each.

    Centers are drawn uniformly in ``[-scale, scale]^dims``.
    """
    if classes < 2 or per_class < 1 or dims < 1:
        raise ValueError("need classes >= 2, dims >= 1 and per_class >= 1")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-scale, scale, size=(classes, dims))
    X = np.concatenate(
        [centers[k] + spread * rng.standard_normal((per_class, dims)) for k in range(classes)]
    )
    y = np.repeat(np.arange(classes), per_class)
    perm = rng.permutation(len(y))
    return LabeledDataset(X[perm], y[perm], classes)


def blob_centers(classes: int, dims: int, seed: int = 0, scale: float = 5.0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(-scale, scale, size=(classes, dims))


def _read(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _idx_header(blob: bytes, magic: int, ndim: int, what: str) -> tuple[int, ...]:
    header_len = 4 + 4 * ndim
    if len(blob) < header_len:
        raise TruncatedFileError(f"{what} file shorter than its header")
    (found,) = struct.unpack(">I", blob[:4])
    if found != magic:
        raise BadMagicError(f"{what} file has magic {found:#010x}, expected {magic:#010x}")
    return struct.unpack(f">{ndim}I", blob[4:header_len])


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Read an IDX image/label pair (optionally gzipped) into a dataset.

    Pixels are scaled to [0, 1] and each image is flattened to one row.
    """
    images = _read(images_path)
    labels = _read(labels_path)
    n_img, rows, cols = _idx_header(images, IDX_IMAGES_MAGIC, 3, "images")
    (n_lab,) = _idx_header(labels, IDX_LABELS_MAGIC, 1, "labels")
    if n_img != n_lab:
        raise CountMismatchError(f"{n_img} images but {n_lab} labels")
    pixels = np.frombuffer(images, dtype=np.uint8, offset=16)
    if pixels.size < n_img * rows * cols:
        raise TruncatedFileError("images file is truncated")
    y = np.frombuffer(labels, dtype=np.uint8, offset=8)
    if y.size < n_lab:
        raise TruncatedFileError("labels file is truncated")
    X = pixels[: n_img * rows * cols].reshape(n_img, rows * cols).astype(np.float64) / 255.0
    return LabeledDataset(X, y[:n_lab].astype(np.int64))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


def load_csv(path, label_column: str = "label") -> LabeledDataset:
    """CSV with a header row; every column other than ``label`` is a feature."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or label_column not in header:
            raise ValueError(f"{path}: header must contain a {label_column!r} column")
        rows = [r for r in reader if r]
    li = header.index(label_column)
    table = np.asarray(rows, dtype=np.float64)
    y = table[:, li].astype(np.int64)
    X = np.delete(table, li, axis=1)
    return LabeledDataset(X, y)
