"""Synthetic Gaussian-mixture datasets, label partitions and dataset files."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATASET_HEADER = "#amalgam-dataset v1"


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    class_names: tuple[str, ...] | None = None
    seed: int | None = None

    def __post_init__(self):
        features = _frozen(self.features, float)
        labels = _frozen(self.labels, np.int64)
        if features.ndim != 2 or labels.shape != (features.shape[0],):
            raise ValueError(f"features {features.shape} and labels {labels.shape} are inconsistent")
        if not np.all(np.isfinite(features)):
            raise ValueError("features must be finite")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.features.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class UnlabeledDataset:
    """Features only.  The amalgamation trainer accepts nothing else."""

    features: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "features", _frozen(self.features, float))

    def __len__(self):
        return self.features.shape[0]


def strip_labels(dataset: LabeledDataset) -> UnlabeledDataset:
    return UnlabeledDataset(dataset.features)


@dataclass(frozen=True)
class LabelPartition:
    """Disjoint, exhaustive class subsets, one per teacher.

    Union indices are the dataset's class ids; a class's local index is its
    position inside its subset.
    """

    union_size: int
    subsets: tuple[tuple[int, ...], ...]
    _owner: np.ndarray = field(init=False, repr=False, compare=False)
    _local: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        subsets = tuple(tuple(int(y) for y in s) for s in self.subsets)
        object.__setattr__(self, "subsets", subsets)
        if not subsets:
            raise ValueError("a partition needs at least one subset")
        for i, s in enumerate(subsets):
            if len(s) < 2:
                raise ValueError(f"subset {i} has {len(s)} class(es); each teacher needs >= 2")
        flat = sorted(y for s in subsets for y in s)
        if flat != list(range(self.union_size)):
            raise ValueError(
                f"subsets must be disjoint and cover 0..{self.union_size - 1}, got {subsets}"
            )
        owner = np.empty(self.union_size, dtype=np.int64)
        local = np.empty(self.union_size, dtype=np.int64)
        for i, s in enumerate(subsets):
            owner[list(s)] = i
            local[list(s)] = np.arange(len(s))
        object.__setattr__(self, "_owner", owner)
        object.__setattr__(self, "_local", local)

    @property
    def num_teachers(self) -> int:
        return len(self.subsets)

    def sizes(self) -> list[int]:
        return [len(s) for s in self.subsets]

    def _check(self, i):
        if not 0 <= i < self.num_teachers:
            raise IndexError(f"teacher index {i} out of range for {self.num_teachers} subsets")

    def owner(self, y_union):
        """Index of the subset containing each union label."""
        return self._owner[y_union]

    def local_index(self, i: int, y_union):
        self._check(i)
        y = np.asarray(y_union)
        if np.any(self._owner[y] != i):
            raise ValueError(f"label(s) {y_union} not in subset {i}")
        return self._local[y]

    def union_index(self, i: int, y_local):
        self._check(i)
        return np.asarray(self.subsets[i])[y_local]


def partition_labels(union_size: int, subset_sizes, seed: int) -> LabelPartition:
    """Randomly split ``range(union_size)`` into subsets of the given sizes."""
    subset_sizes = [int(s) for s in subset_sizes]
    if sum(subset_sizes) != union_size:
        raise ValueError(f"subset sizes {subset_sizes} sum to {sum(subset_sizes)}, not {union_size}")
    if any(s < 2 for s in subset_sizes):
        raise ValueError(f"every subset needs >= 2 classes, got {subset_sizes}")
    perm = np.random.default_rng(seed).permutation(union_size)
    bounds = np.cumsum([0, *subset_sizes])
    return LabelPartition(
        union_size, tuple(tuple(sorted(perm[a:b].tolist())) for a, b in zip(bounds[:-1], bounds[1:]))
    )


def restrict(dataset: LabeledDataset, partition: LabelPartition, i: int) -> LabeledDataset:
    """Rows whose label belongs to subset ``i``, relabelled to local indices."""
    partition._check(i)
    if partition.union_size != dataset.num_classes:
        raise ValueError("partition and dataset disagree on the number of classes")
    rows = partition.owner(dataset.labels) == i
    names = None
    if dataset.class_names is not None:
        names = tuple(dataset.class_names[y] for y in partition.subsets[i])
    return LabeledDataset(
        dataset.features[rows],
        partition.local_index(i, dataset.labels[rows]),
        len(partition.subsets[i]),
        names,
        dataset.seed,
    )


def concat_datasets(a: LabeledDataset, b: LabeledDataset, label_offset: int) -> LabeledDataset:
    """Stack two datasets, shifting ``b``'s labels; narrower features are zero-padded."""
    if label_offset < a.num_classes and label_offset + b.num_classes > 0:
        raise ValueError(
            f"label offset {label_offset} overlaps the first dataset's classes 0..{a.num_classes - 1}"
        )
    dim = max(a.input_dim, b.input_dim)

    def pad(x):
        return np.pad(x, ((0, 0), (0, dim - x.shape[1])))

    return LabeledDataset(
        np.vstack([pad(a.features), pad(b.features)]),
        np.concatenate([a.labels, b.labels + label_offset]),
        label_offset + b.num_classes,
    )


@dataclass(frozen=True)
class GaussianMixtureConfig:
    """Isotropic Gaussian classes with means on a sphere.

    ``separation`` is the minimum distance between any two class means in
    units of ``cov_scale``.  ``confusable_pair`` moves the higher-indexed class of
    the pair to ``confusable_distance * cov_scale`` from the first, exempt
    from the separation rule.  ``val_per_class = 0`` carves 5% of each
    class's training rows off as validation instead.
    """

    num_classes: int = 8
    input_dim: int = 32
    mean_radius: float = 4.0
    cov_scale: float = 1.0
    train_per_class: int = 300
    val_per_class: int = 50
    test_per_class: int = 200
    separation: float = 3.0
    seed: int = 0
    confusable_pair: tuple[int, int] | None = None
    confusable_distance: float = 1.0

    def __post_init__(self):
        if self.num_classes < 2 or self.input_dim < 1:
            raise ValueError("need num_classes >= 2 and input_dim >= 1")
        if not self.separation > 0:
            raise ValueError(f"separation must be > 0, got {self.separation}")
        if not self.cov_scale > 0 or not self.mean_radius > 0:
            raise ValueError("cov_scale and mean_radius must be > 0")
        if self.train_per_class < 10 or self.test_per_class < 10:
            raise ValueError("samples per class must be >= 10")
        if self.val_per_class != 0 and self.val_per_class < 10:
            raise ValueError("val_per_class must be 0 (carve from train) or >= 10")
        if self.confusable_pair is not None:
            a, b = self.confusable_pair
            if a == b or not (0 <= a < self.num_classes and 0 <= b < self.num_classes):
                raise ValueError(f"invalid confusable pair {self.confusable_pair}")


def _sample_means(cfg: GaussianMixtureConfig, rng: np.random.Generator) -> np.ndarray:
    min_dist = cfg.separation * cfg.cov_scale
    anchor, moved = sorted(cfg.confusable_pair) if cfg.confusable_pair else (None, None)
    means = []
    attempts = 0
    while len(means) < cfg.num_classes:
        d = rng.standard_normal(cfg.input_dim)
        d /= np.linalg.norm(d)
        if len(means) == moved:
            means.append(means[anchor] + cfg.confusable_distance * cfg.cov_scale * d)
            continue
        cand = cfg.mean_radius * d
        if all(np.linalg.norm(cand - m) >= min_dist for m in means):
            means.append(cand)
            continue
        attempts += 1
        if attempts >= 1000:
            raise RuntimeError(
                f"could not place {cfg.num_classes} means {min_dist:g} apart on a radius-"
                f"{cfg.mean_radius:g} sphere in {cfg.input_dim} dimensions after 1000 attempts"
            )
    return np.array(means)


def class_means(cfg: GaussianMixtureConfig) -> np.ndarray:
    return _sample_means(cfg, np.random.default_rng(cfg.seed))


def generate_gaussian_mixture(cfg: GaussianMixtureConfig):
    """Return class-balanced ``(train, val, test)`` splits drawn from one mixture."""
    rng = np.random.default_rng(cfg.seed)
    means = _sample_means(cfg, rng)
    c, d = cfg.num_classes, cfg.input_dim

    def draw(per_class):
        labels = np.repeat(np.arange(c), per_class)
        x = means[labels] + cfg.cov_scale * rng.standard_normal((labels.size, d))
        order = rng.permutation(labels.size)
        return x[order], labels[order]

    x_tr, y_tr = draw(cfg.train_per_class)
    if cfg.val_per_class:
        x_va, y_va = draw(cfg.val_per_class)
    else:
        n_val = max(1, round(0.05 * cfg.train_per_class))
        val_rows = np.concatenate([np.flatnonzero(y_tr == k)[:n_val] for k in range(c)])
        keep = np.ones(y_tr.size, bool)
        keep[val_rows] = False
        val_rows.sort()
        x_va, y_va = x_tr[val_rows], y_tr[val_rows]
        x_tr, y_tr = x_tr[keep], y_tr[keep]
    x_te, y_te = draw(cfg.test_per_class)
    return tuple(LabeledDataset(x, y, c, seed=cfg.seed) for x, y in ((x_tr, y_tr), (x_va, y_va), (x_te, y_te)))


# -- file format ------------------------------------------------------------

def dumps_dataset(ds: LabeledDataset) -> str:
    lines = [f"{DATASET_HEADER} dim={ds.input_dim} classes={ds.num_classes}"]
    for y, row in zip(ds.labels.tolist(), ds.features.tolist()):
        lines.append(",".join([str(y), *map(repr, row)]))
    return "\n".join(lines) + "\n"


def loads_dataset(text: str) -> LabeledDataset:
    lines = text.splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 4 or " ".join(head[:2]) != DATASET_HEADER:
        raise ValueError(f"line 1: not an amalgam dataset header: {lines[0] if lines else ''!r}")
    meta = dict(tok.split("=", 1) for tok in head[2:])
    dim, classes = int(meta["dim"]), int(meta["classes"])
    labels, rows = [], []
    for n, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != dim + 1:
            raise ValueError(f"line {n}: expected {dim + 1} fields, got {len(parts)}")
        labels.append(int(parts[0]))
        rows.append([float(v) for v in parts[1:]])
    features = np.array(rows, dtype=float).reshape(len(rows), dim)
    return LabeledDataset(features, np.array(labels, dtype=np.int64), classes)


def save_dataset(path, ds: LabeledDataset):
    Path(path).write_text(dumps_dataset(ds))


def load_dataset(path) -> LabeledDataset:
    return loads_dataset(Path(path).read_text())
