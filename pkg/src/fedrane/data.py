"""Datasets, heterogeneous client partitioning, and local train/test splits.

Randomness comes exclusively from numpy's PCG64 generator seeded per call,
so every operation here is a deterministic function of (inputs, seed) and
reproduces across platforms. Class proportions for the partitioner are
drawn as normalized Gamma(alpha, 1) variates, which stays correct in the
alpha < 1 regime the skewed configurations need.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


@dataclass
class Dataset:
    """Feature matrix with integer class labels in [0, num_classes)."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("features must be 2-D and labels 1-D")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("feature rows and labels disagree in length")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite entries")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        present = np.unique(self.labels)
        if present.size != self.num_classes:
            missing = sorted(set(range(self.num_classes)) - set(present.tolist()))
            raise ValueError(f"classes {missing} have no samples")

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass
class Partition:
    """One client's index set into the master dataset plus its local split."""

    client_id: int
    indices: np.ndarray
    train_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.train_indices = np.asarray(self.train_indices, dtype=np.int64)
        self.test_indices = np.asarray(self.test_indices, dtype=np.int64)


def generate_synthetic(
    classes: int, dim: int, per_class: int, spread: float, seed: int
) -> Dataset:
    """Gaussian mixture with one component per class.

    Component means sit on the unit circle in the first two feature
    coordinates (remaining coordinates zero); each component is isotropic
    with standard deviation `spread`. Rows are shuffled, so label order
    carries no information.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if dim < 2:
        raise ValueError("need at least 2 feature dimensions")
    if per_class < 8:
        raise ValueError("need at least 8 samples per class")
    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(classes) / classes
    means = np.zeros((classes, dim))
    means[:, 0] = np.cos(angles)
    means[:, 1] = np.sin(angles)
    labels = np.repeat(np.arange(classes), per_class)
    features = means[labels] + spread * rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    return Dataset(features=features[order], labels=labels[order], num_classes=classes)


def save_csv(ds: Dataset, path) -> None:
    """Comma-separated rows of features with the integer label last."""
    with open(path, "w", encoding="utf-8") as fh:
        for row, label in zip(ds.features, ds.labels):
            fh.write(",".join(repr(v) for v in row) + f",{int(label)}\n")


def load_csv(path) -> Dataset:
    """Strict CSV reader: every row is floats plus a trailing integer label.

    No header support; a non-numeric first row fails at row 1.
    """
    rows, labels = [], []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) < 2:
                raise ValueError(f"row {lineno}: need at least one feature and a label")
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise ValueError(f"row {lineno}: expected {width} columns, found {len(cells)}")
            try:
                rows.append([float(c) for c in cells[:-1]])
            except ValueError as exc:
                raise ValueError(f"row {lineno}: unparseable feature value ({exc})") from None
            try:
                label = int(cells[-1])
            except ValueError:
                raise ValueError(f"row {lineno}: label {cells[-1]!r} is not an integer") from None
            labels.append(label)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    labels_arr = np.asarray(labels, dtype=np.int64)
    if labels_arr.min() < 0:
        raise ValueError("labels must be non-negative")
    return Dataset(
        features=np.asarray(rows, dtype=np.float64),
        labels=labels_arr,
        num_classes=int(labels_arr.max()) + 1,
    )


def _largest_remainder_counts(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer counts proportional to weights, summing exactly to total."""
    raw = weights * total
    counts = np.floor(raw).astype(np.int64)
    shortfall = total - int(counts.sum())
    if shortfall > 0:
        # hand leftovers to the largest fractional parts; ties to lower index
        remainders = raw - counts
        order = np.lexsort((np.arange(weights.size), -remainders))
        counts[order[:shortfall]] += 1
    return counts


def dirichlet_partition(ds: Dataset, k: int, alpha: float, seed: int) -> list[Partition]:
    """Assign each class's samples across k clients in Dirichlet(alpha) proportions.

    Every sample lands on exactly one client. Draws leaving any client
    empty are rejected and the full set of class proportions is resampled
    from the continuing generator stream, at most 100 times.
    """
    if k < 1:
        raise ValueError("need at least one client")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    rng = np.random.default_rng(seed)
    class_indices = [np.flatnonzero(ds.labels == c) for c in range(ds.num_classes)]
    for _attempt in range(100):
        assignment: list[list[np.ndarray]] = [[] for _ in range(k)]
        ok = True
        for idx in class_indices:
            gamma = rng.gamma(alpha, 1.0, size=k)
            total = gamma.sum()
            if total <= 0.0 or not np.isfinite(total):
                ok = False
                break
            weights = gamma / total
            counts = _largest_remainder_counts(weights, idx.size)
            shuffled = rng.permutation(idx)
            offset = 0
            for client, count in enumerate(counts):
                assignment[client].append(shuffled[offset : offset + count])
                offset += count
        if not ok:
            continue
        sizes = [sum(len(chunk) for chunk in chunks) for chunks in assignment]
        if min(sizes) >= 1:
            return [
                Partition(client_id=c, indices=np.sort(np.concatenate(assignment[c])))
                for c in range(k)
            ]
    raise ValueError(
        f"could not give every one of {k} clients a sample in 100 attempts "
        f"(alpha={alpha}, n={len(ds)})"
    )


def split_local(p: Partition, ratio: float = 0.75, seed: int = 0) -> Partition:
    """Uniform random train/test split of a client's indices at the given ratio."""
    n = p.indices.size
    if n < 4:
        raise ValueError(f"client {p.client_id}: need at least 4 samples to split, have {n}")
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must be strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_train = int(n * ratio + 0.5)  # round half up
    n_train = min(max(n_train, 1), n - 1)
    train = np.sort(p.indices[order[:n_train]])
    test = np.sort(p.indices[order[n_train:]])
    return replace(p, train_indices=train, test_indices=test)


def holdout_split(ds: Dataset, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified (per-class) holdout; returns (kept indices, held-out indices)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    held = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        n_hold = max(1, int(idx.size * fraction + 0.5))
        if n_hold >= idx.size:
            raise ValueError(f"class {c}: holdout fraction leaves no training samples")
        held.append(rng.permutation(idx)[:n_hold])
    held_arr = np.sort(np.concatenate(held))
    mask = np.ones(len(ds), dtype=bool)
    mask[held_arr] = False
    return np.flatnonzero(mask), held_arr


def partitions_to_json(partitions: list[Partition], k: int, alpha: float, seed: int) -> str:
    doc = {
        "k": k,
        "alpha": alpha,
        "seed": seed,
        "clients": [
            {
                "client_id": p.client_id,
                "indices": p.indices.tolist(),
                "train_indices": p.train_indices.tolist(),
                "test_indices": p.test_indices.tolist(),
            }
            for p in partitions
        ],
    }
    return json.dumps(doc, indent=1)


def partitions_from_json(text: str) -> tuple[list[Partition], int, float, int]:
    doc = json.loads(text)
    partitions = [
        Partition(
            client_id=int(c["client_id"]),
            indices=np.asarray(c["indices"], dtype=np.int64),
            train_indices=np.asarray(c["train_indices"], dtype=np.int64),
            test_indices=np.asarray(c["test_indices"], dtype=np.int64),
        )
        for c in doc["clients"]
    ]
    return partitions, int(doc["k"]), float(doc["alpha"]), int(doc["seed"])


def save_partitions(partitions: list[Partition], k: int, alpha: float, seed: int, path) -> None:
    Path(path).write_text(partitions_to_json(partitions, k, alpha, seed), encoding="utf-8")


def load_partitions(path) -> tuple[list[Partition], int, float, int]:
    return partitions_from_json(Path(path).read_text(encoding="utf-8"))
