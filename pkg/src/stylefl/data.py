"""Synthetic style-shifted datasets, Dirichlet label-skew partitioning, and
the binary dataset file format.

File layout (little-endian)::

    b"FSDS"  u32 version  u32 N  u32 d_in  u32 C
    N * d_in float64 features (row-major)
    N uint32 labels
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError, ShapeError

log = logging.getLogger(__name__)

MAGIC = b"FSDS"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self) -> None:
        features = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or labels.ndim != 1 or features.shape[0] != labels.shape[0]:
            raise ShapeError(f"features {features.shape} and labels {labels.shape} disagree")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ConfigError(f"labels must lie in [0, {self.class_count})", field="labels")
        if not np.all(np.isfinite(features)):
            raise ConfigError("features must be finite", field="features")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.class_count)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.class_count == other.class_count
            and np.array_equal(self.labels, other.labels)
            and self.features.tobytes() == other.features.tobytes()
        )


@dataclass(frozen=True)
class PartitionPlan:
    """``assignments[k]`` holds client k's sample indices; ``proportions[c, k]``
    is the share of class c routed to client k (each row sums to 1)."""

    assignments: list[np.ndarray]
    proportions: np.ndarray

    @property
    def clients(self) -> int:
        return len(self.assignments)


@dataclass(frozen=True)
class StyleShiftSpec:
    scale: np.ndarray
    offset: np.ndarray
    noise_std: float = 0.0

    def __post_init__(self) -> None:
        if np.any(np.asarray(self.scale) <= 0):
            raise ConfigError("style scale entries must be positive", field="scale")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative", field="noise_std")


def _place_means(classes: int, dim: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    if classes <= dim:
        # scaled random orthonormal frame: every pair is exactly `separation` apart
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        return q[:, :classes].T * (separation / np.sqrt(2.0))
    radius = separation * classes ** (1.0 / dim)
    means: list[np.ndarray] = []
    for _ in range(10_000 * classes):
        cand = rng.uniform(-radius, radius, size=dim)
        if all(np.linalg.norm(cand - m) >= separation for m in means):
            means.append(cand)
            if len(means) == classes:
                return np.stack(means)
    raise ConfigError(
        f"cannot place {classes} means {separation} apart in {dim} dimensions",
        field="separation",
    )


def generate_gaussian_mixture(
    classes: int, dim: int, per_class: int, separation: float, seed: int
) -> Dataset:
    """Isotropic unit-variance Gaussian blobs, one per class, class-ordered."""
    if classes < 2:
        raise ConfigError("need at least 2 classes", field="classes")
    if per_class < 2:
        raise ConfigError("need at least 2 samples per class", field="per_class")
    if dim < 1:
        raise ConfigError("dim must be positive", field="dim")
    if not separation > 0:
        raise ConfigError("separation must be positive", field="separation")
    rng = np.random.default_rng(seed)
    means = _place_means(classes, dim, separation, rng)
    labels = np.repeat(np.arange(classes), per_class)
    features = means[labels] + rng.normal(size=(labels.size, dim))
    return Dataset(features, labels, classes)


def dirichlet_partition(
    dataset: Dataset, clients: int, alpha: float, noise_var: float, seed: int
) -> PartitionPlan:
    """Label-skewed split: per class, Dirichlet(alpha) client shares with
    additive Gaussian perturbation (clamped and renormalized)."""
    if not alpha > 0:
        raise ConfigError("Dirichlet alpha must be positive", field="alpha")
    if noise_var < 0:
        raise ConfigError("noise_var must be non-negative", field="noise_var")
    if clients < 1:
        raise ConfigError("need at least one client", field="clients")
    if len(dataset) < clients:
        raise ConfigError("fewer samples than clients", field="clients")
    rng = np.random.default_rng(seed)
    C = dataset.class_count
    proportions = np.zeros((C, clients))
    buckets: list[list[np.ndarray]] = [[] for _ in range(clients)]
    for c in range(C):
        shares = rng.dirichlet(np.full(clients, alpha))
        if noise_var > 0:
            noisy = np.clip(shares + rng.normal(0.0, np.sqrt(noise_var), size=clients), 0.0, None)
            if noisy.sum() > 0:
                shares = noisy
        shares = shares / shares.sum()
        proportions[c] = shares
        idx = np.flatnonzero(dataset.labels == c)
        rng.shuffle(idx)
        counts = rng.multinomial(idx.size, shares)
        for k, part in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            buckets[k].append(part)
    assignments = [np.concatenate(b) if b else np.zeros(0, dtype=np.int64) for b in buckets]
    for k in range(clients):
        if assignments[k].size == 0:
            donor = max(range(clients), key=lambda j: (assignments[j].size, -j))
            log.info("client %d received no samples; moving one from client %d", k, donor)
            assignments[k] = assignments[donor][-1:]
            assignments[donor] = assignments[donor][:-1]
    assignments = [np.sort(a).astype(np.int64) for a in assignments]
    return PartitionPlan(assignments, proportions)


def random_style_specs(
    clients: int,
    dim: int,
    seed: int,
    scale_spread: float = 0.5,
    offset_std: float = 2.0,
    noise_std: float = 0.1,
) -> list[StyleShiftSpec]:
    """Per-client affine styles: log-normal scales, Gaussian offsets."""
    rng = np.random.default_rng(seed)
    return [
        StyleShiftSpec(
            scale=np.exp(rng.normal(0.0, scale_spread, size=dim)),
            offset=rng.normal(0.0, offset_std, size=dim),
            noise_std=noise_std,
        )
        for _ in range(clients)
    ]


def apply_style_shift(
    dataset: Dataset, specs: Sequence[StyleShiftSpec], plan: PartitionPlan, seed: int
) -> list[Dataset]:
    """Client k gets ``scale_k * x + offset_k + noise`` over its assigned samples."""
    if len(specs) != plan.clients:
        raise ShapeError(f"{len(specs)} style specs for {plan.clients} clients")
    out = []
    for k, (spec, idx) in enumerate(zip(specs, plan.assignments)):
        rng = np.random.default_rng([seed, k])
        shard = dataset.subset(idx)
        scale = np.asarray(spec.scale, dtype=np.float64)
        offset = np.asarray(spec.offset, dtype=np.float64)
        if scale.shape != (dataset.dim,) or offset.shape != (dataset.dim,):
            raise ShapeError(f"style spec for client {k} does not match feature dim {dataset.dim}")
        x = shard.features * scale + offset
        if spec.noise_std > 0:
            x = x + rng.normal(0.0, spec.noise_std, size=x.shape)
        out.append(Dataset(x, shard.labels, dataset.class_count))
    return out


def stratified_split(
    dataset: Dataset, test_fraction: float, rng: np.random.Generator
) -> tuple[Dataset, Dataset | None]:
    """Per-class split; a class keeps at least one training sample."""
    train_idx, test_idx = [], []
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        n_test = min(int(round(test_fraction * idx.size)), idx.size - 1)
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    train = np.sort(np.concatenate(train_idx))
    test = np.sort(np.concatenate(test_idx)) if test_idx else np.zeros(0, dtype=np.int64)
    return dataset.subset(train), (dataset.subset(test) if test.size else None)


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    n, d = dataset.features.shape
    payload = (
        _HEADER.pack(MAGIC, VERSION, n, d, dataset.class_count)
        + dataset.features.astype("<f8").tobytes()
        + dataset.labels.astype("<u4").tobytes()
    )
    Path(path).write_bytes(payload)


def load_dataset(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"file too short for header ({len(raw)} bytes)", offset=len(raw))
    magic, version, n, d, c = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if n < 1:
        raise FormatError("dataset has no samples", offset=8)
    if c < 1:
        raise FormatError("class count must be positive", offset=16)
    feat_end = _HEADER.size + 8 * n * d
    end = feat_end + 4 * n
    if len(raw) < end:
        raise FormatError(f"truncated payload: expected {end} bytes, found {len(raw)}", offset=len(raw))
    if len(raw) > end:
        raise FormatError(f"{len(raw) - end} trailing bytes", offset=end)
    features = np.frombuffer(raw, dtype="<f8", count=n * d, offset=_HEADER.size).reshape(n, d)
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=feat_end)
    bad = np.flatnonzero(labels >= c)
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} >= class count {c}", offset=feat_end + 4 * int(bad[0]))
    if not np.all(np.isfinite(features)):
        first = int(np.flatnonzero(~np.isfinite(features.reshape(-1)))[0])
        raise FormatError("non-finite feature value", offset=_HEADER.size + 8 * first)
    return Dataset(features.astype(np.float64), labels.astype(np.int64), int(c))
