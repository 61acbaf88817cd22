"""
Seeded two-domain toy datasets.

Every generator returns a (source, target) pair of DomainDataset built from the
same class-conditional process, with the target pushed through a domain shift:
a per-feature affine map, a channel permutation, or a rotation.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.numerics import InvalidInputError

logger = logging.getLogger(__name__)

DOMAIN_TAGS = {"source": "s", "target": "t"}


@dataclass
class UnlabeledDataset:
    """Features of one domain with the labels withheld."""

    features: np.ndarray
    domain: str

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class DomainDataset:
    features: np.ndarray
    labels: np.ndarray
    domain: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise InvalidInputError(f"features must be a non-empty [M, F] array, got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise InvalidInputError(f"{self.labels.shape[0]} labels for {self.features.shape[0]} rows")
        if self.labels.min() < 0:
            raise InvalidInputError("labels must be non-negative class indices")
        if self.domain not in DOMAIN_TAGS:
            raise InvalidInputError(f"domain must be one of {sorted(DOMAIN_TAGS)}, got {self.domain!r}")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def unlabeled(self) -> UnlabeledDataset:
        return UnlabeledDataset(self.features, self.domain)


DatasetPair = Tuple[DomainDataset, DomainDataset]


def _as_vector(value: Union[float, Sequence[float]], length: int, name: str) -> np.ndarray:
    vector = np.broadcast_to(np.asarray(value, dtype=np.float64), (length,)).copy() if np.ndim(value) == 0 \
        else np.asarray(value, dtype=np.float64)
    if vector.shape != (length,):
        raise InvalidInputError(f"{name} must have {length} entries, got {vector.shape}")
    return vector


def _gaussian_classes(
    rng: np.random.Generator, centers: np.ndarray, per_class: int
) -> Tuple[np.ndarray, np.ndarray]:
    classes, features = centers.shape
    labels = np.repeat(np.arange(classes), per_class)
    x = centers[labels] + rng.normal(size=(labels.size, features))
    return x, labels


def _check_sizes(classes: int, features: int, per_class: int) -> None:
    if classes < 2 or features < 2:
        raise InvalidInputError(f"need at least 2 classes and 2 features, got K={classes}, F={features}")
    if per_class < 1:
        raise InvalidInputError(f"per_class must be >= 1, got {per_class}")


def make_shifted_gaussians(
    classes: int,
    features: int,
    shift: Union[float, Sequence[float]] = 0.0,
    scale: Union[float, Sequence[float]] = 1.0,
    per_class: int = 250,
    seed: int = 0,
    spread: float = 3.0,
) -> DatasetPair:
    """
    Class k ~ N(center_k, I) with centers ~ N(0, spread^2 I); the target draws
    from the same process and is mapped through x -> scale * x + shift.
    """
    _check_sizes(classes, features, per_class)
    shift_v = _as_vector(shift, features, "shift")
    scale_v = _as_vector(scale, features, "scale")
    if np.any(scale_v == 0):
        raise InvalidInputError("scale must be non-zero in every feature")

    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, spread, size=(classes, features))
    x_s, y_s = _gaussian_classes(rng, centers, per_class)
    x_t, y_t = _gaussian_classes(rng, centers, per_class)
    return DomainDataset(x_s, y_s, "source"), DomainDataset(scale_v * x_t + shift_v, y_t, "target")


def pair_permutation(features: int) -> List[int]:
    """Swap features in consecutive 2-feature blocks: (1, 0, 3, 2, ...)."""
    perm = list(range(features))
    for i in range(0, features - 1, 2):
        perm[i], perm[i + 1] = perm[i + 1], perm[i]
    return perm


def make_channel_permuted(
    classes: int,
    features: int,
    permutation: Sequence[int],
    shift: Union[float, Sequence[float]] = 0.0,
    per_class: int = 250,
    seed: int = 0,
    spread: float = 3.0,
) -> DatasetPair:
    """
    Same class process in both domains; target feature j is source-process
    feature permutation[j], then shifted. Corresponding channels no longer
    carry the same pattern, non-corresponding ones do.
    """
    _check_sizes(classes, features, per_class)
    perm = np.asarray(permutation, dtype=np.int64)
    if perm.shape != (features,) or sorted(perm.tolist()) != list(range(features)):
        raise InvalidInputError(f"permutation must be a bijection on {features} features, got {list(permutation)}")
    shift_v = _as_vector(shift, features, "shift")

    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, spread, size=(classes, features))
    x_s, y_s = _gaussian_classes(rng, centers, per_class)
    x_t, y_t = _gaussian_classes(rng, centers, per_class)
    return DomainDataset(x_s, y_s, "source"), DomainDataset(x_t[:, perm] + shift_v, y_t, "target")


def _two_moons(rng: np.random.Generator, samples: int, noise: float) -> Tuple[np.ndarray, np.ndarray]:
    outer = samples // 2
    inner = samples - outer
    t_outer = rng.uniform(0.0, math.pi, size=outer)
    t_inner = rng.uniform(0.0, math.pi, size=inner)
    x = np.concatenate([
        np.stack([np.cos(t_outer), np.sin(t_outer)], axis=1),
        np.stack([1.0 - np.cos(t_inner), 0.5 - np.sin(t_inner)], axis=1),
    ])
    y = np.concatenate([np.zeros(outer, dtype=np.int64), np.ones(inner, dtype=np.int64)])
    if noise > 0:
        x = x + rng.normal(0.0, noise, size=x.shape)
    return x, y


MOONS_CENTER = np.array([0.5, 0.25])


def make_two_moons_shift(samples: int = 400, rotation: float = 30.0, noise: float = 0.1, seed: int = 0) -> DatasetPair:
    """Two interleaved half-circles; the target is a fresh draw rotated by `rotation` degrees about the moons' center."""
    if noise < 0:
        raise InvalidInputError(f"noise must be >= 0, got {noise}")
    if samples < 2:
        raise InvalidInputError(f"need at least 2 samples, got {samples}")
    rng = np.random.default_rng(seed)
    x_s, y_s = _two_moons(rng, samples, noise)
    x_t, y_t = _two_moons(rng, samples, noise)
    theta = math.radians(rotation)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    x_t = (x_t - MOONS_CENTER) @ rot.T + MOONS_CENTER
    return DomainDataset(x_s, y_s, "source"), DomainDataset(x_t, y_t, "target")


def batch_iter(
    source: DomainDataset,
    target: UnlabeledDataset,
    batch_size: int,
    seed: int,
    epoch: int = 0,
) -> Iterator[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """
    One epoch of balanced (source features, source labels, target features) batches.

    Both streams are shuffled with a generator seeded by (seed, epoch); the
    epoch length is set by the longer dataset, the shorter one is reshuffled
    and recycled, and incomplete trailing batches are dropped.
    """
    if batch_size < 1:
        raise InvalidInputError(f"batch size must be >= 1, got {batch_size}")
    if batch_size > min(len(source), len(target)):
        raise InvalidInputError(f"batch size {batch_size} exceeds the smaller domain ({min(len(source), len(target))})")

    rng = np.random.default_rng([seed, epoch])
    steps = max(len(source), len(target)) // batch_size

    def stream(size: int) -> Iterator[np.ndarray]:
        while True:
            order = rng.permutation(size)
            for start in range(0, size - batch_size + 1, batch_size):
                yield order[start : start + batch_size]

    source_idx = stream(len(source))
    target_idx = stream(len(target))
    for _ in range(steps):
        idx_s = next(source_idx)
        idx_t = next(target_idx)
        yield source.features[idx_s], source.labels[idx_s], target.features[idx_t]


# ----------------------------------------------------------------------
# CSV: header f0,...,f{F-1},label,domain with domain in {s, t}
# ----------------------------------------------------------------------


def to_frame(datasets: Sequence[DomainDataset]) -> pd.DataFrame:
    frames = []
    for ds in datasets:
        frame = pd.DataFrame(ds.features, columns=[f"f{i}" for i in range(ds.num_features)])
        frame["label"] = ds.labels
        frame["domain"] = DOMAIN_TAGS[ds.domain]
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def save_csv(path: Union[str, Path], datasets: Sequence[DomainDataset]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    to_frame(datasets).to_csv(path, index=False, encoding="utf-8", lineterminator="\n", float_format="%.17g")
    logger.info("wrote %s", path)
    return path


def load_csv(path: Union[str, Path]) -> Tuple[Optional[DomainDataset], Optional[DomainDataset]]:
    """Read a data CSV back into (source, target); a domain absent from the file comes back as None."""
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"data file not found: {path}")
    frame = pd.read_csv(path, encoding="utf-8", float_precision="round_trip")
    feature_cols = [c for c in frame.columns if c.startswith("f")]
    expected = [f"f{i}" for i in range(len(feature_cols))]
    if feature_cols != expected or list(frame.columns) != expected + ["label", "domain"]:
        raise InvalidInputError(f"{path}: header must be f0..f{{F-1}},label,domain, got {list(frame.columns)}")
    unknown = set(frame["domain"].unique()) - set(DOMAIN_TAGS.values())
    if unknown:
        raise InvalidInputError(f"{path}: unknown domain tags {sorted(unknown)}")

    out = []
    for domain, tag in DOMAIN_TAGS.items():
        part = frame[frame["domain"] == tag]
        if part.empty:
            out.append(None)
            continue
        out.append(DomainDataset(part[expected].to_numpy(dtype=np.float64), part["label"].to_numpy(), domain))
    return out[0], out[1]
