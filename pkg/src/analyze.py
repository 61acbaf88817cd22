"""
Diagnostics for trained runs: A-distance, ideal joint risk (lambda),
nearest cross-domain channel distances, and the analysis.json export.

Usage:
    python src/rn_lab.py analyze --run output/rn-s0
"""

import hashlib
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, TypeAdapter

from src.config import load_config
from src.data import DomainDataset, save_csv
from src.models import Discriminator, DiscriminatorSpec, DomainAdversarialNet
from src.norms import CorrelationRecord, DomainStats, GATE_NAMES, ReciprocalNorm
from src.numerics import InvalidInputError, Tensor, backward, cross_entropy
from src.train import ProjectedSGD, evaluate, load_model, make_datasets

logger = logging.getLogger(__name__)

PROBE_HIDDEN = 32
TEST_FRACTION = 0.2
CORRELATION_LIST = TypeAdapter(List[CorrelationRecord])


# ============================================================================
# REPORT SCHEMAS
# ============================================================================


class TheoryReport(BaseModel):
    """Terms of the domain-adaptation learning bound eps_T <= eps_S + d/2 + lambda."""

    a_distance: float = Field(ge=0, le=2, description="2 (1 - 2 min(eps, 0.5))")
    discriminator_error: float = Field(ge=0, le=1, description="Held-out error of the domain classifier")
    lambda_risk: Optional[float] = Field(default=None, ge=0, description="Mean source/target error of a jointly trained classifier")
    source_error: Optional[float] = Field(default=None, ge=0, le=1, description="Source error of the trained model")
    bound: Optional[float] = Field(default=None, description="source_error + a_distance / 2 + lambda_risk")


class ChannelDistanceReport(BaseModel):
    layer: int = 0
    distance_sum: float = Field(ge=0, description="Sum over target channels of the nearest source-channel distance")
    corresponding_ratio: float = Field(ge=0, le=100, description="Percent of target channels whose nearest source channel has the same index")
    nearest: List[int] = Field(description="nearest[i] = source channel closest to target channel i")


class GateSnapshot(BaseModel):
    checkpoint: str
    layer: int
    gates: Dict[str, List[float]]
    means: Dict[str, float]


class AnalysisReport(BaseModel):
    """Schema of analysis.json."""

    run: str
    checkpoints: List[str]
    gates: List[GateSnapshot] = Field(default_factory=list, description="One entry per RN layer per checkpoint")
    correlations: Dict[str, List[CorrelationRecord]] = Field(
        default_factory=dict, description="Per checkpoint: rho matrices and compensatory stats of the last training batch"
    )
    channel_distances: List[ChannelDistanceReport] = Field(default_factory=list)
    theory: Optional[TheoryReport] = None
    features_csv: Optional[str] = None


# ============================================================================
# A-DISTANCE AND LAMBDA
# ============================================================================


def a_distance(error: float) -> float:
    """2 (1 - 2 eps) with eps clamped to 0.5, so worse-than-chance never goes negative."""
    if not 0.0 <= error <= 1.0:
        raise InvalidInputError(f"error rate must lie in [0, 1], got {error}")
    return 2.0 * (1.0 - 2.0 * min(error, 0.5))


def _split(n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    n_test = int(round(TEST_FRACTION * n))
    if n_test < 1 or n - n_test < 1:
        raise InvalidInputError(f"{n} examples are too few for a {1 - TEST_FRACTION:.0%}/{TEST_FRACTION:.0%} split")
    order = rng.permutation(n)
    return order[n_test:], order[:n_test]


def _standardizer(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    return mu, np.where(sd > 0, sd, 1.0)


def fit_probe(
    x: np.ndarray,
    y: np.ndarray,
    classes: int,
    seed: int,
    epochs: int = 20,
    lr: float = 0.05,
    batch_size: int = 64,
) -> Discriminator:
    """Train a fresh one-hidden-layer classifier (width 32) with momentum SGD."""
    rng = np.random.default_rng(seed)
    model = Discriminator(DiscriminatorSpec(features=x.shape[1], hidden=PROBE_HIDDEN, outputs=classes), rng)
    optimizer = ProjectedSGD(model.parameters(), lr, momentum=0.9)
    batch_size = min(batch_size, len(x))
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x) - batch_size + 1, batch_size):
            idx = order[start : start + batch_size]
            loss = cross_entropy(model(Tensor(x[idx])), y[idx])
            optimizer.step(backward(loss))
    return model


def _predict(model: Discriminator, x: np.ndarray) -> np.ndarray:
    return np.argmax(model(Tensor(x)).data, axis=1)


def estimate_a_distance(
    features_s: np.ndarray, features_t: np.ndarray, seed: int = 0, epochs: int = 20
) -> TheoryReport:
    """
    Proxy A-distance: split each domain 80/20, train a domain classifier on
    the train parts (inputs standardized with train-split moments) and take
    its error on the held-out parts.
    """
    features_s = np.asarray(features_s, dtype=np.float64)
    features_t = np.asarray(features_t, dtype=np.float64)
    if len(features_s) == 0 or len(features_t) == 0:
        raise InvalidInputError("both feature sets must be non-empty")
    rng = np.random.default_rng(seed)
    train_s, test_s = _split(len(features_s), rng)
    train_t, test_t = _split(len(features_t), rng)

    x_train = np.concatenate([features_s[train_s], features_t[train_t]])
    y_train = np.concatenate([np.zeros(len(train_s), dtype=np.int64), np.ones(len(train_t), dtype=np.int64)])
    x_test = np.concatenate([features_s[test_s], features_t[test_t]])
    y_test = np.concatenate([np.zeros(len(test_s), dtype=np.int64), np.ones(len(test_t), dtype=np.int64)])

    mu, sd = _standardizer(x_train)
    model = fit_probe((x_train - mu) / sd, y_train, 2, seed, epochs=epochs)
    error = float(np.mean(_predict(model, (x_test - mu) / sd) != y_test))
    logger.debug("domain classifier error %.4f on %d held-out examples", error, len(y_test))
    return TheoryReport(a_distance=a_distance(error), discriminator_error=error)


def _fingerprint(features: np.ndarray, labels: np.ndarray) -> bytes:
    return hashlib.sha256(features.tobytes() + labels.tobytes()).digest()


def estimate_lambda(
    features_s: np.ndarray,
    labels_s: np.ndarray,
    features_t: np.ndarray,
    labels_t: np.ndarray,
    seed: int = 0,
    epochs: int = 20,
) -> float:
    """
    Risk of the ideal joint hypothesis: one classifier trained on the labeled
    union of both domains; lambda = mean of its held-out source and target errors.

    The two domains are processed in a canonical order, so swapping them
    gives the same number bit for bit.
    """
    domains = [
        (np.asarray(features_s, dtype=np.float64), np.asarray(labels_s, dtype=np.int64)),
        (np.asarray(features_t, dtype=np.float64), np.asarray(labels_t, dtype=np.int64)),
    ]
    if set(np.unique(domains[0][1])) != set(np.unique(domains[1][1])):
        missing = set(np.unique(domains[0][1])) ^ set(np.unique(domains[1][1]))
        raise InvalidInputError(f"classes {sorted(int(c) for c in missing)} are missing in one domain")
    domains.sort(key=lambda d: _fingerprint(*d))

    rng = np.random.default_rng(seed)
    splits = [_split(len(x), rng) for x, _ in domains]
    x_train = np.concatenate([x[train] for (x, _), (train, _) in zip(domains, splits)])
    y_train = np.concatenate([y[train] for (_, y), (train, _) in zip(domains, splits)])
    mu, sd = _standardizer(x_train)
    classes = int(max(y.max() for _, y in domains)) + 1
    model = fit_probe((x_train - mu) / sd, y_train, classes, seed, epochs=epochs)

    errors = [float(np.mean(_predict(model, (x[test] - mu) / sd) != y[test])) for (x, y), (_, test) in zip(domains, splits)]
    return 0.5 * (errors[0] + errors[1])


# ============================================================================
# CHANNEL DISTANCES
# ============================================================================


def _signature(stats: Union[DomainStats, Tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    mu, var = (stats.mu.data, stats.var.data) if isinstance(stats, DomainStats) else stats
    mu = np.asarray(mu, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if mu.shape != var.shape or mu.ndim != 1:
        raise InvalidInputError(f"mean/variance shape mismatch: {mu.shape} vs {var.shape}")
    if np.any(var <= 0):
        raise InvalidInputError("channel variances must be positive")
    return mu / np.sqrt(var)


def nearest_channel_distances(
    stats_s: Union[DomainStats, Tuple[np.ndarray, np.ndarray]],
    stats_t: Union[DomainStats, Tuple[np.ndarray, np.ndarray]],
    layer: int = 0,
) -> ChannelDistanceReport:
    """
    D[i, j] = |sig_t[i] - sig_s[j]| with sig = mu / sqrt(var); every target
    channel is matched to its nearest source channel (lowest index on ties).
    """
    sig_s = _signature(stats_s)
    sig_t = _signature(stats_t)
    if sig_s.shape != sig_t.shape:
        raise InvalidInputError(f"channel count mismatch: {sig_s.shape[0]} vs {sig_t.shape[0]}")
    distances = np.abs(sig_t[:, None] - sig_s[None, :])
    nearest = np.argmin(distances, axis=1)
    picked = distances[np.arange(len(sig_t)), nearest]
    return ChannelDistanceReport(
        layer=layer,
        distance_sum=math.fsum(picked.tolist()),
        corresponding_ratio=100.0 * float(np.sum(nearest == np.arange(len(sig_t)))) / len(sig_t),
        nearest=nearest.tolist(),
    )


def channel_distance_report(model: DomainAdversarialNet) -> List[ChannelDistanceReport]:
    """Channel distances of every layer that keeps per-domain running statistics."""
    return [
        nearest_channel_distances(norm.running_s, norm.running_t, layer=i)
        for i, norm in enumerate(model.backbone.norms)
        if norm.DOMAIN_STATS
    ]


# ============================================================================
# EXPORT
# ============================================================================


def gate_snapshots(model: DomainAdversarialNet, checkpoint: str) -> List[GateSnapshot]:
    snapshots = []
    for i, norm in enumerate(model.backbone.norms):
        if not isinstance(norm, ReciprocalNorm):
            continue
        gates = norm.gates.snapshot()
        snapshots.append(GateSnapshot(
            checkpoint=checkpoint, layer=i, gates=gates,
            means={name: float(np.mean(gates[name])) for name in GATE_NAMES},
        ))
    return snapshots


def bottleneck_features(model: DomainAdversarialNet, dataset: DomainDataset) -> np.ndarray:
    x = Tensor(dataset.features)
    if dataset.domain == "source":
        return model.backbone.forward(x, None, "eval").features_s.data
    return model.backbone.forward(None, x, "eval").features_t.data


def theory_report(model: DomainAdversarialNet, source: DomainDataset, target: DomainDataset, seed: int = 0) -> TheoryReport:
    features_s = bottleneck_features(model, source)
    features_t = bottleneck_features(model, target)
    report = estimate_a_distance(features_s, features_t, seed)
    report.lambda_risk = estimate_lambda(features_s, source.labels, features_t, target.labels, seed)
    accuracy, _ = evaluate(model, source)
    report.source_error = 1.0 - accuracy
    report.bound = report.source_error + report.a_distance / 2.0 + report.lambda_risk
    return report


def _checkpoint_files(run_dir: Path) -> List[Path]:
    files = sorted((run_dir / "checkpoints").glob("epoch_*.json"))
    if not files:
        raise InvalidInputError(f"no checkpoints under {run_dir / 'checkpoints'}")
    return files


def export_reports(
    run_dir: Union[str, Path], seed: int = 0, theory: bool = True, out_dir: Optional[Union[str, Path]] = None
) -> AnalysisReport:
    """
    Write analysis.json (and features.csv) for a training run directory.

    Reads checkpoints/epoch_*.json and reports/epoch_*.json; the final
    checkpoint supplies channel distances, bottleneck features and, with
    `theory`, the learning-bound terms. Data are regenerated from the run's
    config.cfg. Outputs go to out_dir, or the run directory itself.
    """
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    files = _checkpoint_files(run_dir)
    analysis = AnalysisReport(run=str(run_dir), checkpoints=[f.stem for f in files])

    model = None
    for path in files:
        model = load_model(path)
        analysis.gates.extend(gate_snapshots(model, path.stem))
        report_path = run_dir / "reports" / path.name
        if report_path.exists():
            analysis.correlations[path.stem] = CORRELATION_LIST.validate_json(report_path.read_text(encoding="utf-8"))

    analysis.channel_distances = channel_distance_report(model)

    config_path = run_dir / "config.cfg"
    if config_path.exists():
        source, target = make_datasets(load_config(config_path))
        features = [
            DomainDataset(bottleneck_features(model, ds), ds.labels, ds.domain) for ds in (source, target)
        ]
        analysis.features_csv = str(save_csv(out_dir / "features.csv", features))
        if theory:
            analysis.theory = theory_report(model, source, target, seed)
    else:
        logger.warning("%s has no config.cfg; skipping features and theory report", run_dir)

    (out_dir / "analysis.json").write_text(analysis.model_dump_json(indent=2), encoding="utf-8")
    logger.info("wrote %s", out_dir / "analysis.json")
    return analysis

