# norms/__init__.py
"""
Feature normalization layers for two-domain training.

Available normalizers:
- BatchNorm: both domains pooled into one set of statistics
- AdaptiveBatchNorm: BatchNorm whose target examples use target statistics at inference
- AutoDIAL: corresponding-channel mixing of source and target statistics
- DomainSpecificBatchNorm: fully separate statistics and affine per domain
- SharedAffineDSBN: separate statistics, shared affine
- TransNorm: separate statistics plus detached channel transferability attention
- ReciprocalNorm: cross-channel reciprocal compensation + gated aggregation
- IdentityNorm: no normalization
"""

from typing import Any, Dict, Type

from src.norms.norm import (
    DOMAINS,
    Domain,
    DomainStats,
    NormCheckpoint,
    Normalizer,
    StatsRecord,
    ema_update,
    standardize,
)
from src.norms.batchnorm import BatchNorm
from src.norms.adabn import AdaptiveBatchNorm
from src.norms.autodial import AutoDIAL
from src.norms.dsbn import DomainSpecificBatchNorm, SharedAffineDSBN
from src.norms.transnorm import TransNorm, transfer_attention
from src.norms.reciprocal import (
    GATE_BOUNDS,
    GATE_NAMES,
    MEASURES,
    CorrelationRecord,
    CorrelationReport,
    GateParams,
    ReciprocalNorm,
    ra_aggregate,
    rc_compensate,
    rn_forward_eval,
    rn_forward_train,
)
from src.norms.identity import IdentityNorm
from src.numerics import InvalidInputError

NORMALIZERS: Dict[str, Type[Normalizer]] = {
    cls.KIND: cls
    for cls in (
        BatchNorm,
        AdaptiveBatchNorm,
        AutoDIAL,
        DomainSpecificBatchNorm,
        SharedAffineDSBN,
        TransNorm,
        ReciprocalNorm,
        IdentityNorm,
    )
}


def make_normalizer(kind: str, channels: int, **options: Any) -> Normalizer:
    """Instantiate a normalizer by its kind string (see NORMALIZERS)."""
    if kind not in NORMALIZERS:
        raise InvalidInputError(f"unknown normalizer {kind!r}; choose from {sorted(NORMALIZERS)}")
    return NORMALIZERS[kind](channels, **options)


BASELINES = ("bn", "adabn", "autodial", "dsbn", "dsbn_shared", "tn")


def baseline_forward(layer: Normalizer, x_s, x_t):
    """Train-mode forward of a baseline normalizer on a source/target batch pair."""
    if layer.KIND not in BASELINES:
        raise InvalidInputError(f"{layer.KIND!r} is not a baseline normalizer; choose from {list(BASELINES)}")
    return layer.forward_train(x_s, x_t)


def from_checkpoint(checkpoint: NormCheckpoint) -> Normalizer:
    options = dict(checkpoint.options)
    if checkpoint.kind == ReciprocalNorm.KIND:
        options.update(group_size=checkpoint.group_size, measure=checkpoint.measure)
    layer = make_normalizer(checkpoint.kind, checkpoint.C, epsilon=checkpoint.epsilon,
                            alpha=checkpoint.alpha, **options)
    layer.load_state(checkpoint)
    return layer


__all__ = [
    "DOMAINS",
    "Domain",
    "DomainStats",
    "StatsRecord",
    "NormCheckpoint",
    "Normalizer",
    "ema_update",
    "standardize",
    "BatchNorm",
    "AdaptiveBatchNorm",
    "AutoDIAL",
    "DomainSpecificBatchNorm",
    "SharedAffineDSBN",
    "TransNorm",
    "transfer_attention",
    "ReciprocalNorm",
    "GateParams",
    "CorrelationReport",
    "CorrelationRecord",
    "GATE_BOUNDS",
    "GATE_NAMES",
    "MEASURES",
    "rc_compensate",
    "ra_aggregate",
    "rn_forward_train",
    "rn_forward_eval",
    "IdentityNorm",
    "NORMALIZERS",
    "make_normalizer",
    "BASELINES",
    "baseline_forward",
    "from_checkpoint",
]
