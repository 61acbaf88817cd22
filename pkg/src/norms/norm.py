# norm.py
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Dict, List, Literal, Tuple

import numpy as np
from pydantic import BaseModel, Field

from src.numerics import InvalidInputError, Parameter, Tensor, channel_moments

Domain = Literal["source", "target"]
DOMAINS: Tuple[str, str] = ("source", "target")


@dataclass
class DomainStats:
    """Per-channel mean and variance of one domain in one layer."""

    mu: Tensor
    var: Tensor

    def __post_init__(self):
        if self.mu.ndim != 1 or self.mu.shape != self.var.shape or self.mu.shape[0] < 1:
            raise InvalidInputError(
                f"DomainStats needs two equal-length vectors, got {self.mu.shape} and {self.var.shape}"
            )

    @classmethod
    def of(cls, x: Tensor) -> "DomainStats":
        mu, var = channel_moments(x)
        return cls(mu, var)

    @classmethod
    def default(cls, channels: int) -> "DomainStats":
        return cls(Tensor(np.zeros(channels)), Tensor(np.ones(channels)))

    @property
    def channels(self) -> int:
        return self.mu.shape[0]

    def detach(self) -> "DomainStats":
        return DomainStats(self.mu.detach(), self.var.detach())

    def record(self) -> "StatsRecord":
        return StatsRecord(mu=self.mu.data.tolist(), var=self.var.data.tolist())


def ema_update(running: DomainStats, batch: DomainStats, alpha: float) -> DomainStats:
    """new = (1 - alpha) * running + alpha * batch, channel by channel, detached from the tape."""
    if not 0.0 < alpha <= 1.0:
        raise InvalidInputError(f"EMA momentum must lie in (0, 1], got {alpha}")
    if running.channels != batch.channels:
        raise InvalidInputError(f"EMA channel mismatch: {running.channels} vs {batch.channels}")
    return DomainStats(
        Tensor((1.0 - alpha) * running.mu.data + alpha * batch.mu.data),
        Tensor((1.0 - alpha) * running.var.data + alpha * batch.var.data),
    )


def channel_view(vector: Tensor, ndim: int) -> Tensor:
    """Reshape a [C] vector so it broadcasts against [N, C, ...]."""
    return vector.reshape((1, vector.shape[0]) + (1,) * (ndim - 2))


def standardize(x: Tensor, stats: DomainStats, gamma: Tensor, beta: Tensor, epsilon: float) -> Tensor:
    """gamma * (x - mu) / sqrt(var + eps) + beta, per channel."""
    if x.ndim < 2 or x.shape[1] != stats.channels:
        raise InvalidInputError(f"expected [N, {stats.channels}, ...] input, got shape {x.shape}")
    xhat = (x - channel_view(stats.mu, x.ndim)) / (channel_view(stats.var, x.ndim) + epsilon).sqrt()
    return xhat * channel_view(gamma, x.ndim) + channel_view(beta, x.ndim)


def check_pair(x_s: Tensor, x_t: Tensor) -> None:
    if x_s.ndim < 2 or x_t.ndim < 2 or x_s.shape[1] != x_t.shape[1]:
        raise InvalidInputError(f"source/target channel mismatch: {x_s.shape} vs {x_t.shape}")
    if x_s.shape[0] == 0 or x_t.shape[0] == 0:
        raise InvalidInputError("empty batch")


class StatsRecord(BaseModel):
    mu: List[float]
    var: List[float]


class NormCheckpoint(BaseModel):
    """JSON container for one normalization layer."""

    kind: str
    C: int = Field(ge=1)
    epsilon: float = Field(gt=0)
    alpha: float = Field(gt=0, le=1)
    group_size: int = Field(default=512, ge=1)
    measure: str = "neg_l2"
    gamma: List[float]
    beta: List[float]
    gates: Dict[str, List[float]] = Field(default_factory=dict)
    running_s: StatsRecord
    running_t: StatsRecord
    extra: Dict[str, List[float]] = Field(default_factory=dict, description="Kind-specific vectors")
    options: Dict[str, Any] = Field(default_factory=dict)


class Normalizer(ABC):
    """
    Base class for feature normalization layers in a two-domain setting.

    Usage:
    - forward_train(x_s, x_t) normalizes a source and a target batch and
      updates running statistics
    - forward_eval(x, domain) normalizes with running statistics only, never
      mutating the layer
    - parameters() lists the learnable Parameters (with their bounds)
    - state()/load_state() round-trip the layer through a NormCheckpoint
    """

    KIND: str = ""
    # False for layers that pool both domains into one set of statistics
    DOMAIN_STATS: bool = True

    def __init__(self, channels: int, epsilon: float = 1e-5, alpha: float = 0.1, **options: Any):
        if channels < 1:
            raise InvalidInputError(f"channel count must be >= 1, got {channels}")
        if epsilon <= 0:
            raise InvalidInputError(f"epsilon must be positive, got {epsilon}")
        if not 0.0 < alpha <= 1.0:
            raise InvalidInputError(f"alpha must lie in (0, 1], got {alpha}")
        self.channels = channels
        self.epsilon = float(epsilon)
        self.alpha = float(alpha)
        self.options: Dict[str, Any] = options
        self.gamma = Parameter(np.ones(channels), name="gamma", decay=False)
        self.beta = Parameter(np.zeros(channels), name="beta", decay=False)
        self.running_s = DomainStats.default(channels)
        self.running_t = DomainStats.default(channels)

    def parameters(self) -> List[Parameter]:
        return [self.gamma, self.beta]

    def running(self, domain: Domain) -> DomainStats:
        if domain not in DOMAINS:
            raise InvalidInputError(f"unknown domain {domain!r}")
        return self.running_s if domain == "source" else self.running_t

    @abstractmethod
    def forward_train(self, x_s: Tensor, x_t: Tensor) -> Tuple[Tensor, Tensor]:
        """
        Normalize a source and a target mini-batch with batch statistics.

        Args:
            x_s, x_t: [N, C, ...] batches sharing the channel count.

        Returns:
            (normalized source, normalized target)
        """
        raise NotImplementedError

    def forward_eval(self, x: Tensor, domain: Domain) -> Tensor:
        """Normalize with the selected domain's running statistics."""
        return standardize(x, self.running(domain), self.gamma, self.beta, self.epsilon)

    # ------------------------------------------------------------------
    # checkpoints
    # ------------------------------------------------------------------

    def extra_state(self) -> Dict[str, List[float]]:
        return {}

    def load_extra_state(self, extra: Dict[str, List[float]]) -> None:
        pass

    def state(self) -> NormCheckpoint:
        return NormCheckpoint(
            kind=self.KIND,
            C=self.channels,
            epsilon=self.epsilon,
            alpha=self.alpha,
            group_size=int(self.options.get("group_size", 512)),
            measure=str(self.options.get("measure", "neg_l2")),
            gamma=self.gamma.data.tolist(),
            beta=self.beta.data.tolist(),
            running_s=self.running_s.record(),
            running_t=self.running_t.record(),
            extra=self.extra_state(),
            options={k: v for k, v in self.options.items() if k not in ("group_size", "measure")},
        )

    def load_state(self, checkpoint: NormCheckpoint) -> None:
        if checkpoint.kind != self.KIND or checkpoint.C != self.channels:
            raise InvalidInputError(
                f"checkpoint for {checkpoint.kind}[{checkpoint.C}] cannot load into {self.KIND}[{self.channels}]"
            )
        self.gamma.data = np.array(checkpoint.gamma, dtype=np.float64)
        self.beta.data = np.array(checkpoint.beta, dtype=np.float64)
        self.running_s = DomainStats(Tensor(checkpoint.running_s.mu), Tensor(checkpoint.running_s.var))
        self.running_t = DomainStats(Tensor(checkpoint.running_t.mu), Tensor(checkpoint.running_t.var))
        self.load_extra_state(checkpoint.extra)
