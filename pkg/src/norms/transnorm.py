# transnorm.py
from typing import Optional, Tuple

import numpy as np

from src.norms.norm import (
    Domain,
    DomainStats,
    Normalizer,
    channel_view,
    check_pair,
    ema_update,
    standardize,
)
from src.numerics import Tensor


def channel_signature(stats: DomainStats, epsilon: float = 0.0) -> np.ndarray:
    """mu / sqrt(var) per channel, read off the tape."""
    return stats.mu.data / np.sqrt(stats.var.data + epsilon)


def transfer_attention(stats_s: DomainStats, stats_t: DomainStats, epsilon: float) -> Tensor:
    """
    Corresponding-channel transferability weights.

        d_j = |sig_s[j] - sig_t[j]|
        a_j = C * (1 + d_j)^-1 / sum_k (1 + d_k)^-1

    Built from plain arrays, so the result is a constant on the tape.
    """
    distance = np.abs(channel_signature(stats_s, epsilon) - channel_signature(stats_t, epsilon))
    inverse = 1.0 / (1.0 + distance)
    return Tensor(stats_s.channels * inverse / inverse.sum())


class TransNorm(Normalizer):
    """
    Transferable normalization baseline.

    Each domain is standardized by its own batch statistics (with gradient)
    and a shared affine; the output is then scaled by (1 + a), where the
    channel attention a is computed from detached statistics and never
    receives gradient.
    """

    KIND = "tn"

    def __init__(self, channels: int, epsilon: float = 1e-5, alpha: float = 0.1, **options):
        super().__init__(channels, epsilon, alpha, **options)
        self.last_attention: Optional[Tensor] = None

    def forward_train(
        self, x_s: Tensor, x_t: Tensor, attention: Optional[Tensor] = None
    ) -> Tuple[Tensor, Tensor]:
        check_pair(x_s, x_t)
        stats_s = DomainStats.of(x_s)
        stats_t = DomainStats.of(x_t)
        if attention is None:
            attention = transfer_attention(stats_s, stats_t, self.epsilon)
        scale = 1.0 + channel_view(attention, x_s.ndim)
        out_s = standardize(x_s, stats_s, self.gamma, self.beta, self.epsilon) * scale
        out_t = standardize(x_t, stats_t, self.gamma, self.beta, self.epsilon) * scale
        self.running_s = ema_update(self.running_s, stats_s.detach(), self.alpha)
        self.running_t = ema_update(self.running_t, stats_t.detach(), self.alpha)
        self.last_attention = attention
        return out_s, out_t

    def forward_eval(self, x: Tensor, domain: Domain) -> Tensor:
        attention = transfer_attention(self.running_s, self.running_t, self.epsilon)
        out = standardize(x, self.running(domain), self.gamma, self.beta, self.epsilon)
        return out * (1.0 + channel_view(attention, x.ndim))
