# autodial.py
from typing import Dict, List, Tuple

import numpy as np

from src.norms.norm import DomainStats, Normalizer, channel_view, check_pair, ema_update, standardize
from src.numerics import Parameter, Tensor, channel_moments, reduction_axes

MIX_BOUNDS = (0.5, 1.0)


def mixed_variance(x: Tensor, mu: Tensor) -> Tensor:
    """Per-channel mean of (x - mu)^2 around a supplied center."""
    centered = x - channel_view(mu, x.ndim)
    return (centered * centered).mean(axis=reduction_axes(x.ndim))


class AutoDIAL(Normalizer):
    """
    AutoDIAL-style cross-domain alignment of corresponding channels.

    A per-channel mixing weight a in [0.5, 1], shared by both domains, blends
    each domain's statistics with the other domain's statistics of the same
    channel:

        mu'_s = a * mu_s + (1 - a) * mu_t
        var'_s = a * E_s[(x - mu'_s)^2] + (1 - a) * E_t[(x - mu'_s)^2]

    and symmetrically for the target. a = 1 is per-domain BN with shared affine.
    """

    KIND = "autodial"

    def __init__(self, channels: int, epsilon: float = 1e-5, alpha: float = 0.1, **options):
        super().__init__(channels, epsilon, alpha, **options)
        self.mix = Parameter(
            np.full(channels, float(options.get("mix_init", 1.0))), name="mix", bounds=MIX_BOUNDS, decay=False
        )

    def parameters(self) -> List[Parameter]:
        return [self.gamma, self.beta, self.mix]

    def mixed_stats(self, x_own: Tensor, x_other: Tensor, mu_own: Tensor, mu_other: Tensor) -> DomainStats:
        a = self.mix
        mu = a * mu_own + (1.0 - a) * mu_other
        var = a * mixed_variance(x_own, mu) + (1.0 - a) * mixed_variance(x_other, mu)
        return DomainStats(mu, var)

    def forward_train(self, x_s: Tensor, x_t: Tensor) -> Tuple[Tensor, Tensor]:
        check_pair(x_s, x_t)
        mu_s, _ = channel_moments(x_s)
        mu_t, _ = channel_moments(x_t)
        stats_s = self.mixed_stats(x_s, x_t, mu_s, mu_t)
        stats_t = self.mixed_stats(x_t, x_s, mu_t, mu_s)
        out_s = standardize(x_s, stats_s, self.gamma, self.beta, self.epsilon)
        out_t = standardize(x_t, stats_t, self.gamma, self.beta, self.epsilon)
        self.running_s = ema_update(self.running_s, stats_s.detach(), self.alpha)
        self.running_t = ema_update(self.running_t, stats_t.detach(), self.alpha)
        return out_s, out_t

    def extra_state(self) -> Dict[str, List[float]]:
        return {"mix": self.mix.data.tolist()}

    def load_extra_state(self, extra: Dict[str, List[float]]) -> None:
        self.mix.data = np.array(extra["mix"], dtype=np.float64)
