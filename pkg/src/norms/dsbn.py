# dsbn.py
from typing import Dict, List, Tuple

import numpy as np

from src.norms.norm import Domain, DomainStats, Normalizer, check_pair, ema_update, standardize
from src.numerics import Parameter, Tensor


class DomainSpecificBatchNorm(Normalizer):
    """
    DSBN: each domain is normalized completely on its own, with its own
    statistics and its own gamma/beta. No pseudo-labels are involved.
    """

    KIND = "dsbn"

    def __init__(self, channels: int, epsilon: float = 1e-5, alpha: float = 0.1, **options):
        super().__init__(channels, epsilon, alpha, **options)
        self.gamma_t = Parameter(np.ones(channels), name="gamma_t", decay=False)
        self.beta_t = Parameter(np.zeros(channels), name="beta_t", decay=False)

    def affine(self, domain: Domain) -> Tuple[Tensor, Tensor]:
        if domain == "target":
            return self.gamma_t, self.beta_t
        return self.gamma, self.beta

    def parameters(self) -> List[Parameter]:
        return [self.gamma, self.beta, self.gamma_t, self.beta_t]

    def forward_train(self, x_s: Tensor, x_t: Tensor) -> Tuple[Tensor, Tensor]:
        check_pair(x_s, x_t)
        stats_s = DomainStats.of(x_s)
        stats_t = DomainStats.of(x_t)
        out_s = standardize(x_s, stats_s, *self.affine("source"), self.epsilon)
        out_t = standardize(x_t, stats_t, *self.affine("target"), self.epsilon)
        self.running_s = ema_update(self.running_s, stats_s.detach(), self.alpha)
        self.running_t = ema_update(self.running_t, stats_t.detach(), self.alpha)
        return out_s, out_t

    def forward_eval(self, x: Tensor, domain: Domain) -> Tensor:
        return standardize(x, self.running(domain), *self.affine(domain), self.epsilon)

    def extra_state(self) -> Dict[str, List[float]]:
        return {"gamma_t": self.gamma_t.data.tolist(), "beta_t": self.beta_t.data.tolist()}

    def load_extra_state(self, extra: Dict[str, List[float]]) -> None:
        self.gamma_t.data = np.array(extra["gamma_t"], dtype=np.float64)
        self.beta_t.data = np.array(extra["beta_t"], dtype=np.float64)


class SharedAffineDSBN(DomainSpecificBatchNorm):
    """DSBN statistics with a single gamma/beta shared by both domains."""

    KIND = "dsbn_shared"

    def affine(self, domain: Domain) -> Tuple[Tensor, Tensor]:
        return self.gamma, self.beta

    def parameters(self) -> List[Parameter]:
        return [self.gamma, self.beta]

    def extra_state(self) -> Dict[str, List[float]]:
        return {}

    def load_extra_state(self, extra: Dict[str, List[float]]) -> None:
        pass
