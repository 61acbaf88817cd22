# batchnorm.py
from typing import Tuple

from src.norms.norm import Domain, DomainStats, Normalizer, check_pair, ema_update, standardize
from src.numerics import Tensor, concat


class BatchNorm(Normalizer):
    """
    Plain batch normalization: both domains are pooled into one batch, one set
    of statistics normalizes it, and one running estimate serves every domain
    at inference.
    """

    KIND = "bn"
    DOMAIN_STATS = False

    def forward_train(self, x_s: Tensor, x_t: Tensor) -> Tuple[Tensor, Tensor]:
        check_pair(x_s, x_t)
        n_s = x_s.shape[0]
        joint = concat([x_s, x_t], axis=0)
        stats = DomainStats.of(joint)
        out = standardize(joint, stats, self.gamma, self.beta, self.epsilon)
        self.update_running(stats, x_s, x_t)
        return out[:n_s], out[n_s:]

    def update_running(self, joint: DomainStats, x_s: Tensor, x_t: Tensor) -> None:
        self.running_s = ema_update(self.running_s, joint.detach(), self.alpha)
        self.running_t = self.running_s

    def forward_eval(self, x: Tensor, domain: Domain) -> Tensor:
        return standardize(x, self.running_s, self.gamma, self.beta, self.epsilon)
