# adabn.py
from src.norms.batchnorm import BatchNorm
from src.norms.norm import Domain, DomainStats, ema_update, standardize
from src.numerics import Tensor, channel_moments


class AdaptiveBatchNorm(BatchNorm):
    """
    AdaBN: trains exactly like BatchNorm on the pooled batch, but also keeps a
    running estimate of the target domain alone and swaps it in when target
    examples are evaluated.
    """

    KIND = "adabn"
    DOMAIN_STATS = True

    def update_running(self, joint: DomainStats, x_s: Tensor, x_t: Tensor) -> None:
        self.running_s = ema_update(self.running_s, joint.detach(), self.alpha)
        mu_t, var_t = channel_moments(x_t.detach())
        self.running_t = ema_update(self.running_t, DomainStats(mu_t, var_t), self.alpha)

    def forward_eval(self, x: Tensor, domain: Domain) -> Tensor:
        return standardize(x, self.running(domain), self.gamma, self.beta, self.epsilon)
