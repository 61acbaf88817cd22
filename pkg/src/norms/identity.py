# identity.py
from typing import List, Tuple

from src.norms.norm import Domain, Normalizer, check_pair
from src.numerics import Parameter, Tensor


class IdentityNorm(Normalizer):
    """No normalization at all; features pass through untouched."""

    KIND = "identity"
    DOMAIN_STATS = False

    def parameters(self) -> List[Parameter]:
        return []

    def forward_train(self, x_s: Tensor, x_t: Tensor) -> Tuple[Tensor, Tensor]:
        check_pair(x_s, x_t)
        return x_s, x_t

    def forward_eval(self, x: Tensor, domain: Domain) -> Tensor:
        return x
