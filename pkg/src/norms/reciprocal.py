# reciprocal.py
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel

from src.norms.norm import DomainStats, NormCheckpoint, Normalizer, check_pair, ema_update, standardize
from src.numerics import InvalidInputError, Parameter, Tensor, concat, matvec, softmax_rows

logger = logging.getLogger(__name__)

GATE_BOUNDS = (0.5, 1.0)
GATE_NAMES = ("g_mu_s", "g_var_s", "g_mu_t", "g_var_t")
DEFAULT_GROUP_SIZE = 512


# ----------------------------------------------------------------------
# correlation measures between target channel i and source channel j
# ----------------------------------------------------------------------


def _gap(z_t: Tensor, z_s: Tensor) -> Tensor:
    c = z_t.shape[0]
    return z_t.reshape(c, 1) - z_s.reshape(1, c)


def neg_l2(stats_s: DomainStats, stats_t: DomainStats) -> Tuple[Tensor, Tensor]:
    """E[i, j] = -(z_t[i] - z_s[j])^2, separately for the means and the variances."""
    gap_mu = _gap(stats_t.mu, stats_s.mu)
    gap_var = _gap(stats_t.var, stats_s.var)
    return -(gap_mu * gap_mu), -(gap_var * gap_var)


def neg_l1(stats_s: DomainStats, stats_t: DomainStats) -> Tuple[Tensor, Tensor]:
    """E[i, j] = -|z_t[i] - z_s[j]|."""
    return -_gap(stats_t.mu, stats_s.mu).abs(), -_gap(stats_t.var, stats_s.var).abs()


def neg_cosine(stats_s: DomainStats, stats_t: DomainStats) -> Tuple[Tensor, Tensor]:
    """
    E[i, j] = cos(v_t[i], v_s[j]) - 1 with v = (mu, var) per channel.

    A scalar pair has a degenerate cosine, so both matrices share the
    distance between the stacked (mu, var) channel descriptors.
    """
    c = stats_s.channels
    tiny = 1e-12
    dot = stats_t.mu.reshape(c, 1) * stats_s.mu.reshape(1, c) + stats_t.var.reshape(c, 1) * stats_s.var.reshape(1, c)
    norm_t = (stats_t.mu * stats_t.mu + stats_t.var * stats_t.var + tiny).sqrt()
    norm_s = (stats_s.mu * stats_s.mu + stats_s.var * stats_s.var + tiny).sqrt()
    energy = dot / (norm_t.reshape(c, 1) * norm_s.reshape(1, c)) - 1.0
    return energy, energy


MEASURES: Dict[str, Callable[[DomainStats, DomainStats], Tuple[Tensor, Tensor]]] = {
    "neg_l2": neg_l2,
    "neg_l1": neg_l1,
    "neg_cosine": neg_cosine,
}


# ----------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------


@dataclass
class GateParams:
    g_mu_s: Tensor
    g_var_s: Tensor
    g_mu_t: Tensor
    g_var_t: Tensor

    def as_dict(self) -> Dict[str, Tensor]:
        return {name: getattr(self, name) for name in GATE_NAMES}

    def snapshot(self) -> Dict[str, List[float]]:
        return {name: t.data.tolist() for name, t in self.as_dict().items()}


class CorrelationRecord(BaseModel):
    """JSON form of one CorrelationReport."""

    layer: int = 0
    rho_mu_ts: List[List[float]]
    rho_var_ts: List[List[float]]
    rho_mu_st: List[List[float]]
    rho_var_st: List[List[float]]
    cc_mu_s: List[float]
    cc_var_s: List[float]
    cc_mu_t: List[float]
    cc_var_t: List[float]
    gates: Dict[str, List[float]] = {}


@dataclass
class CorrelationReport:
    """Correlation matrices, compensatory statistics and gates captured from one forward pass."""

    rho_mu_ts: Tensor
    rho_var_ts: Tensor
    rho_mu_st: Tensor
    rho_var_st: Tensor
    cc_s: DomainStats
    cc_t: DomainStats
    gates: Dict[str, List[float]] = field(default_factory=dict)

    def record(self, layer: int = 0) -> CorrelationRecord:
        return CorrelationRecord(
            layer=layer,
            rho_mu_ts=self.rho_mu_ts.data.tolist(),
            rho_var_ts=self.rho_var_ts.data.tolist(),
            rho_mu_st=self.rho_mu_st.data.tolist(),
            rho_var_st=self.rho_var_st.data.tolist(),
            cc_mu_s=self.cc_s.mu.data.tolist(),
            cc_var_s=self.cc_s.var.data.tolist(),
            cc_mu_t=self.cc_t.mu.data.tolist(),
            cc_var_t=self.cc_t.var.data.tolist(),
            gates=self.gates,
        )


# ----------------------------------------------------------------------
# reciprocal compensation and aggregation
# ----------------------------------------------------------------------


def _compensate_block(stats_s: DomainStats, stats_t: DomainStats, measure: str) -> CorrelationReport:
    energy_mu, energy_var = MEASURES[measure](stats_s, stats_t)
    rho_mu_ts = softmax_rows(energy_mu)
    rho_var_ts = softmax_rows(energy_var)
    rho_mu_st = softmax_rows(energy_mu.T)
    rho_var_st = softmax_rows(energy_var.T)
    return CorrelationReport(
        rho_mu_ts=rho_mu_ts,
        rho_var_ts=rho_var_ts,
        rho_mu_st=rho_mu_st,
        rho_var_st=rho_var_st,
        cc_s=DomainStats(matvec(rho_mu_st, stats_t.mu), matvec(rho_var_st, stats_t.var)),
        cc_t=DomainStats(matvec(rho_mu_ts, stats_s.mu), matvec(rho_var_ts, stats_s.var)),
    )


def _block_diagonal(blocks: List[Tensor], channels: int) -> Tensor:
    out = np.zeros((channels, channels))
    start = 0
    for block in blocks:
        size = block.shape[0]
        out[start : start + size, start : start + size] = block.data
        start += size
    return Tensor(out)


def channel_groups(channels: int, group_size: int) -> List[Tuple[int, int]]:
    """Contiguous [start, stop) channel ranges of at most group_size."""
    if group_size < 1:
        raise InvalidInputError(f"group_size must be >= 1, got {group_size}")
    return [(start, min(start + group_size, channels)) for start in range(0, channels, group_size)]


def rc_compensate(
    stats_s: DomainStats,
    stats_t: DomainStats,
    measure: str = "neg_l2",
    group_size: int = DEFAULT_GROUP_SIZE,
) -> CorrelationReport:
    """
    Reciprocal compensation of two domains' channel statistics.

    E_{t->s}[i, j] = measure(z_t[i], z_s[j]) for z in {mu, var}; E_{s->t} is its
    transpose; every E is row-softmaxed into rho and the compensatory statistics
    are z_t,cc = rho_{t->s} z_s and z_s,cc = rho_{s->t} z_t. Above group_size
    channels the computation runs independently in contiguous channel groups and
    the reported rho matrices are block diagonal.
    """
    if stats_s.channels != stats_t.channels:
        raise InvalidInputError(f"channel mismatch: {stats_s.channels} vs {stats_t.channels}")
    if measure not in MEASURES:
        raise InvalidInputError(f"unknown correlation measure {measure!r}; choose from {sorted(MEASURES)}")

    groups = channel_groups(stats_s.channels, group_size)
    if len(groups) == 1:
        return _compensate_block(stats_s, stats_t, measure)

    parts = [
        _compensate_block(
            DomainStats(stats_s.mu[a:b], stats_s.var[a:b]),
            DomainStats(stats_t.mu[a:b], stats_t.var[a:b]),
            measure,
        )
        for a, b in groups
    ]
    c = stats_s.channels
    return CorrelationReport(
        rho_mu_ts=_block_diagonal([p.rho_mu_ts for p in parts], c),
        rho_var_ts=_block_diagonal([p.rho_var_ts for p in parts], c),
        rho_mu_st=_block_diagonal([p.rho_mu_st for p in parts], c),
        rho_var_st=_block_diagonal([p.rho_var_st for p in parts], c),
        cc_s=DomainStats(concat([p.cc_s.mu for p in parts]), concat([p.cc_s.var for p in parts])),
        cc_t=DomainStats(concat([p.cc_t.mu for p in parts]), concat([p.cc_t.var for p in parts])),
    )


def corresponding_exchange(stats_s: DomainStats, stats_t: DomainStats) -> CorrelationReport:
    """RC switched off: each channel is compensated by the same channel of the other domain."""
    eye = Tensor(np.eye(stats_s.channels))
    return CorrelationReport(
        rho_mu_ts=eye, rho_var_ts=eye, rho_mu_st=eye, rho_var_st=eye, cc_s=stats_t, cc_t=stats_s
    )


def ra_aggregate(stats: DomainStats, cc_mu: Tensor, cc_var: Tensor, g_mu: Tensor, g_var: Tensor) -> DomainStats:
    """Gated blend z~ = g * z + (1 - g) * z_cc (elementwise) for the mean and the variance."""
    c = stats.channels
    for name, t in (("cc_mu", cc_mu), ("cc_var", cc_var), ("g_mu", g_mu), ("g_var", g_var)):
        if t.shape != (c,):
            raise InvalidInputError(f"{name} has shape {t.shape}, expected ({c},)")
    return DomainStats(
        g_mu * stats.mu + (1.0 - g_mu) * cc_mu,
        g_var * stats.var + (1.0 - g_var) * cc_var,
    )


# ----------------------------------------------------------------------
# the layer
# ----------------------------------------------------------------------


class ReciprocalNorm(Normalizer):
    """
    Reciprocal Normalization.

    Options:
        measure: correlation measure, one of MEASURES (default neg_l2)
        group_size: channel group width for RC (default 512)
        use_rc: False replaces RC by corresponding-channel exchange
        fixed_gate: a constant in [0, 1] used for every gate instead of
            learnable gates
    """

    KIND = "rn"

    def __init__(self, channels: int, epsilon: float = 1e-5, alpha: float = 0.1, **options):
        options.setdefault("measure", "neg_l2")
        options.setdefault("group_size", DEFAULT_GROUP_SIZE)
        options.setdefault("use_rc", True)
        options.setdefault("fixed_gate", None)
        super().__init__(channels, epsilon, alpha, **options)
        if options["measure"] not in MEASURES:
            raise InvalidInputError(f"unknown correlation measure {options['measure']!r}")
        if int(options["group_size"]) < 1:
            raise InvalidInputError(f"group_size must be >= 1, got {options['group_size']}")

        fixed = options["fixed_gate"]
        if fixed is None:
            self.gates = GateParams(
                *(Parameter(np.ones(channels), name=name, bounds=GATE_BOUNDS, decay=False) for name in GATE_NAMES)
            )
        else:
            if not 0.0 <= float(fixed) <= 1.0:
                raise InvalidInputError(f"fixed gate must lie in [0, 1], got {fixed}")
            self.gates = GateParams(*(Tensor(np.full(channels, float(fixed))) for _ in GATE_NAMES))
        self.last_report: Optional[CorrelationReport] = None

    @property
    def measure(self) -> str:
        return self.options["measure"]

    @property
    def group_size(self) -> int:
        return int(self.options["group_size"])

    @property
    def learnable_gates(self) -> bool:
        return self.options["fixed_gate"] is None

    def parameters(self) -> List[Parameter]:
        params = [self.gamma, self.beta]
        if self.learnable_gates:
            params.extend(self.gates.as_dict().values())
        return params

    def compensate(self, stats_s: DomainStats, stats_t: DomainStats) -> CorrelationReport:
        if not self.options["use_rc"]:
            return corresponding_exchange(stats_s, stats_t)
        return rc_compensate(stats_s, stats_t, self.measure, self.group_size)

    def forward_train(self, x_s: Tensor, x_t: Tensor) -> Tuple[Tensor, Tensor]:
        xhat_s, xhat_t, _ = self.forward_train_report(x_s, x_t)
        return xhat_s, xhat_t

    def forward_train_report(self, x_s: Tensor, x_t: Tensor) -> Tuple[Tensor, Tensor, CorrelationReport]:
        """
        Training forward pass.

        1. per-domain batch moments
        2. reciprocal compensation across domains
        3. gated aggregation per domain
        4. separate standardization with the shared affine
        5. EMA of the aggregated statistics

        Returns:
            (normalized source, normalized target, CorrelationReport)
        """
        check_pair(x_s, x_t)
        stats_s = DomainStats.of(x_s)
        stats_t = DomainStats.of(x_t)
        report = self.compensate(stats_s, stats_t)

        g = self.gates
        agg_s = ra_aggregate(stats_s, report.cc_s.mu, report.cc_s.var, g.g_mu_s, g.g_var_s)
        agg_t = ra_aggregate(stats_t, report.cc_t.mu, report.cc_t.var, g.g_mu_t, g.g_var_t)

        xhat_s = standardize(x_s, agg_s, self.gamma, self.beta, self.epsilon)
        xhat_t = standardize(x_t, agg_t, self.gamma, self.beta, self.epsilon)

        self.running_s = ema_update(self.running_s, agg_s.detach(), self.alpha)
        self.running_t = ema_update(self.running_t, agg_t.detach(), self.alpha)

        report.gates = g.snapshot()
        self.last_report = report
        logger.debug("rn forward: C=%d mean gates %s", self.channels,
                     {k: round(float(np.mean(v)), 4) for k, v in report.gates.items()})
        return xhat_s, xhat_t, report

    def state(self) -> NormCheckpoint:
        checkpoint = super().state()
        checkpoint.gates = self.gates.snapshot()
        return checkpoint

    def load_state(self, checkpoint: NormCheckpoint) -> None:
        super().load_state(checkpoint)
        for name in GATE_NAMES:
            getattr(self.gates, name).data = np.array(checkpoint.gates[name], dtype=np.float64)


def rn_forward_train(layer: ReciprocalNorm, x_s: Tensor, x_t: Tensor) -> Tuple[Tensor, Tensor, CorrelationReport]:
    return layer.forward_train_report(x_s, x_t)


def rn_forward_eval(layer: ReciprocalNorm, x: Tensor, domain: str) -> Tensor:
    return layer.forward_eval(x, domain)
