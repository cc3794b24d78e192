"""Evaluation quantities: asymmetric loss, regret, coverage, safety count.

The loss is a piecewise-linear function of the oracle miscoverage
G*(tau): a mild slope lambda1 on the overcovering side
(G*(tau) <= 1 - alpha) and a steep slope lambda2 on the undercovering
side.  It is nonpositive, zero exactly at the target miscoverage, and
K-Lipschitz in G* with K = max(lambda1, lambda2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .cdf_band import NEG_INF, POS_INF


@dataclass(frozen=True)
class LossParams:
    lambda1: float = 0.1
    lambda2: float = 10.0
    alpha: float = 0.9

    def __post_init__(self):
        if not 0.0 < self.lambda1 < self.lambda2:
            raise ValueError(
                f"need 0 < lambda1 < lambda2, got ({self.lambda1}, {self.lambda2})"
            )
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0,1), got {self.alpha}")

    @property
    def lipschitz_k(self) -> float:
        return max(self.lambda1, self.lambda2)

    @property
    def phi_max(self) -> float:
        """sup |phi|: the worse of the two extreme miscoverage gaps."""
        return max(self.lambda1 * (1.0 - self.alpha), self.lambda2 * self.alpha)


def loss_phi(tau: float, gstar, params: LossParams) -> float:
    """Nonpositive loss of playing threshold tau against oracle CDF gstar.

    tau = -inf maps to miscoverage 0 (every label in the set); +inf to 1.
    """
    if tau == NEG_INF:
        g = 0.0
    elif tau == POS_INF:
        g = 1.0
    else:
        g = float(gstar(tau))
    gap = g - (1.0 - params.alpha)
    if gap <= 0.0:
        return -params.lambda1 * abs(gap)
    return -params.lambda2 * abs(gap)


def inst_regret(tau_t: float, tau_star: float, gstar, params: LossParams) -> float:
    """Per-round regret |phi(tau*) - phi(tau_t)|.

    Nonnegative by construction; equals phi(tau*) - phi(tau_t) whenever
    the oracle achieves the target miscoverage exactly.
    """
    return abs(loss_phi(tau_star, gstar, params) - loss_phi(tau_t, gstar, params))


@dataclass(frozen=True)
class RoundRecord:
    """Per-round trace entry."""

    t: int
    policy: str
    tau: float
    covered: bool
    inst_regret: float
    cum_regret: float
    undercover: bool
    set_size: int | None = None


def coverage_rate(records) -> float:
    if not records:
        raise ValueError("coverage_rate of an empty trace is undefined")
    return sum(1 for r in records if r.covered) / len(records)


def undercoverage_count(records) -> int:
    return sum(1 for r in records if r.undercover)


def regret_bound(horizon: int, k: float, phi_max: float) -> float:
    """Closed-form worst-case cumulative regret at the given horizon."""
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    log_t = math.log(horizon)
    return k * (2.0 * log_t + 4.0 * math.sqrt(horizon * log_t) + 1.0) + 4.0 * phi_max
