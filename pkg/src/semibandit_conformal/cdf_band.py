"""Truncated empirical CDF with a DKW upper confidence band.

The estimator records one value per round: the true score when it was
observed, or the round's threshold when it was not (so all the mass below
the threshold piles up at the threshold itself).  On top of the resulting
step-function CDF it answers the banded cutoff query

    sup{ tau : G_t(tau) + eps_t <= 1 - alpha },

which is the quantity the threshold policies need each round.
"""

from __future__ import annotations

import csv
import math
from bisect import bisect_right, insort
from dataclasses import dataclass

NEG_INF = float("-inf")
POS_INF = float("inf")

# Admission tolerance for quantile levels: boundary ties like ecdf = 1 - alpha
# are part of the admissible set, but 1 - alpha is often not exactly
# representable (1 - 0.9 != 0.1 in binary).  Comparisons admit k/t whenever
# k/t <= level + LEVEL_TOL so decimal-stated levels behave as written.
LEVEL_TOL = 1e-9


def band_epsilon(delta: float, t: int) -> float:
    """DKW band half-width sqrt(log(2/delta) / (2t)), natural log."""
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must be in (0,1), got {delta}")
    if t < 1:
        raise ValueError(f"sample count must be >= 1, got {t}")
    return math.sqrt(math.log(2.0 / delta) / (2.0 * t))


@dataclass(frozen=True)
class BandParams:
    """Failure probability and the derived per-count band width."""

    delta: float

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must be in (0,1), got {self.delta}")

    @classmethod
    def for_horizon(cls, horizon: int) -> "BandParams":
        """delta = 2/T^2, so a union bound over T rounds gives 2/T."""
        if horizon < 2:
            raise ValueError(f"horizon must be >= 2, got {horizon}")
        return cls(delta=2.0 / (horizon * horizon))

    def epsilon(self, t: int) -> float:
        return band_epsilon(self.delta, t)


def sup_quantile(sorted_values, level: float) -> float:
    """sup{ tau : ecdf(tau) <= level } over an already-sorted sample.

    Returns -inf when no tau is admissible (level < 0) and +inf when all
    are (level >= 1).  Otherwise the sup is the (m+1)-th order statistic
    with m the largest integer such that m/n <= level; the admissible set
    is the open interval below that value.

    The adjustment loops keep the index consistent with exact k/n
    comparisons, so results agree bit-for-bit with a scan that evaluates
    the ECDF directly.
    """
    n = len(sorted_values)
    if n == 0:
        raise ValueError("sup_quantile of an empty sample is undefined")
    if level < -LEVEL_TOL:
        return NEG_INF
    if level >= 1.0:
        return POS_INF
    m = min(max(int(math.floor(n * level)), 0), n - 1)
    while m + 1 < n and (m + 1) / n <= level + LEVEL_TOL:
        m += 1
    while m > 0 and m / n > level + LEVEL_TOL:
        m -= 1
    return sorted_values[m]


class TruncatedEcdf:
    """Sorted multiset of recorded scores plus the DKW band.

    Values are truncated at recording time (a missed round records the
    round's threshold); queries never re-truncate.  For the nondecreasing
    threshold sequences produced by the banded policy the cutoff query is
    unaffected, because truncated entries sit strictly below where the
    query can land.
    """

    def __init__(self, horizon: int):
        if not isinstance(horizon, int) or horizon < 2:
            raise ValueError(f"horizon must be an integer >= 2, got {horizon!r}")
        self.horizon = horizon
        self.band = BandParams.for_horizon(horizon)
        self._samples: list[float] = []

    @property
    def count(self) -> int:
        return len(self._samples)

    @property
    def samples(self) -> list[float]:
        """The recorded values in nondecreasing order (do not mutate)."""
        return self._samples

    def insert(self, value: float) -> None:
        value = float(value)
        if not math.isfinite(value):
            raise ValueError(f"recorded score must be finite, got {value}")
        insort(self._samples, value)

    def epsilon(self) -> float:
        """Band half-width at the current count."""
        self._require_samples()
        return self.band.epsilon(self.count)

    def eval_g(self, tau: float) -> float:
        """Fraction of recorded values <= tau (right-continuous step)."""
        self._require_samples()
        return bisect_right(self._samples, tau) / self.count

    def eval_upper(self, tau: float) -> float:
        """eval_g(tau) + eps_t; may exceed 1."""
        return self.eval_g(tau) + self.epsilon()

    def conformal_cutoff(self, alpha: float, epsilon: float | None = None) -> float:
        """Largest tau whose banded miscoverage estimate stays <= 1-alpha.

        `epsilon` overrides the DKW width (0.0 gives the plain empirical
        sup-quantile).  Returns -inf when the band is wider than the
        remaining budget; the sentinels never enter the sample multiset.
        """
        self._require_samples()
        if not 0.0 < alpha < 1.0:
            raise ValueError(f"alpha must be in (0,1), got {alpha}")
        eps = self.epsilon() if epsilon is None else float(epsilon)
        if eps < 0.0:
            raise ValueError(f"epsilon must be >= 0, got {eps}")
        level = 1.0 - alpha - eps
        if level < -LEVEL_TOL:
            return NEG_INF
        cutoff = sup_quantile(self._samples, level)
        # level < 1 here, so the +inf branch of sup_quantile is unreachable
        assert cutoff is not POS_INF
        return cutoff

    def dump_csv(self, path) -> None:
        """Debug dump: (t, delta, epsilon_t) then the sorted samples."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["key", "value"])
            writer.writerow(["t", self.count])
            writer.writerow(["delta", repr(self.band.delta)])
            eps = repr(self.epsilon()) if self.count else ""
            writer.writerow(["epsilon_t", eps])
            for i, v in enumerate(self._samples):
                writer.writerow([f"sample_{i}", repr(v)])

    def _require_samples(self) -> None:
        if not self._samples:
            raise ValueError("CDF query on an empty sample")
