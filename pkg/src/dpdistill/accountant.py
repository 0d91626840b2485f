"""Renyi-DP accounting for the subsampled Gaussian mechanism.

Per-step Renyi divergences are computed with numerically stable log-domain
series (integer and fractional orders), composed additively over steps, and
converted to (epsilon, delta) with the tight refinement of the standard
RDP conversion. A bisection calibrates the noise multiplier to land just
under a target budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import binom, gammaln, log_ndtr

from .errors import CalibrationError, NumericalError

DEFAULT_ORDERS = (
    1.25, 1.5, 1.75, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0
)

_CALIBRATION_BRACKET = (0.3, 50.0)
_CALIBRATION_TOL = 1e-3
_CALIBRATION_SLACK = 0.99


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")

    @classmethod
    def for_dataset(cls, epsilon: float, n_records: int) -> "PrivacyBudget":
        """Budget with the conventional default delta = 1/N."""
        return cls(epsilon=epsilon, delta=1.0 / n_records)


def _log_add(a: float, b: float) -> float:
    return float(np.logaddexp(a, b))


def _log_sub(a: float, b: float) -> float:
    """log(exp(a) - exp(b)) for a >= b."""
    if b == -np.inf:
        return a
    if a < b:
        raise NumericalError("negative value in log-space subtraction")
    if a == b:
        return -np.inf
    return a + math.log1p(-math.exp(b - a))


def _log_erfc(x: float) -> float:
    return math.log(2.0) + float(log_ndtr(-x * math.sqrt(2.0)))


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    """log A_alpha for integer order via the binomial expansion."""
    i = np.arange(alpha + 1, dtype=np.float64)
    log_coef = gammaln(alpha + 1) - gammaln(i + 1) - gammaln(alpha - i + 1)
    terms = (
        log_coef
        + i * math.log(q)
        + (alpha - i) * math.log1p(-q)
        + (i * i - i) / (2.0 * sigma**2)
    )
    m = terms.max()
    return float(m + np.log(np.exp(terms - m).sum()))


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    """log A_alpha for fractional order via the split two-part series."""
    log_a0, log_a1 = -np.inf, -np.inf
    z0 = sigma**2 * math.log(1.0 / q - 1.0) + 0.5
    i = 0
    while True:
        coef = binom(alpha, i)
        log_coef = math.log(abs(coef))
        j = alpha - i

        log_t0 = log_coef + i * math.log(q) + j * math.log1p(-q)
        log_t1 = log_coef + j * math.log(q) + i * math.log1p(-q)

        log_e0 = math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2.0) * sigma))
        log_e1 = math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2.0) * sigma))

        log_s0 = log_t0 + (i * i - i) / (2.0 * sigma**2) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2.0 * sigma**2) + log_e1

        if coef > 0:
            log_a0 = _log_add(log_a0, log_s0)
            log_a1 = _log_add(log_a1, log_s1)
        else:
            log_a0 = _log_sub(log_a0, log_s0)
            log_a1 = _log_sub(log_a1, log_s1)

        i += 1
        if max(log_s0, log_s1) < -30 and i > alpha:
            break
    return _log_add(log_a0, log_a1)


def rdp_step(q: float, sigma: float, orders=DEFAULT_ORDERS) -> np.ndarray:
    """Per-order RDP of one subsampled Gaussian step (sampling rate q)."""
    if not 0 < q <= 1:
        raise ValueError(f"sampling rate q must lie in (0, 1], got {q}")
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    orders = np.asarray(orders, dtype=np.float64)
    if np.any(orders <= 1):
        raise ValueError("all RDP orders must exceed 1")
    if sigma == 0:
        return np.full(orders.shape, np.inf)
    if q == 1.0:
        return orders / (2.0 * sigma**2)
    out = np.empty(orders.shape)
    for idx, alpha in enumerate(orders):
        if float(alpha).is_integer():
            log_a = _log_a_int(q, sigma, int(alpha))
        else:
            log_a = _log_a_frac(q, sigma, float(alpha))
        out[idx] = log_a / (alpha - 1.0)
    return out


@dataclass
class PrivacyLedger:
    """Additive per-order RDP accumulator against a target budget."""

    target: PrivacyBudget
    orders: tuple[float, ...] = DEFAULT_ORDERS
    accumulated_rdp: np.ndarray = field(default=None)
    steps_recorded: int = 0

    def __post_init__(self):
        if any(a <= 1 for a in self.orders):
            raise ValueError("all RDP orders must exceed 1")
        if self.accumulated_rdp is None:
            self.accumulated_rdp = np.zeros(len(self.orders))

    def to_json(self) -> dict:
        return {
            "target": {"epsilon": self.target.epsilon, "delta": self.target.delta},
            "orders": list(self.orders),
            "accumulated_rdp": [float(r) for r in self.accumulated_rdp],
            "steps_recorded": self.steps_recorded,
            "spent_epsilon": self.spent_epsilon(),
        }

    def spent_epsilon(self, delta: float | None = None) -> float:
        if self.steps_recorded == 0:
            return 0.0
        eps, _ = epsilon_at(self, delta)
        return eps


def compose(ledger: PrivacyLedger, step_rdp: np.ndarray, n_steps: int) -> PrivacyLedger:
    """Accumulate n_steps of the given per-order RDP into the ledger."""
    step_rdp = np.asarray(step_rdp, dtype=np.float64)
    if step_rdp.shape != (len(ledger.orders),):
        raise ValueError(
            f"order grid mismatch: ledger has {len(ledger.orders)} orders, "
            f"step has {step_rdp.shape}"
        )
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    ledger.accumulated_rdp = ledger.accumulated_rdp + n_steps * step_rdp
    ledger.steps_recorded += n_steps
    return ledger


def epsilon_from_rdp(orders, rdp, delta: float) -> tuple[float, float]:
    """Tight RDP -> (epsilon, delta) conversion; returns (epsilon, best order)."""
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    orders = np.asarray(orders, dtype=np.float64)
    rdp = np.asarray(rdp, dtype=np.float64)
    best_eps, best_order = np.inf, orders[-1]
    for alpha, r in zip(orders, rdp):
        if not np.isfinite(r):
            continue
        eps = r + math.log1p(-1.0 / alpha) - (math.log(delta) + math.log(alpha)) / (
            alpha - 1.0
        )
        if eps < best_eps:
            best_eps, best_order = eps, alpha
    if not np.isfinite(best_eps):
        return np.inf, float(best_order)
    return max(best_eps, 0.0), float(best_order)


def classical_epsilon_from_rdp(orders, rdp, delta: float) -> float:
    """Classical conversion epsilon = r + log(1/delta)/(alpha-1); upper bound."""
    orders = np.asarray(orders, dtype=np.float64)
    rdp = np.asarray(rdp, dtype=np.float64)
    eps = rdp + math.log(1.0 / delta) / (orders - 1.0)
    return float(np.min(eps))


def epsilon_at(ledger: PrivacyLedger, delta: float | None = None) -> tuple[float, float]:
    """Spent (epsilon, minimizing order) at the given delta."""
    if ledger.steps_recorded == 0:
        raise ValueError("ledger has no recorded steps")
    if delta is None:
        delta = ledger.target.delta
    return epsilon_from_rdp(ledger.orders, ledger.accumulated_rdp, delta)


def calibrate_sigma(
    target: PrivacyBudget,
    q: float,
    n_steps: int,
    orders=DEFAULT_ORDERS,
) -> float:
    """Smallest bracketed noise multiplier whose spent epsilon lands in
    [0.99 * target, target]."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")

    def eps_of(sigma: float) -> float:
        rdp = rdp_step(q, sigma, orders) * n_steps
        eps, _ = epsilon_from_rdp(orders, rdp, target.delta)
        return eps

    lo, hi = _CALIBRATION_BRACKET
    if eps_of(hi) > target.epsilon:
        raise CalibrationError(
            f"target epsilon {target.epsilon} unreachable: sigma={hi} still spends "
            f"{eps_of(hi):.4g}"
        )
    if eps_of(lo) < _CALIBRATION_SLACK * target.epsilon:
        raise CalibrationError(
            f"target epsilon {target.epsilon} unreachable: sigma={lo} spends only "
            f"{eps_of(lo):.4g}"
        )
    while (hi - lo) > _CALIBRATION_TOL or eps_of(hi) < _CALIBRATION_SLACK * target.epsilon:
        if (hi - lo) < 1e-12:
            raise CalibrationError(
                "bisection collapsed without landing in the 1% target window"
            )
        mid = 0.5 * (lo + hi)
        if eps_of(mid) > target.epsilon:
            lo = mid
        else:
            hi = mid
    return hi
