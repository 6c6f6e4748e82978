"""Renyi-DP accounting for Poisson-subsampled Gaussian mechanisms."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import CalibrationError, ConfigError, ContractError

DEFAULT_ORDERS = (1.25, 1.5, 1.75, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0)

# Noise entries per step, as (multiplier relative to the searched sigma, releases per step).
DPSGD_ENTRIES = ((1.0, 1),)
DPSGDS_ENTRIES = ((10.0, 2), (1.0, 1))


def _rdp_int(q: float, sigma: float, alpha: int) -> float:
    i = np.arange(alpha + 1, dtype=np.float64)
    log_terms = (
        gammaln(alpha + 1)
        - gammaln(i + 1)
        - gammaln(alpha - i + 1)
        + i * math.log(q)
        + (alpha - i) * math.log1p(-q)
        + (i * i - i) / (2.0 * sigma * sigma)
    )
    return float(logsumexp(log_terms)) / (alpha - 1)


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: float) -> float:
    """RDP of one release with sampling rate ``q`` and noise multiplier ``sigma``.

    Integer orders use the binomial expansion of the moment. A fractional
    order is charged the larger value of its two integer neighbours (orders
    below 2 fall back to order 2), capped by the full-batch Gaussian value
    alpha / (2 sigma^2), which bounds the subsampled one at every order.
    """
    if alpha <= 1:
        raise ContractError(f"RDP order must exceed 1, got {alpha}")
    if not 0.0 <= q <= 1.0:
        raise ContractError(f"sampling rate must lie in [0, 1], got {q}")
    if sigma < 0:
        raise ContractError("noise multiplier must be nonnegative")
    if q == 0.0:
        return 0.0
    if sigma == 0.0:
        return math.inf
    if q == 1.0:
        return alpha / (2.0 * sigma * sigma)
    if float(alpha).is_integer():
        return _rdp_int(q, sigma, int(alpha))
    neighbours = {max(2, math.floor(alpha)), max(2, math.ceil(alpha))}
    return min(max(_rdp_int(q, sigma, a) for a in neighbours), alpha / (2.0 * sigma * sigma))


@dataclass(frozen=True)
class PrivacyLedger:
    q: float
    orders: tuple = DEFAULT_ORDERS
    rdp: tuple = ()
    steps: int = 0
    sigma_entries: tuple = ()
    delta: float = 1e-5

    def __post_init__(self):
        if not self.rdp:
            object.__setattr__(self, "rdp", tuple(0.0 for _ in self.orders))
        if len(self.rdp) != len(self.orders):
            raise ContractError("rdp and orders differ in length")

    @property
    def epsilon(self) -> float:
        return to_eps_delta(self, self.delta)

    def to_dict(self) -> dict:
        eps, order = eps_and_order(self, self.delta)
        return {
            "q": self.q,
            "orders": list(self.orders),
            "rdp": list(self.rdp),
            "steps": self.steps,
            "sigma_entries": [list(e) for e in self.sigma_entries],
            "delta": self.delta,
            "epsilon": eps,
            "optimal_order": order,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PrivacyLedger":
        return cls(
            d["q"],
            tuple(d["orders"]),
            tuple(d["rdp"]),
            d["steps"],
            tuple(tuple(e) for e in d["sigma_entries"]),
            d["delta"],
        )


def compose(ledger: PrivacyLedger, steps: int, entries) -> PrivacyLedger:
    """Add ``steps`` iterations, each releasing every (sigma, count) entry."""
    if steps < 0:
        raise ContractError("steps must be nonnegative")
    entries = tuple((float(s), int(c)) for s, c in entries)
    if steps == 0:
        return ledger
    per_step = [
        sum(c * rdp_subsampled_gaussian(ledger.q, s, a) for s, c in entries if c) for a in ledger.orders
    ]
    rdp = tuple(r + steps * p for r, p in zip(ledger.rdp, per_step))
    history = ledger.sigma_entries + tuple((s, c, steps) for s, c in entries)
    return replace(ledger, rdp=rdp, steps=ledger.steps + steps, sigma_entries=history)


def eps_and_order(ledger: PrivacyLedger, delta: float) -> tuple[float, float | None]:
    if not 0.0 < delta < 1.0:
        raise ContractError("delta must lie in (0, 1)")
    if not ledger.orders:
        raise ConfigError("empty RDP order grid")
    log_inv = math.log(1.0 / delta)
    best, best_order = math.inf, None
    for a, r in zip(ledger.orders, ledger.rdp):
        eps = r + log_inv / (a - 1.0)
        if eps < best:
            best, best_order = eps, a
    return best, best_order


def to_eps_delta(ledger: PrivacyLedger, delta: float) -> float:
    """Standard conversion: epsilon = min over orders of rdp + ln(1/delta) / (alpha - 1)."""
    return eps_and_order(ledger, delta)[0]


def epsilon_for(sigma: float, delta: float, q: float, steps: int, entries_shape=DPSGD_ENTRIES, orders=DEFAULT_ORDERS) -> float:
    entries = [(mult * sigma, count) for mult, count in entries_shape]
    return to_eps_delta(compose(PrivacyLedger(q, tuple(orders)), steps, entries), delta)


def calibrate_sigma(
    target_eps: float,
    delta: float,
    q: float,
    steps: int,
    entries_shape=DPSGD_ENTRIES,
    orders=DEFAULT_ORDERS,
    bracket=(0.3, 100.0),
    tol: float = 1e-3,
) -> float:
    """Smallest base sigma in ``bracket`` (to ``tol``) whose composed epsilon is <= target.

    The other noise multipliers are fixed multiples of the base one, as
    given by ``entries_shape``; for DP-SGD-S the base is the gradient noise
    and the clipping statistics use ten times it.
    """
    if target_eps <= 0:
        raise ConfigError("target epsilon must be positive")

    def eps(s):
        return epsilon_for(s, delta, q, steps, entries_shape, orders)

    lo, hi = bracket
    eps_lo, eps_hi = eps(lo), eps(hi)
    if eps_hi > target_eps:
        raise CalibrationError(
            f"target epsilon {target_eps} unreachable: achievable range is [{eps_hi:.4g}, {eps_lo:.4g}]",
            (eps_hi, eps_lo),
        )
    if eps_lo <= target_eps:
        return lo
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if eps(mid) <= target_eps:
            hi = mid
        else:
            lo = mid
    return hi
