"""Held-out evaluation statistics and synthetic-market oracles.

Realized discounted returns are computed backward through the test
window and compared against model estimates: standardized errors,
percentile-count calibration, per-time curves across discount factors,
and the cross-gamma consistency residual that the backward recursion
satisfies identically. The synthetic generators provide reward streams
whose return distribution is known in closed form, which is what the
oracle-based training tests check against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BadParams, DegenerateSigma, LengthMismatch, WindowTooShort

# Flag (rather than divide by) estimate spreads below this.
SIGMA_FLOOR = 1e-8

# Truncation horizons keep the ignored tail below this weight.
TRUNCATION_TOL = 1e-3


def truncation_horizon(gamma: float, tol: float = TRUNCATION_TOL) -> int:
    """Smallest K with gamma^K <= tol (1 for gamma == 0)."""
    if not 0.0 <= gamma < 1.0:
        raise BadParams(f"gamma must be in [0, 1), got {gamma}")
    if gamma == 0.0:
        return 1
    return max(1, math.ceil(math.log(tol) / math.log(gamma)))


def realized_G(rewards: np.ndarray, gamma: float, horizon: int) -> np.ndarray:
    """Discounted forward sums by backward recursion.

    rewards[k] is the reward earned over (k, k+1). Only start indices
    with at least `horizon` future rewards are reported, so the returned
    array has len(rewards) - horizon + 1 entries; each uses the full
    remaining tail (seeded with zero past the window end).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    n = len(rewards)
    if n < horizon:
        raise WindowTooShort(f"window of {n} rewards cannot support horizon {horizon}")
    g = np.zeros(n + 1)
    for t in range(n - 1, -1, -1):
        g[t] = rewards[t] + gamma * g[t + 1]
    return g[: n - horizon + 1]


def indicator(price: float, estimate: float, reward_kind: str) -> float:
    """Price combined with an estimated return: price * e^G for log
    rewards, price * (1 + f) for cash rewards."""
    if price <= 0:
        raise BadParams(f"price must be positive, got {price}")
    if reward_kind == "log_return":
        return float(price * np.exp(estimate))
    if reward_kind == "cash_return":
        return float(price * (1.0 + estimate))
    raise ValueError(f"unknown reward kind {reward_kind!r}")


def z_statistic(g_hat: float, g_realized: float, sigma: float) -> float:
    if sigma <= SIGMA_FLOOR:
        raise DegenerateSigma(f"estimate spread {sigma} at or below floor {SIGMA_FLOOR}")
    return (g_hat - g_realized) / sigma


@dataclass
class CalibrationReport:
    percentiles: np.ndarray
    fractions: np.ndarray  # fraction of realizations at or below each percentile
    n_samples: int

    def __post_init__(self):
        if len(self.percentiles) != len(self.fractions):
            raise LengthMismatch("percentile grid and fractions differ in length")

    def max_abs_gap(self) -> float:
        return float(np.abs(self.fractions - self.percentiles).max())


def percentile_counts(
    cdf_values: np.ndarray,
    percentiles: np.ndarray | None = None,
) -> CalibrationReport:
    """Normalized counts of how often the realized value fell at or below
    each percentile of its estimated distribution.

    cdf_values[t] = F_t(realized_t), the estimated CDF evaluated at the
    realization. Perfect calibration puts a fraction q of them below q.
    """
    cdf_values = np.asarray(cdf_values, dtype=np.float64)
    if percentiles is None:
        percentiles = np.arange(0.05, 1.0001, 0.05)
    percentiles = np.asarray(percentiles, dtype=np.float64)
    fractions = (cdf_values[None, :] <= percentiles[:, None]).mean(axis=1)
    return CalibrationReport(percentiles, fractions, len(cdf_values))


def gamma_curve(gammas: np.ndarray, means: np.ndarray, stds: np.ndarray) -> list[tuple[float, float, float]]:
    """(gamma, mean, std) triples sorted by gamma, for one state."""
    if not (len(gammas) == len(means) == len(stds)):
        raise LengthMismatch("gamma curve inputs differ in length")
    order = np.argsort(gammas)
    return [(float(gammas[i]), float(means[i]), float(stds[i])) for i in order]


def gamma_consistency_residual(
    g_i: np.ndarray, g_j: np.ndarray, gamma_i: float, gamma_j: float
) -> np.ndarray:
    """Residual of the cross-gamma identity
    (G_i[t] - G_j[t]) - (gamma_i G_i[t+1] - gamma_j G_j[t+1]); identically
    zero (to FP) on realized returns, a diagnostic on model estimates."""
    g_i = np.asarray(g_i, dtype=np.float64)
    g_j = np.asarray(g_j, dtype=np.float64)
    if len(g_i) != len(g_j):
        raise LengthMismatch(f"series lengths differ: {len(g_i)} vs {len(g_j)}")
    return (g_i[:-1] - g_j[:-1]) - (gamma_i * g_i[1:] - gamma_j * g_j[1:])


# -- synthetic markets --------------------------------------------------------

IID_GAUSS = "iid_gauss"
TWO_STATE_MRP = "two_state_mrp"
CONSTANT = "constant"


@dataclass
class SyntheticMarket:
    kind: str
    mu: float = 0.0
    sigma: float = 0.01
    c: float = 0.01
    transition: np.ndarray | None = None  # row-stochastic, MRP kind
    state_rewards: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (IID_GAUSS, TWO_STATE_MRP, CONSTANT):
            raise BadParams(f"unknown synthetic market kind {self.kind!r}")
        if self.kind == IID_GAUSS and self.sigma < 0:
            raise BadParams(f"sigma must be nonnegative, got {self.sigma}")
        if self.kind == TWO_STATE_MRP:
            p = np.asarray(self.transition, dtype=np.float64)
            r = np.asarray(self.state_rewards, dtype=np.float64)
            if p.shape != (2, 2) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-12) or np.any(p < 0):
                raise BadParams("transition must be a 2x2 row-stochastic matrix")
            if r.shape != (2,):
                raise BadParams("state_rewards must have one entry per state")
            self.transition = p
            self.state_rewards = r


@dataclass
class SynthSeries:
    market: SyntheticMarket
    rewards: np.ndarray  # per-step
    prices: np.ndarray | None  # cumulative price path (None for MRP kind)
    states: np.ndarray | None  # visited state indices (MRP kind only)


def mrp_values(transition: np.ndarray, state_rewards: np.ndarray, gamma: float) -> np.ndarray:
    """Exact state values: solve (I - gamma P) V = R."""
    p = np.asarray(transition, dtype=np.float64)
    r = np.asarray(state_rewards, dtype=np.float64)
    return np.linalg.solve(np.eye(len(r)) - gamma * p, r)


def analytic_return(market: SyntheticMarket, gamma: float, horizon: int | None = None) -> dict:
    """Closed-form distribution of the discounted reward sum.

    iid_gauss: normal with mean mu/(1-gamma), std sigma/sqrt(1-gamma^2)
    (infinite horizon). constant: the K-truncated geometric sum and its
    infinite-horizon limit. two_state_mrp: per-state expected values.
    """
    if market.kind == IID_GAUSS:
        return {
            "kind": IID_GAUSS,
            "mean": market.mu / (1.0 - gamma),
            "std": market.sigma / math.sqrt(1.0 - gamma**2),
        }
    if market.kind == CONSTANT:
        out = {"kind": CONSTANT, "mean_infinite": market.c / (1.0 - gamma), "std": 0.0}
        if horizon is not None:
            out["mean_truncated"] = market.c * (1.0 - gamma**horizon) / (1.0 - gamma)
        return out
    values = mrp_values(market.transition, market.state_rewards, gamma)
    return {"kind": TWO_STATE_MRP, "values": [float(v) for v in values]}


def synth_generate(market: SyntheticMarket, length: int, rng: np.random.Generator | None = None) -> SynthSeries:
    """Sample a reward stream of the given length (reproducible from the
    market seed when no generator is passed)."""
    if length < 1:
        raise BadParams(f"length must be >= 1, got {length}")
    rng = rng if rng is not None else np.random.default_rng(market.seed)
    if market.kind == CONSTANT:
        rewards = np.full(length, market.c)
        prices = 100.0 * np.exp(np.concatenate([[0.0], np.cumsum(rewards)]))
        return SynthSeries(market, rewards, prices, None)
    if market.kind == IID_GAUSS:
        rewards = rng.normal(market.mu, market.sigma, size=length)
        prices = 100.0 * np.exp(np.concatenate([[0.0], np.cumsum(rewards)]))
        return SynthSeries(market, rewards, prices, None)
    states = np.empty(length + 1, dtype=np.int64)
    states[0] = 0
    cum = np.cumsum(market.transition, axis=1)
    draws = rng.uniform(size=length)
    for k in range(length):
        states[k + 1] = np.searchsorted(cum[states[k]], draws[k], side="right")
    rewards = market.state_rewards[states[:-1]]
    return SynthSeries(market, rewards, None, states)
