"""Fixed-support categorical distributions over discounted returns.

A distribution lives on N equally spaced atoms between v_min and v_max.
Bootstrap targets are shifted/scaled copies of a next-step distribution,
mapped back onto the fixed atoms by splitting each atom's mass linearly
between its two nearest neighbours ("projection"). The worth-scaled
variant supports cash rewards, where the model learns the value of one
unit of worth and the projection rescales by the realized worth ratio.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BadBounds, NonPositiveWorth

# Predicted probabilities are clamped at this floor inside the log; keeps
# the cross-entropy finite when a head assigns (numerically) zero mass.
EPS_LOG = 1e-12


@dataclass(frozen=True)
class SupportGrid:
    """Equally spaced atom locations on [v_min, v_max]."""

    v_min: float
    v_max: float
    n_atoms: int
    atoms: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.v_min < self.v_max:
            raise BadBounds(f"v_min={self.v_min} must be < v_max={self.v_max}")
        if self.n_atoms < 2:
            raise BadBounds(f"n_atoms={self.n_atoms} must be >= 2")
        # linspace pins both endpoints exactly, so atoms[0] == v_min and
        # atoms[-1] == v_max hold bitwise.
        atoms = np.linspace(self.v_min, self.v_max, self.n_atoms)
        object.__setattr__(self, "atoms", atoms)

    @property
    def delta_z(self) -> float:
        return (self.v_max - self.v_min) / (self.n_atoms - 1)


@dataclass
class CategoricalDist:
    """Probability vector over a support grid."""

    grid: SupportGrid
    p: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        if self.p.shape != (self.grid.n_atoms,):
            raise BadBounds(f"probability vector has shape {self.p.shape}, expected ({self.grid.n_atoms},)")
        if np.any(self.p < 0) or abs(self.p.sum() - 1.0) > 1e-6:
            raise BadBounds("probabilities must be nonnegative and sum to 1 within 1e-6")


def make_grid(v_min: float, v_max: float, n_atoms: int) -> SupportGrid:
    return SupportGrid(v_min, v_max, n_atoms)


def _project_targets(grid: SupportGrid, probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Distribute each atom's mass onto the grid at the target locations.

    probs, targets: (..., n_atoms). Targets are clipped to the support,
    then each mass p_j is split between the bracketing atoms proportional
    to proximity. Exact-integer offsets land wholly on that atom, which
    keeps total mass conserved instead of silently dropping it.
    """
    n = grid.n_atoms
    clipped = np.clip(targets, grid.v_min, grid.v_max)
    # offset in atom units; clamp absorbs FP overshoot from the clip
    offset = np.clip((clipped - grid.v_min) / grid.delta_z, 0.0, n - 1)
    lower = np.floor(offset).astype(np.int64)
    upper = np.ceil(offset).astype(np.int64)
    on_atom = lower == upper
    w_lower = np.where(on_atom, 1.0, upper - offset)
    w_upper = offset - lower

    flat_probs = probs.reshape(-1, n)
    flat_lower = lower.reshape(-1, n)
    flat_upper = upper.reshape(-1, n)
    rows = np.repeat(np.arange(flat_probs.shape[0]), n)
    out = np.zeros_like(flat_probs)
    np.add.at(out, (rows, flat_lower.ravel()), (flat_probs * w_lower.reshape(-1, n)).ravel())
    np.add.at(out, (rows, flat_upper.ravel()), (flat_probs * w_upper.reshape(-1, n)).ravel())
    return out.reshape(probs.shape)


def project_batch(grid: SupportGrid, probs: np.ndarray, rewards: np.ndarray, gamma) -> np.ndarray:
    """Vectorized bootstrap projection: targets are r + gamma * z_j.

    probs: (..., n_atoms); rewards: broadcastable to probs[..., 0];
    gamma: scalar or broadcastable like rewards.
    """
    probs = np.asarray(probs, dtype=np.float64)
    rewards = np.asarray(rewards, dtype=np.float64)[..., None]
    gamma = np.asarray(gamma, dtype=np.float64)[..., None] if np.ndim(gamma) else gamma
    targets = rewards + gamma * grid.atoms
    return _project_targets(grid, probs, np.broadcast_to(targets, probs.shape))


def project_worth_batch(
    grid: SupportGrid,
    probs: np.ndarray,
    rewards: np.ndarray,
    w_t: np.ndarray,
    w_next: np.ndarray,
    gamma,
) -> np.ndarray:
    """Worth-scaled projection: targets are r/w_t + gamma * (w_next/w_t) * z_j."""
    w_t = np.asarray(w_t, dtype=np.float64)
    w_next = np.asarray(w_next, dtype=np.float64)
    if np.any(w_t <= 0) or np.any(w_next <= 0):
        raise NonPositiveWorth("worths must be positive for the scaled projection")
    probs = np.asarray(probs, dtype=np.float64)
    rewards = np.asarray(rewards, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    targets = (rewards / w_t)[..., None] + (gamma * w_next / w_t)[..., None] * grid.atoms
    return _project_targets(grid, probs, np.broadcast_to(targets, probs.shape))


def project(next_p: CategoricalDist, r: float, gamma: float) -> np.ndarray:
    """Member vector of the projected bootstrap target for one distribution."""
    return project_batch(next_p.grid, next_p.p, np.float64(r), float(gamma))


def project_worth(next_p: CategoricalDist, r: float, w_t: float, w_next: float, gamma: float) -> np.ndarray:
    return project_worth_batch(
        next_p.grid, next_p.p, np.float64(r), np.float64(w_t), np.float64(w_next), float(gamma)
    )


def mean(d: CategoricalDist) -> float:
    return float(d.p @ d.grid.atoms)


def variance(d: CategoricalDist) -> float:
    mu = d.p @ d.grid.atoms
    return float(d.p @ (d.grid.atoms - mu) ** 2)


def std(d: CategoricalDist) -> float:
    return float(np.sqrt(variance(d)))


def mean_batch(grid: SupportGrid, probs: np.ndarray) -> np.ndarray:
    return np.asarray(probs) @ grid.atoms


def std_batch(grid: SupportGrid, probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs)
    mu = probs @ grid.atoms
    second = probs @ grid.atoms**2
    return np.sqrt(np.maximum(second - mu**2, 0.0))


def cross_entropy(m: np.ndarray, p: np.ndarray) -> float:
    """-sum(m_i * log p_i), with p clamped at EPS_LOG below."""
    m = np.asarray(m, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    return float(-(m * np.log(np.maximum(p, EPS_LOG))).sum())


def cross_entropy_batch(m: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Row-wise cross entropy over the trailing atom axis."""
    return -(np.asarray(m) * np.log(np.maximum(np.asarray(p), EPS_LOG))).sum(axis=-1)


def cdf_percentile(d: CategoricalDist, x: float, convention: str = "step") -> float:
    """P(Z <= x) for the categorical distribution.

    "step" treats each atom as a point mass (right-continuous CDF, the
    default used by the calibration statistics). "interp" interpolates
    linearly between the atom cumulative values, with F(x) = 0 below the
    first atom and 1 above the last.
    """
    atoms = d.grid.atoms
    if convention == "step":
        return float(d.p[atoms <= x].sum())
    if convention == "interp":
        cum = np.cumsum(d.p)
        if x < atoms[0]:
            return 0.0
        if x >= atoms[-1]:
            return 1.0
        i = int(np.searchsorted(atoms, x, side="right")) - 1
        frac = (x - atoms[i]) / d.grid.delta_z
        nxt = cum[i + 1]
        return float(cum[i] + frac * (nxt - cum[i]))
    raise ValueError(f"unknown cdf convention {convention!r}")


def cdf_percentile_batch(grid: SupportGrid, probs: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Step-convention CDF evaluated rowwise: probs (B, N), xs (B,)."""
    probs = np.asarray(probs, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    cum = np.cumsum(probs, axis=-1)
    idx = np.searchsorted(grid.atoms, xs, side="right")
    out = np.zeros(len(xs))
    has_mass = idx > 0
    out[has_mass] = cum[np.arange(len(xs))[has_mass], idx[has_mass] - 1]
    return out
