"""Prioritized transition storage with proportional sampling.

Transitions enter a FIFO ring at the running maximum priority. Sampling
draws i.i.d. (with replacement) proportional to priority^alpha via a
binary sum tree; each draw carries an importance weight
(n * P(i))^-beta, max-normalized inside the batch. The alpha/beta
exponents follow a linear schedule over learning steps; changing alpha
rebuilds the tree leaves from the stored raw priorities.

Not thread-safe: a single owner must drive push/sample/update/anneal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadIndex, NotEnoughSamples


@dataclass
class AnnealSchedule:
    alpha0: float = 0.75
    beta0: float = 0.25
    alpha_end: float = 0.0
    beta_end: float = 1.0
    steps: int = 20_000

    def at(self, step: int) -> tuple[float, float]:
        frac = min(max(step, 0) / self.steps, 1.0)
        alpha = self.alpha0 + frac * (self.alpha_end - self.alpha0)
        beta = self.beta0 + frac * (self.beta_end - self.beta0)
        return alpha, beta


@dataclass
class SampledBatch:
    transitions: list
    ids: np.ndarray  # global transition ids (stable across eviction)
    slots: np.ndarray  # ring positions at sampling time
    probabilities: np.ndarray
    weights: np.ndarray  # max-normalized importance weights


class PrioBuffer:
    def __init__(
        self,
        capacity: int,
        alpha: float = 0.75,
        beta: float = 0.25,
        eps_prio: float = 1e-6,
        rng: np.random.Generator | None = None,
        schedule: AnnealSchedule | None = None,
    ):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.alpha = alpha
        self.beta = beta
        self.eps_prio = eps_prio
        self.rng = rng if rng is not None else np.random.default_rng()
        self.schedule = schedule or AnnealSchedule(alpha0=alpha, beta0=beta)
        self.p_max = 1.0  # max raw priority ever seen, never decayed

        self._leaf_base = 1
        while self._leaf_base < capacity:
            self._leaf_base *= 2
        self._tree = np.zeros(2 * self._leaf_base)
        self._raw = np.zeros(capacity)  # raw priorities per slot
        self._store: list = [None] * capacity
        self._count = 0  # total pushes ever

    @property
    def size(self) -> int:
        return min(self._count, self.capacity)

    def __len__(self) -> int:
        return self.size

    @property
    def tree_total(self) -> float:
        return float(self._tree[1])

    # -- internal tree ops ---------------------------------------------------

    def _set_leaf(self, slot: int, value: float) -> None:
        i = self._leaf_base + slot
        self._tree[i] = value
        i //= 2
        while i >= 1:
            self._tree[i] = self._tree[2 * i] + self._tree[2 * i + 1]
            i //= 2

    def _rebuild(self) -> None:
        leaves = np.zeros(self._leaf_base)
        n = self.size
        leaves[:n] = self._raw[:n] ** self.alpha
        self._tree[self._leaf_base :] = leaves
        level = self._leaf_base // 2
        while level >= 1:
            lo = level
            hi = 2 * level
            self._tree[lo:hi] = self._tree[2 * lo : 2 * hi : 2] + self._tree[2 * lo + 1 : 2 * hi : 2]
            level //= 2

    def _descend(self, targets: np.ndarray) -> np.ndarray:
        idx = np.ones(len(targets), dtype=np.int64)
        t = targets.copy()
        while idx[0] < self._leaf_base:
            left = 2 * idx
            left_sum = self._tree[left]
            go_right = t > left_sum
            t -= np.where(go_right, left_sum, 0.0)
            idx = np.where(go_right, left + 1, left)
        return idx - self._leaf_base

    # -- public surface -------------------------------------------------------

    def push(self, transition) -> int:
        """Store at the running max priority; evicts the oldest at capacity.
        Returns the global transition id."""
        slot = self._count % self.capacity
        self._store[slot] = transition
        self._raw[slot] = self.p_max
        self._set_leaf(slot, self.p_max**self.alpha)
        tid = self._count
        self._count += 1
        return tid

    def _slot_of(self, tid: int) -> int:
        if tid < 0 or tid >= self._count or tid < self._count - self.capacity:
            raise BadIndex(f"transition id {tid} is not in the buffer (evicted or never stored)")
        return tid % self.capacity

    def sample(self, n_batch: int) -> SampledBatch:
        if self.size < n_batch:
            raise NotEnoughSamples(f"buffer holds {self.size} < batch {n_batch}")
        total = self.tree_total
        draws = self.rng.uniform(0.0, total, size=n_batch)
        slots = self._descend(draws)
        # guard against landing on a zero-width leaf from FP rounding
        slots = np.minimum(slots, self.size - 1)
        probs = self._tree[self._leaf_base + slots] / total
        weights = (self.size * probs) ** (-self.beta)
        weights = weights / weights.max()
        ids = self._ids_for_slots(slots)
        return SampledBatch(
            transitions=[self._store[s] for s in slots],
            ids=ids,
            slots=slots,
            probabilities=probs,
            weights=weights,
        )

    def _ids_for_slots(self, slots: np.ndarray) -> np.ndarray:
        # the live ids are [count - size, count); each slot holds exactly one
        oldest = self._count - self.size
        return oldest + (slots - (oldest % self.capacity)) % self.capacity

    def update_priorities(self, ids: np.ndarray, losses: np.ndarray) -> None:
        """Set priority = loss + eps for each sampled transition."""
        losses = np.asarray(losses, dtype=np.float64)
        for tid, loss in zip(np.asarray(ids, dtype=np.int64), losses):
            slot = self._slot_of(int(tid))
            p = float(loss) + self.eps_prio
            self._raw[slot] = p
            self._set_leaf(slot, p**self.alpha)
            if p > self.p_max:
                self.p_max = p

    def anneal(self, step: int) -> tuple[float, float]:
        """Move alpha/beta along the schedule; a changed alpha re-exponentiates
        every stored priority (full tree rebuild, vectorized)."""
        alpha, beta = self.schedule.at(step)
        self.beta = beta
        if alpha != self.alpha:
            self.alpha = alpha
            self._rebuild()
        return alpha, beta
