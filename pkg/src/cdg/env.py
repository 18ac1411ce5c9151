"""Base tasks (fixed strategies), worth evolution and transition generation.

A base task is either a buy-and-hold position in one asset or a fixed
target allocation that rebalances when the drifted weights stray too far
from the target (L1 distance). Worth compounds with prices; reallocation
pays a proportional cost on the L1 turnover. Each simulated step yields a
reward per task, and episodes are cut into n-step transitions whose
reward block carries one discounted aggregate per (task, gamma) pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import AlignedPanel, LagSpec, State, _feature_rows
from .errors import NonPositivePrice, NonPositiveWorth, WindowOutOfRange, WorthWipeout

SINGLE_ASSET = "single_asset"
FIXED_ALLOCATION = "fixed_allocation"

LOG_RETURN = "log_return"
CASH_RETURN = "cash_return"

# Episode length bounds used when generating training transitions.
EPISODE_MIN_STEPS = 500
EPISODE_MAX_STEPS = 1000


@dataclass(frozen=True)
class BaseTask:
    task_id: str
    kind: str
    asset: int = 0  # single_asset only
    weights: np.ndarray | None = None  # fixed_allocation only
    rebalance_threshold: float = 0.0
    cost_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.cost_rate < 1.0:
            raise ValueError(f"cost_rate must be in [0, 1), got {self.cost_rate}")
        if self.kind == FIXED_ALLOCATION:
            w = np.asarray(self.weights, dtype=np.float64)
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ValueError("allocation weights must be nonnegative and sum to 1")
            if self.rebalance_threshold < 0:
                raise ValueError("rebalance threshold must be nonnegative")
            object.__setattr__(self, "weights", w)
        elif self.kind != SINGLE_ASSET:
            raise ValueError(f"unknown task kind {self.kind!r}")


@dataclass
class TaskState:
    worth: float
    position: np.ndarray | None = None  # drifted weights, portfolio kinds only

    def copy(self) -> "TaskState":
        return TaskState(self.worth, None if self.position is None else self.position.copy())


def initial_state(task: BaseTask, worth: float = 1.0) -> TaskState:
    if task.kind == SINGLE_ASSET:
        return TaskState(worth)
    return TaskState(worth, np.asarray(task.weights, dtype=np.float64).copy())


def step_single(task: BaseTask, ts: TaskState, z_t: float, z_next: float) -> TaskState:
    if z_t <= 0 or z_next <= 0:
        raise NonPositivePrice(f"prices must be positive, got {z_t}, {z_next}")
    return TaskState(ts.worth * (z_next / z_t))


def rebalance_decision(task: BaseTask, position: np.ndarray) -> np.ndarray:
    """Snap back to the target weights once L1 drift exceeds the threshold."""
    target = task.weights
    if np.abs(position - target).sum() > task.rebalance_threshold:
        return target
    return position


def step_portfolio(task: BaseTask, ts: TaskState, prices_t: np.ndarray, prices_next: np.ndarray) -> TaskState:
    """One period of the allocation strategy: decide, pay turnover cost,
    then let prices drift the weights."""
    prices_t = np.asarray(prices_t, dtype=np.float64)
    prices_next = np.asarray(prices_next, dtype=np.float64)
    if np.any(prices_t <= 0) or np.any(prices_next <= 0):
        raise NonPositivePrice("prices must be positive")
    held = ts.position
    target = rebalance_decision(task, held)
    cost_factor = 1.0 - task.cost_rate * np.abs(target - held).sum()
    if cost_factor <= 0:
        raise WorthWipeout(f"cost factor {cost_factor} <= 0 for task {task.task_id}")
    ratios = prices_next / prices_t
    growth = target @ ratios
    new_worth = ts.worth * cost_factor * growth
    drifted = target * ratios / growth
    return TaskState(new_worth, drifted)


def step_task(task: BaseTask, ts: TaskState, prices_t: np.ndarray, prices_next: np.ndarray) -> TaskState:
    if task.kind == SINGLE_ASSET:
        return step_single(task, ts, float(prices_t[task.asset]), float(prices_next[task.asset]))
    return step_portfolio(task, ts, prices_t, prices_next)


def reward(kind: str, w_prev: float, w_now: float) -> float:
    if kind == LOG_RETURN:
        if w_prev <= 0 or w_now <= 0:
            raise NonPositiveWorth(f"log reward needs positive worths, got {w_prev}, {w_now}")
        return float(np.log(w_now / w_prev))
    if kind == CASH_RETURN:
        return float(w_now - w_prev)
    raise ValueError(f"unknown reward kind {kind!r}")


def nstep_aggregate(rewards: np.ndarray, gamma: float) -> float:
    """Discounted sum of the next n per-step rewards."""
    rewards = np.asarray(rewards, dtype=np.float64)
    return float(rewards @ gamma ** np.arange(len(rewards)))


@dataclass
class Transition:
    s: State
    rewards: np.ndarray  # (n_tasks, n_gammas) n-step aggregates
    s_next: State
    worths: np.ndarray  # (n_tasks, 2): worth at t and at t+n
    n: int
    terminal: bool = False


def simulate_worths(
    panel: AlignedPanel,
    tasks: list[BaseTask],
    start: int,
    steps: int,
    initial_worth: float = 1.0,
) -> np.ndarray:
    """Worth paths over [start, start+steps]: array (steps+1, n_tasks)."""
    if start < 0 or start + steps >= len(panel):
        raise WindowOutOfRange(f"window [{start}, {start + steps}] outside panel of length {len(panel)}")
    states = [initial_state(task, initial_worth) for task in tasks]
    out = np.empty((steps + 1, len(tasks)))
    out[0] = [s.worth for s in states]
    for k in range(steps):
        p_t = panel.closes[start + k]
        p_next = panel.closes[start + k + 1]
        states = [step_task(task, s, p_t, p_next) for task, s in zip(tasks, states)]
        out[k + 1] = [s.worth for s in states]
    return out


def rewards_from_worths(worths: np.ndarray, kind: str) -> np.ndarray:
    """Per-step rewards (steps, n_tasks) from a worth path (steps+1, n_tasks)."""
    if kind == LOG_RETURN:
        if np.any(worths <= 0):
            raise NonPositiveWorth("worth path must stay positive for log rewards")
        return np.diff(np.log(worths), axis=0)
    if kind == CASH_RETURN:
        return np.diff(worths, axis=0)
    raise ValueError(f"unknown reward kind {kind!r}")


def aggregate_nstep_block(step_rewards: np.ndarray, gammas: np.ndarray, n: int) -> np.ndarray:
    """All n-step aggregates at once.

    step_rewards: (steps, n_tasks). Returns (steps - n + 1, n_tasks, J)
    where entry [t, i, j] discounts rewards t..t+n-1 of task i by gamma_j.
    """
    steps, n_tasks = step_rewards.shape
    if n < 1 or steps < n:
        raise WindowOutOfRange(f"need at least n={n} per-step rewards, have {steps}")
    powers = gammas[None, :] ** np.arange(n)[:, None]  # (n, J)
    out = np.zeros((steps - n + 1, n_tasks, len(gammas)))
    for k in range(n):
        out += step_rewards[k : steps - n + 1 + k, :, None] * powers[k][None, None, :]
    return out


def gen_transitions(
    panel: AlignedPanel,
    tasks: list[BaseTask],
    reward_kind: str,
    gammas: list[float],
    n_steps: int,
    lags: LagSpec,
    rng: np.random.Generator,
    train_range: range | None = None,
    min_steps: int = EPISODE_MIN_STEPS,
    max_steps: int = EPISODE_MAX_STEPS,
    start: int | None = None,
    paper_exact_m: bool = False,
) -> list[Transition]:
    """Simulate one episode and return its n-step transitions.

    The episode starts at a uniformly random valid index inside
    train_range (or at `start` if given), runs for a random number of
    steps in [min_steps, max_steps] clipped to the available window, and
    resets every task's worth to 1.
    """
    lo = (train_range.start if train_range is not None else 0) + lags.max_lag
    hi = (train_range.stop if train_range is not None else len(panel)) - 1
    gamma_arr = np.asarray(gammas, dtype=np.float64)

    if start is None:
        latest_start = hi - n_steps  # at least one transition must fit
        if latest_start < lo:
            raise WindowOutOfRange(f"no valid episode start in [{lo}, {latest_start}]")
        start = int(rng.integers(lo, latest_start + 1))
    elif start < lo or start + n_steps > hi:
        raise WindowOutOfRange(f"episode start {start} not in [{lo}, {hi - n_steps}]")

    steps = int(rng.integers(min_steps, max_steps + 1))
    steps = min(steps, hi - start)
    if steps < n_steps:
        raise WindowOutOfRange(f"episode of {steps} steps cannot produce {n_steps}-step transitions")

    worths = simulate_worths(panel, tasks, start, steps)
    step_rewards = rewards_from_worths(worths, reward_kind)  # (steps, M)
    blocks = aggregate_nstep_block(step_rewards, gamma_arr, n_steps)  # (steps-n+1, M, J)

    ts = np.arange(start, start + steps + 1)
    feats = _feature_rows(panel, ts, lags, paper_exact_m)
    n_emit = steps - n_steps + 1
    out = []
    for k in range(n_emit):
        s = State(int(ts[k]), feats[k], worths[k].copy())
        s_next = State(int(ts[k + n_steps]), feats[k + n_steps], worths[k + n_steps].copy())
        pair = np.column_stack([worths[k], worths[k + n_steps]])
        out.append(
            Transition(
                s=s,
                rewards=blocks[k],
                s_next=s_next,
                worths=pair,
                n=n_steps,
                terminal=(k == n_emit - 1),
            )
        )
    return out
