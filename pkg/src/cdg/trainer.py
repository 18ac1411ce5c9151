"""Training loop: interleave transition generation with prioritized
learning steps.

The model is one network with M*J heads (task-major layout: head
i*J + j serves task i under discount gamma_j). Each learning step
samples a prioritized batch, builds bootstrap targets from the slow
target copy (projected member distributions for the categorical model,
squared TD residuals for the expected-value model), applies importance
weights, takes one adaptive-moment gradient step, feeds the per-sample
losses back as priorities and soft-updates the target copy. n-step
transitions discount the bootstrap by gamma^n.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import net as nets
from .data import AlignedPanel, LagSpec
from .distrib import (
    EPS_LOG,
    SupportGrid,
    cross_entropy_batch,
    mean_batch,
    project_batch,
    project_worth_batch,
)
from .env import (
    CASH_RETURN,
    EPISODE_MAX_STEPS,
    EPISODE_MIN_STEPS,
    LOG_RETURN,
    BaseTask,
    Transition,
    gen_transitions,
)
from .errors import ConfigError, HeadCountMismatch
from .evaluation import IID_GAUSS, TWO_STATE_MRP, SyntheticMarket, synth_generate
from .net import AdamState, NetSpec, Params, TargetNet
from .replay import AnnealSchedule, PrioBuffer

CDG = "cdg"
CG = "cg"


def substream(seed: int, name: str) -> np.random.Generator:
    """Named child generator so every consumer of randomness is
    independently reproducible from the one run seed."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


@dataclass
class TrainConfig:
    gammas: list[float]
    model: str = CDG
    reward_kind: str = LOG_RETURN
    n_steps: int = 1
    n_batch: int = 512
    lr: float = 1e-5
    lr_end: float | None = None  # linear decay target; None keeps lr constant
    lr_decay_steps: int | None = None  # defaults to the planned step budget
    tau: float = 0.02
    grids: list[SupportGrid] = field(default_factory=list)  # one per gamma (cdg)
    hidden: tuple[int, ...] = (256, 256)
    activation: str = "relu"
    epochs: int = 100
    steps_per_epoch: int = 50  # learning steps per generated episode
    episodes_per_epoch: int = 1
    min_buffer_fill: int = 5000
    buffer_capacity: int = 80_000
    prio_epsilon: float = 1e-6
    anneal: AnnealSchedule = field(default_factory=AnnealSchedule)
    priority: str = "loss"  # or "td_abs"
    head_sum: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 1000

    def __post_init__(self):
        if not self.gammas or any(not 0.0 < g < 1.0 for g in self.gammas):
            raise ConfigError("gammas must be a nonempty list of values in (0, 1)")
        if self.n_steps < 1 or self.n_batch < 1:
            raise ConfigError("n_steps and n_batch must be >= 1")
        if self.model not in (CDG, CG):
            raise ConfigError(f"model must be '{CDG}' or '{CG}', got {self.model!r}")
        if self.reward_kind not in (LOG_RETURN, CASH_RETURN):
            raise ConfigError(f"unknown reward kind {self.reward_kind!r}")
        if self.priority not in ("loss", "td_abs"):
            raise ConfigError(f"priority must be 'loss' or 'td_abs', got {self.priority!r}")
        if self.model == CDG:
            if len(self.grids) != len(self.gammas):
                raise ConfigError("need one support grid per gamma for the categorical model")
            n_atoms = {g.n_atoms for g in self.grids}
            if len(n_atoms) != 1:
                raise ConfigError("all per-gamma grids must share n_atoms (one network output block size)")

    @property
    def n_gammas(self) -> int:
        return len(self.gammas)

    def lr_at(self, step: int) -> float:
        """Linearly annealed learning rate, clamped at lr_end."""
        if self.lr_end is None:
            return self.lr
        span = self.lr_decay_steps or (self.epochs * self.steps_per_epoch)
        frac = min(max(step, 0) / max(span, 1), 1.0)
        return (1.0 - frac) * self.lr + frac * self.lr_end

    @property
    def n_atoms(self) -> int:
        return self.grids[0].n_atoms if self.model == CDG else 1

    def gamma_eff(self) -> np.ndarray:
        """Bootstrap discount per gamma: gamma^n for n-step transitions."""
        return np.asarray(self.gammas, dtype=np.float64) ** self.n_steps


# -- transition sources --------------------------------------------------------


class MarketSource:
    """Episodes simulated from an aligned price panel and base tasks."""

    def __init__(
        self,
        panel: AlignedPanel,
        tasks: list[BaseTask],
        lags: LagSpec,
        cfg: TrainConfig,
        train_range: range | None = None,
        min_steps: int = EPISODE_MIN_STEPS,
        max_steps: int = EPISODE_MAX_STEPS,
        paper_exact_m: bool = False,
    ):
        self.panel = panel
        self.tasks = tasks
        self.lags = lags
        self.cfg = cfg
        self.train_range = train_range if train_range is not None else range(len(panel))
        self.min_steps = min_steps
        self.max_steps = max_steps
        self.paper_exact_m = paper_exact_m

    @property
    def feature_dim(self) -> int:
        return self.lags.feature_dim(self.panel.n_assets)

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def episode(self, rng: np.random.Generator) -> list[Transition]:
        return gen_transitions(
            self.panel,
            self.tasks,
            self.cfg.reward_kind,
            self.cfg.gammas,
            self.cfg.n_steps,
            self.lags,
            rng,
            train_range=self.train_range,
            min_steps=self.min_steps,
            max_steps=self.max_steps,
            paper_exact_m=self.paper_exact_m,
        )


class SyntheticSource:
    """Episodes drawn from a closed-form reward process; features are a
    constant for the state-independent kinds and one-hot for the chain."""

    def __init__(
        self,
        market: SyntheticMarket,
        cfg: TrainConfig,
        min_steps: int = EPISODE_MIN_STEPS,
        max_steps: int = EPISODE_MAX_STEPS,
    ):
        self.market = market
        self.cfg = cfg
        self.min_steps = min_steps
        self.max_steps = max_steps

    @property
    def feature_dim(self) -> int:
        return 2 if self.market.kind == TWO_STATE_MRP else 1

    @property
    def n_tasks(self) -> int:
        return 1

    def episode(self, rng: np.random.Generator) -> list[Transition]:
        from .data import State
        from .env import aggregate_nstep_block

        cfg = self.cfg
        steps = int(rng.integers(self.min_steps, self.max_steps + 1))
        series = synth_generate(self.market, steps, rng)
        rewards = series.rewards[:, None]  # (steps, 1 task)
        blocks = aggregate_nstep_block(rewards, np.asarray(cfg.gammas), cfg.n_steps)
        if self.market.kind == TWO_STATE_MRP:
            feats = np.eye(2)[series.states]
            worth_path = np.ones(steps + 1)
        else:
            feats = np.ones((steps + 1, 1))
            worth_path = np.concatenate([[1.0], np.exp(np.cumsum(series.rewards))])
        n = cfg.n_steps
        out = []
        n_emit = steps - n + 1
        for k in range(n_emit):
            s = State(k, feats[k], np.array([worth_path[k]]))
            s_next = State(k + n, feats[k + n], np.array([worth_path[k + n]]))
            pair = np.array([[worth_path[k], worth_path[k + n]]])
            out.append(Transition(s, blocks[k], s_next, pair, n, terminal=(k == n_emit - 1)))
        return out


# -- losses --------------------------------------------------------------------


def _check_heads(cfg: TrainConfig, n_tasks: int, arr: np.ndarray, trailing: int) -> None:
    expect = (n_tasks, cfg.n_gammas) if trailing == 0 else (n_tasks, cfg.n_gammas, trailing)
    if arr.shape[-len(expect):] != expect:
        raise HeadCountMismatch(f"head block has shape {arr.shape}, expected trailing {expect}")


def projected_members(
    cfg: TrainConfig,
    target_probs: np.ndarray,  # (B, M, J, N)
    rewards: np.ndarray,  # (B, M, J)
    worths: np.ndarray,  # (B, M, 2)
) -> np.ndarray:
    """Bootstrap member distributions per head, worth-scaled for cash rewards."""
    out = np.empty_like(target_probs)
    gamma_eff = cfg.gamma_eff()
    for j, grid in enumerate(cfg.grids):
        if cfg.reward_kind == CASH_RETURN:
            out[:, :, j, :] = project_worth_batch(
                grid, target_probs[:, :, j, :], rewards[:, :, j], worths[..., 0], worths[..., 1], gamma_eff[j]
            )
        else:
            out[:, :, j, :] = project_batch(grid, target_probs[:, :, j, :], rewards[:, :, j], gamma_eff[j])
    return out


def cdg_sample_loss(
    cfg: TrainConfig,
    online_probs: np.ndarray,  # (M, J, N)
    target_probs: np.ndarray,  # (M, J, N)
    rewards: np.ndarray,  # (M, J)
    worths: np.ndarray,  # (M, 2)
) -> tuple[np.ndarray, float]:
    """Per-head cross-entropy losses and their per-sample aggregate."""
    online_probs = np.asarray(online_probs, dtype=np.float64)
    n_tasks = online_probs.shape[0]
    _check_heads(cfg, n_tasks, online_probs, cfg.n_atoms)
    _check_heads(cfg, n_tasks, np.asarray(target_probs), cfg.n_atoms)
    members = projected_members(cfg, target_probs[None], rewards[None], worths[None])[0]
    losses = cross_entropy_batch(members, online_probs)
    total = losses.sum() if cfg.head_sum else losses.mean()
    return losses, float(total)


def cg_targets(cfg: TrainConfig, target_values: np.ndarray, rewards: np.ndarray) -> np.ndarray:
    """Log-reward bootstrap targets r + gamma^n * v_target, per head."""
    return rewards + cfg.gamma_eff() * target_values


def cg_residuals(
    cfg: TrainConfig,
    online_values: np.ndarray,  # (B, M, J)
    target_values: np.ndarray,
    rewards: np.ndarray,
    worths: np.ndarray,  # (B, M, 2)
) -> np.ndarray:
    """Signed TD residuals whose square is the per-head loss."""
    gamma_eff = cfg.gamma_eff()
    if cfg.reward_kind == CASH_RETURN:
        w_t = worths[..., 0][:, :, None]
        w_next = worths[..., 1][:, :, None]
        return online_values * w_t - rewards - gamma_eff * target_values * w_next
    return online_values - (rewards + gamma_eff * target_values)


def cg_sample_loss(
    cfg: TrainConfig,
    online_values: np.ndarray,  # (M, J)
    target_values: np.ndarray,
    rewards: np.ndarray,
    worths: np.ndarray,  # (M, 2)
) -> tuple[np.ndarray, float]:
    online_values = np.asarray(online_values, dtype=np.float64)
    n_tasks = online_values.shape[0]
    _check_heads(cfg, n_tasks, online_values, 0)
    resid = cg_residuals(cfg, online_values[None], np.asarray(target_values)[None], rewards[None], worths[None])[0]
    losses = resid**2
    total = losses.sum() if cfg.head_sum else losses.mean()
    return losses, float(total)


@dataclass
class LossReport:
    step: int
    per_head: np.ndarray  # (M, J) batch means
    per_sample: np.ndarray  # (B,)
    batch_total: float
    grad_norm: float


# -- the loop --------------------------------------------------------------------


class Trainer:
    def __init__(self, cfg: TrainConfig, source, metrics_hook=None):
        self.cfg = cfg
        self.source = source
        self.metrics_hook = metrics_hook
        self.rng_env = substream(cfg.seed, "env")
        self.rng_net = substream(cfg.seed, "net-init")
        self.rng_buffer = substream(cfg.seed, "buffer")

        head_kind = nets.CATEGORICAL if cfg.model == CDG else nets.SCALAR
        self.spec = NetSpec(
            input_dim=source.feature_dim,
            hidden_layers=tuple(cfg.hidden),
            activation=cfg.activation,
            n_heads=source.n_tasks * cfg.n_gammas,
            head_kind=head_kind,
            n_atoms=cfg.n_atoms if cfg.model == CDG else 1,
        )
        self.params = nets.init_params(self.spec, self.rng_net)
        self.target = TargetNet(self.params.copy(), cfg.tau)
        self.adam = AdamState.for_params(self.params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        self.buffer = PrioBuffer(
            cfg.buffer_capacity,
            alpha=cfg.anneal.alpha0,
            beta=cfg.anneal.beta0,
            eps_prio=cfg.prio_epsilon,
            rng=self.rng_buffer,
            schedule=cfg.anneal,
        )
        self.step = 0
        self.metrics: list[dict] = []

    @property
    def n_tasks(self) -> int:
        return self.source.n_tasks

    def generate_episode(self) -> int:
        transitions = self.source.episode(self.rng_env)
        for tr in transitions:
            self.buffer.push(tr)
        return len(transitions)

    def prefill(self) -> None:
        need = max(self.cfg.min_buffer_fill, self.cfg.n_batch)
        while self.buffer.size < need:
            self.generate_episode()

    def _batch_arrays(self, batch):
        trs = batch.transitions
        x = np.stack([tr.s.features for tr in trs])
        x_next = np.stack([tr.s_next.features for tr in trs])
        rewards = np.stack([tr.rewards for tr in trs])
        worths = np.stack([tr.worths for tr in trs])
        return x, x_next, rewards, worths

    def learn_step(self) -> LossReport:
        cfg = self.cfg
        self.buffer.anneal(self.step)
        batch = self.buffer.sample(cfg.n_batch)
        x, x_next, rewards, worths = self._batch_arrays(batch)
        b = len(x)
        m_tasks, j_gammas = self.n_tasks, cfg.n_gammas
        head_scale = 1.0 if cfg.head_sum else 1.0 / (m_tasks * j_gammas)

        cache = nets.forward_cached(self.spec, self.params, x)
        target_out = nets.forward(self.spec, self.target.params, x_next)

        if cfg.model == CDG:
            online = cache.outputs.reshape(b, m_tasks, j_gammas, cfg.n_atoms)
            boot = target_out.reshape(b, m_tasks, j_gammas, cfg.n_atoms)
            members = projected_members(cfg, boot, rewards, worths)
            head_losses = cross_entropy_batch(members, online)  # (B, M, J)
            clamped = np.maximum(online, EPS_LOG)
            upstream = np.where(online >= EPS_LOG, -members / clamped, 0.0)
            td_like = np.abs(
                np.stack(
                    [mean_batch(g, members[:, :, j, :]) - mean_batch(g, online[:, :, j, :])
                     for j, g in enumerate(cfg.grids)],
                    axis=-1,
                )
            )
        else:
            online = cache.outputs.reshape(b, m_tasks, j_gammas)
            boot = target_out.reshape(b, m_tasks, j_gammas)
            resid = cg_residuals(cfg, online, boot, rewards, worths)
            head_losses = resid**2
            upstream = 2.0 * resid
            if cfg.reward_kind == CASH_RETURN:
                upstream = upstream * worths[..., 0][:, :, None]
            td_like = np.abs(resid)

        per_sample = head_losses.sum(axis=(1, 2)) if cfg.head_sum else head_losses.mean(axis=(1, 2))
        batch_total = float(batch.weights @ per_sample)
        upstream = upstream * (batch.weights[:, None, None, None] if cfg.model == CDG else batch.weights[:, None, None])
        upstream *= head_scale
        grad = nets.backward_from_cache(
            self.spec, self.params, cache, upstream.reshape(cache.outputs.shape)
        )
        nets.adam_step(self.adam, self.params, grad, cfg.lr_at(self.step))
        priorities = per_sample if cfg.priority == "loss" else td_like.mean(axis=(1, 2))
        self.buffer.update_priorities(batch.ids, priorities)
        nets.soft_update(self.target, self.params)

        report = LossReport(
            step=self.step,
            per_head=head_losses.mean(axis=0),
            per_sample=per_sample,
            batch_total=batch_total,
            grad_norm=float(np.linalg.norm(grad)),
        )
        self.step += 1
        self._emit(report)
        return report

    def _emit(self, report: LossReport) -> None:
        row = {
            "step": report.step,
            "loss": report.batch_total,
            "loss_per_head": [round(float(v), 10) for v in report.per_head.ravel()],
            "grad_norm": report.grad_norm,
            "buffer_size": self.buffer.size,
            "alpha": self.buffer.alpha,
            "beta": self.buffer.beta,
            "p_max": self.buffer.p_max,
            "lr": self.cfg.lr_at(report.step),
        }
        self.metrics.append(row)
        if self.metrics_hook is not None:
            self.metrics_hook(row)

    def train(self, checkpoint_dir: str | Path | None = None, run_config: dict | None = None) -> "TrainResult":
        cfg = self.cfg
        self.prefill()
        paths = []
        for _ in range(cfg.epochs):
            for _ in range(cfg.episodes_per_epoch):
                self.generate_episode()
            for _ in range(cfg.steps_per_epoch):
                self.learn_step()
                if checkpoint_dir is not None and self.step % cfg.checkpoint_every == 0:
                    paths.append(self.save_checkpoint(checkpoint_dir, run_config))
        if checkpoint_dir is not None:
            paths.append(self.save_checkpoint(checkpoint_dir, run_config, final=True))
        return TrainResult(self.spec, self.params, self.target.params, self.step, self.metrics, paths)

    def save_checkpoint(self, out_dir: str | Path, run_config: dict | None = None, final: bool = False) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        name = "ckpt_final.cdgckpt" if final else f"ckpt_{self.step:07d}.cdgckpt"
        path = out_dir / name
        nets.save_checkpoint(
            path,
            self.spec,
            self.params,
            self.adam,
            self.step,
            rng_states={
                "env": self.rng_env.bit_generator.state,
                "buffer": self.rng_buffer.bit_generator.state,
            },
            target_params=self.target.params,
            run_config=run_config or {},
        )
        return path


@dataclass
class TrainResult:
    spec: NetSpec
    params: Params
    target_params: Params
    steps: int
    metrics: list[dict]
    checkpoints: list[Path]


def train(cfg: TrainConfig, source, checkpoint_dir=None, run_config=None, metrics_hook=None) -> TrainResult:
    return Trainer(cfg, source, metrics_hook=metrics_hook).train(checkpoint_dir, run_config)


def evaluate_heads(spec: NetSpec, params: Params, states: np.ndarray, n_tasks: int) -> np.ndarray:
    """Deterministic forward pass, reshaped to (B, n_tasks, J[, n_atoms])."""
    out = nets.forward(spec, params, np.atleast_2d(states))
    j = spec.n_heads // n_tasks
    if spec.head_kind == nets.CATEGORICAL:
        return out.reshape(len(out), n_tasks, j, spec.n_atoms)
    return out.reshape(len(out), n_tasks, j)
