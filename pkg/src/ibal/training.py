"""Vanilla QMIX and interaction-breaking adversarial training loops."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import attackers as atk
from . import diffcore as dc
from . import miest, qmix
from .envs import EnvSpec, make_env, preset
from .induced import rollout_episode

TRAIN_SEED_LIMIT = 2 ** 30   # training episodes use seeds in [0, 2^30)
MASK_MODES = ("mi", "random", "gaussian", "fgsm")


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, checkpoint: Optional[str] = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    env: EnvSpec = field(default_factory=lambda: preset("forage3"))
    mode: str = "ibal"                 # "ibal" or "vanilla"
    seed: int = 0
    total_steps: int = 100_000
    pretrain_frac: float = 0.05
    gamma: float = 0.99
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_anneal: int = 50_000
    buffer_size: int = 5000
    batch_size: int = 32
    lr: float = 5e-4
    tau: float = 0.01
    grad_clip: float = 10.0
    # interaction-breaking attack
    K: int = 1
    L_per_g2: float = 3.0
    L: Optional[int] = None            # fixed budget overriding L_per_g2 * |G2|
    symmetric_budget: str = "same"     # "same" or "scaled" (|G1| multiplier on the G2 side)
    p_act_min: Optional[float] = None  # defaults to 1/K
    alpha: float = 1.1
    eta: float = 0.8
    sigma_window: int = 100
    adaptive: bool = True
    obs_attack: bool = True
    act_attack: bool = True
    mask_mode: str = "mi"
    noise_sigma: float = 0.1
    fgsm_eps: float = 0.1
    replay_action: str = "intermediate"
    timeout_terminal: bool = True      # no bootstrap past the step limit
    # MI models
    mi_refresh_every: int = 200
    mi_per_pair: int = 2048
    mi_batch: int = 256
    mi_lr: float = 1e-3
    mi_store: int = 16384
    mi_updates: int = 4                # MI-model optimizer steps per episode
    mi_neg: int = 4
    checkpoint_every: int = 0          # episodes; 0 = only at the end

    def __post_init__(self):
        if isinstance(self.env, dict):
            self.env = EnvSpec.from_dict(self.env)
        elif isinstance(self.env, str):
            self.env = preset(self.env)
        if self.mode not in ("ibal", "vanilla"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not self.eps_start >= self.eps_end >= 0:
            raise ValueError("epsilon schedule needs start >= end >= 0")
        if self.buffer_size < self.batch_size or self.batch_size < 1:
            raise ValueError("buffer must hold at least one batch")
        if not 0 <= self.K <= self.env.n_agents // 2:
            raise ValueError("K must lie in [0, floor(n/2)]")
        if not 0.0 <= self.pretrain_frac <= 1.0:
            raise ValueError("pretrain_frac must lie in [0, 1]")
        if self.alpha <= 1 or not 0 < self.eta < 1:
            raise ValueError("alpha > 1 and eta in (0, 1) required")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"unknown mask mode {self.mask_mode!r}")
        if self.replay_action not in ("intermediate", "executed"):
            raise ValueError("replay_action must be 'intermediate' or 'executed'")
        if self.symmetric_budget not in ("same", "scaled"):
            raise ValueError("symmetric_budget must be 'same' or 'scaled'")
        if self.p_act_min is not None and not 0 <= self.p_act_min <= 1:
            raise ValueError("p_act_min must lie in [0, 1]")
        if self.mi_updates < 1:
            raise ValueError("mi_updates must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")

    @property
    def pretrain_steps(self) -> int:
        return int(round(self.pretrain_frac * self.total_steps)) if self.mode == "ibal" else 0

    @property
    def p_min(self) -> float:
        if self.K == 0:
            return 0.0
        return 1.0 / self.K if self.p_act_min is None else float(self.p_act_min)

    def budget(self, partition: atk.GroupPartition) -> int:
        if self.L is not None:
            return int(self.L)
        return int(round(self.L_per_g2 * len(partition.g2)))

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["env"] = self.env.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown train keys: {unknown}")
        return cls(**d)


@dataclass
class Streams:
    """Independent random streams, one per concern."""

    env: np.random.Generator
    explore: np.random.Generator
    replay: np.random.Generator
    attack: np.random.Generator
    mi: np.random.Generator
    init: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "Streams":
        kids = np.random.SeedSequence(seed).spawn(6)
        return cls(*(np.random.default_rng(k) for k in kids))


@dataclass
class TrainState:
    config: TrainConfig
    learner: qmix.Learner
    obs_model: miest.ObsReconModel
    act_model: miest.ActionReconModel
    table: miest.DimMIScoreTable
    pstate: atk.AttackProbState
    step: int = 0
    episode: int = 0
    p_max_trace: list = field(default_factory=list)
    traces: list = field(default_factory=list)
    mi_data: Optional[miest.MIData] = None


def init_state(config: TrainConfig, streams: Streams) -> TrainState:
    env = make_env(config.env)
    n, A, d = env.n_agents, env.n_actions, env.obs_dim
    learner = qmix.Learner.create(d, env.state_dim, n, A, streams.init, lr=config.lr, gamma=config.gamma,
                                  tau=config.tau, grad_clip=config.grad_clip)
    H = qmix.AGENT_HIDDEN
    obs_model = miest.ObsReconModel.create(n, A, d, H, streams.init, lr=config.mi_lr)
    act_model = miest.ActionReconModel.create(n, A, H, streams.init, lr=config.mi_lr)
    pstate = atk.AttackProbState(config.p_min, config.alpha, config.eta, config.sigma_window)
    return TrainState(config, learner, obs_model, act_model, miest.DimMIScoreTable.empty(n, d), pstate)


def build_episode_attackers(config: TrainConfig, env, table: miest.DimMIScoreTable,
                            act_model: miest.ActionReconModel, partition: atk.GroupPartition,
                            p_act: float, rng: np.random.Generator) -> tuple:
    """Observation and action attackers for one interaction-breaking episode."""
    L = min(config.budget(partition), env.obs_dim)
    if config.mask_mode == "random":
        mask = atk.random_mask(partition, L, env.obs_dim, rng)
    else:
        mask = atk.select_mask(table, partition, L)
        if config.symmetric_budget == "scaled" and partition.g1:
            L2 = min(int(round(L * len(partition.g1) / max(len(partition.g2), 1))), env.obs_dim)
            for j in partition.g2:
                mask.dims[j] = atk.top_l(table.aggregate(j, partition.g1), L2)
    mode = {"mi": "mask", "random": "mask", "gaussian": "noise-dims", "fgsm": "fgsm-dims"}[config.mask_mode]
    obs_att = atk.ObsAttacker(mode, mask, sigma=config.noise_sigma, eps=config.fgsm_eps) \
        if config.obs_attack else atk.ObsAttacker()
    act_att = atk.ActionAttacker("ib", partition, act_model, p_act) if config.act_attack else atk.ActionAttacker()
    return obs_att, act_att


METRIC_COLUMNS = ("step", "episode", "phase", "partition-size", "P_act", "P_act^max", "td-loss",
                  "obs-model-nll", "action-model-ce", "success", "return", "seed")


def train(config: TrainConfig, on_row: Optional[Callable[[dict], None]] = None,
          checkpoint_fn: Optional[Callable[[TrainState, str], str]] = None,
          keep_traces: bool = False) -> TrainState:
    """Run training. ``on_row`` receives one metrics row per episode;
    ``checkpoint_fn(state, tag)`` persists intermediate and final checkpoints."""
    streams = Streams.from_seed(config.seed)
    st = init_state(config, streams)
    env = make_env(config.env)
    learner = st.learner
    buffer = qmix.ReplayBuffer(config.buffer_size)
    store = miest.TransitionStore(config.mi_store)
    schedule = qmix.EpsilonSchedule(config.eps_start, config.eps_end, config.eps_anneal)
    while st.step < config.total_steps:
        adversarial = config.mode == "ibal" and st.step >= config.pretrain_steps
        phase = "adversarial" if adversarial else ("pretrain" if config.mode == "ibal" else "vanilla")
        epsilon = schedule.value(st.step)
        ep_seed = int(streams.env.integers(0, TRAIN_SEED_LIMIT))
        partition, p_act = None, 0.0
        obs_att, act_att = atk.ObsAttacker(), atk.ActionAttacker()
        if adversarial:
            partition = atk.sample_partition(env.n_agents, config.K, streams.attack)
            p_act = atk.sample_pact(st.pstate, config.K, streams.attack, lo=config.p_min) \
                if config.adaptive else config.p_min
            obs_att, act_att = build_episode_attackers(config, env, st.table, st.act_model, partition,
                                                       p_act, streams.attack)
        trace = rollout_episode(env, learner.agent, epsilon, ep_seed, streams.explore, obs_att, act_att,
                                streams.attack, config.replay_action)
        if keep_traces:
            st.traces.append(trace)
        buffer.push(trace.to_episode(config.replay_action, config.timeout_terminal))
        for row in trace.mi_rows():
            store.push(*row)
        st.step += trace.length
        st.episode += 1
        td = math.nan
        try:
            if len(buffer) >= config.batch_size:
                td = qmix.td_update(learner, buffer.sample(config.batch_size, streams.replay))
                if not math.isfinite(td):
                    raise dc.NonFiniteGradientError(["td-loss"])
        except (dc.NonFiniteGradientError, FloatingPointError) as exc:
            path = checkpoint_fn(st, "diagnostic") if checkpoint_fn else None
            raise TrainingAborted(f"non-finite training signal at episode {st.episode}: {exc}", path) from exc
        nll, ce = math.nan, math.nan
        if len(store) >= miest.MIN_BATCH:
            data = store.data()
            for _ in range(config.mi_updates):
                nll = st.obs_model.train_step(data, streams.mi, config.mi_batch)
                ce = st.act_model.train_on(data, config.K, streams.mi, config.mi_batch)
        if st.episode % config.mi_refresh_every == 0 and len(store) >= miest.MIN_BATCH:
            st.table = miest.refresh_score_table(st.obs_model, store.data(), st.table, st.episode,
                                                 streams.mi, config.mi_per_pair, config.mi_neg)
        if adversarial and config.adaptive:
            st.pstate = atk.update_pact(st.pstate, float(trace.success))
        st.p_max_trace.append(st.pstate.p_max)
        if on_row is not None:
            on_row({"step": st.step, "episode": st.episode, "phase": phase,
                    "partition-size": len(partition.g1) if partition else 0, "P_act": p_act,
                    "P_act^max": st.pstate.p_max, "td-loss": td, "obs-model-nll": nll,
                    "action-model-ce": ce, "success": int(trace.success),
                    "return": trace.episode_return, "seed": ep_seed})
        if checkpoint_fn and config.checkpoint_every and st.episode % config.checkpoint_every == 0:
            checkpoint_fn(st, f"ep{st.episode}")
    if len(store) >= miest.MIN_BATCH:
        st.table = miest.refresh_score_table(st.obs_model, store.data(), st.table, st.episode,
                                             streams.mi, config.mi_per_pair, config.mi_neg)
    st.mi_data = store.data() if len(store) else None
    if checkpoint_fn:
        checkpoint_fn(st, "final")
    return st
