"""Recurrent per-agent utilities, a monotonic hypernetwork mixer, episode replay
and TD training."""
from __future__ import annotations

import collections
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import diffcore as dc
from .diffcore import ModelParams, OptimizerState, Tensor

AGENT_HIDDEN = 64
MIX_EMBED = 32
HYPER_HIDDEN = 32


class EmptyBatchError(ValueError):
    pass


class UnderfilledBufferError(ValueError):
    pass


# architectures --------------------------------------------------------------
def agent_arch(input_dim: int, n_actions: int, hidden: int = AGENT_HIDDEN) -> dict:
    return {"kind": "composite", "parts": {
        "fc1": dc.mlp_arch([input_dim, hidden], activation=None, out_activation="relu"),
        "gru": dc.gru_arch(hidden, hidden),
        "fc2": dc.mlp_arch([hidden, n_actions], activation=None),
    }}


def mixer_arch(n_agents: int, state_dim: int, embed: int = MIX_EMBED, hyper: int = HYPER_HIDDEN) -> dict:
    return {"kind": "composite", "n_agents": n_agents, "embed": embed, "parts": {
        "hyper_w1": dc.mlp_arch([state_dim, hyper, n_agents * embed], activation="relu"),
        "hyper_b1": dc.mlp_arch([state_dim, embed], activation=None),
        "hyper_w2": dc.mlp_arch([state_dim, hyper, embed], activation="relu"),
        "hyper_v": dc.mlp_arch([state_dim, embed, 1], activation="relu"),
    }}


def agent_input_dim(obs_dim: int, n_actions: int, n_agents: int) -> int:
    return obs_dim + n_actions + n_agents


def build_agent_inputs(obs: np.ndarray, last_actions: Optional[np.ndarray], n_actions: int) -> np.ndarray:
    """Concatenate observation, previous-action one-hot and agent-id one-hot.

    ``obs`` has shape (..., n, d); ``last_actions`` (..., n) with -1 meaning
    "no previous action".
    """
    obs = np.asarray(obs, dtype=np.float64)
    n = obs.shape[-2]
    lead = obs.shape[:-1]
    last = np.zeros(lead + (n_actions,))
    if last_actions is not None:
        la = np.asarray(last_actions)
        hit = la >= 0
        idx = np.nonzero(hit)
        last[idx + (la[hit],)] = 1.0
    ids = np.broadcast_to(np.eye(n), lead + (n,))
    return np.concatenate([obs, last, ids], axis=-1)


# forward passes -------------------------------------------------------------
def agent_step(params: ModelParams, inputs, hidden):
    """One recurrent step for a batch of agents. Returns (utilities, hidden)."""
    x = dc.mlp_forward(params.part("fc1"), inputs)
    _, h = dc.recurrent_step(params.part("gru"), x, hidden)
    q = dc.mlp_forward(params.part("fc2"), h)
    return q, h


def init_hidden(batch: int, hidden: int = AGENT_HIDDEN) -> np.ndarray:
    return np.zeros((batch, hidden))


def agent_utilities(params: ModelParams, history: np.ndarray, hidden: Optional[np.ndarray] = None):
    """Run the agent network over a history of inputs with shape (T, B, in).

    Returns utilities of the final step (B, A) and the final hidden state.
    """
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 3 or history.shape[0] == 0:
        raise dc.ShapeError("history must be a non-empty (T, batch, features) array")
    h = init_hidden(history.shape[1], params.arch["parts"]["gru"]["hidden"]) if hidden is None else hidden
    with dc.no_grad():
        for t in range(history.shape[0]):
            q, h = agent_step(params, history[t], h)
            h = h.data
    return q.data, h


def mix(chosen, states, mixer: ModelParams) -> Tensor:
    """Monotonic mixing of per-agent utilities (B, n) given states (B, S) -> (B,)."""
    chosen, states = dc.as_tensor(chosen), dc.as_tensor(states)
    n, e = mixer.arch["n_agents"], mixer.arch["embed"]
    if chosen.shape[-1] != n:
        raise dc.ShapeError(f"mixer expects {n} utilities, got {chosen.shape[-1]}")
    b = chosen.shape[0]
    w1 = dc.tabs(dc.reshape(dc.mlp_forward(mixer.part("hyper_w1"), states), (b, n, e)))
    b1 = dc.reshape(dc.mlp_forward(mixer.part("hyper_b1"), states), (b, 1, e))
    w2 = dc.tabs(dc.reshape(dc.mlp_forward(mixer.part("hyper_w2"), states), (b, e, 1)))
    v = dc.reshape(dc.mlp_forward(mixer.part("hyper_v"), states), (b, 1, 1))
    hidden = dc.elu(dc.matmul(dc.reshape(chosen, (b, 1, n)), w1) + b1)
    return dc.reshape(dc.matmul(hidden, w2) + v, (b,))


# action selection -----------------------------------------------------------
def greedy(utilities: np.ndarray, avail: np.ndarray) -> np.ndarray:
    """Available-argmax per row; ties go to the lowest action index."""
    masked = np.where(avail, utilities, -np.inf)
    return np.argmax(masked, axis=-1)


def select_actions(utilities, avail, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    utilities, avail = np.asarray(utilities), np.asarray(avail, dtype=bool)
    counts = avail.sum(axis=-1)
    if (counts == 0).any():
        raise ValueError(f"agents {np.flatnonzero(counts == 0).tolist()} have no available action")
    n = utilities.shape[0]
    # both draws always happen so the stream advances identically for any epsilon
    explore = rng.random(n) < epsilon
    pick = rng.random(n)
    out = greedy(utilities, avail)
    for i in np.flatnonzero(explore):
        choices = np.flatnonzero(avail[i])
        out[i] = choices[min(int(pick[i] * len(choices)), len(choices) - 1)]
    return out


@dataclass(frozen=True)
class EpsilonSchedule:
    start: float = 1.0
    end: float = 0.05
    horizon: int = 50000

    def __post_init__(self):
        if not self.start >= self.end >= 0:
            raise ValueError("epsilon schedule needs start >= end >= 0")

    def value(self, step: int) -> float:
        if self.horizon <= 0:
            return self.end
        frac = min(max(step, 0) / self.horizon, 1.0)
        return self.start + frac * (self.end - self.start)


# replay ---------------------------------------------------------------------
@dataclass
class Episode:
    """One complete episode as presented to the learner.

    ``obs``/``avail``/``states`` carry T+1 entries (the last is the final state);
    ``actions``/``rewards``/``terminal`` carry T entries. ``terminal`` marks a
    true termination (not a time-limit cut), which stops bootstrapping.
    """

    obs: np.ndarray
    actions: np.ndarray
    avail: np.ndarray
    states: np.ndarray
    rewards: np.ndarray
    terminal: np.ndarray
    complete: bool = True

    @property
    def length(self) -> int:
        return len(self.rewards)


@dataclass
class EpisodeBatch:
    obs: np.ndarray       # (B, T+1, n, d)
    actions: np.ndarray   # (B, T, n)
    avail: np.ndarray     # (B, T+1, n, A)
    states: np.ndarray    # (B, T+1, S)
    rewards: np.ndarray   # (B, T)
    terminal: np.ndarray  # (B, T)
    mask: np.ndarray      # (B, T)

    @property
    def size(self) -> int:
        return self.rewards.shape[0]


def collate(episodes) -> EpisodeBatch:
    episodes = list(episodes)
    if not episodes:
        raise EmptyBatchError("cannot collate an empty batch")
    B, T = len(episodes), max(e.length for e in episodes)
    e0 = episodes[0]
    n, d = e0.obs.shape[1:]
    A, S = e0.avail.shape[-1], e0.states.shape[-1]
    obs = np.zeros((B, T + 1, n, d))
    actions = np.zeros((B, T, n), dtype=np.int64)
    avail = np.zeros((B, T + 1, n, A), dtype=bool)
    avail[..., 0] = True
    states = np.zeros((B, T + 1, S))
    rewards = np.zeros((B, T))
    terminal = np.zeros((B, T), dtype=bool)
    mask = np.zeros((B, T))
    for b, e in enumerate(episodes):
        L = e.length
        obs[b, :L + 1] = e.obs
        actions[b, :L] = e.actions
        avail[b, :L + 1] = e.avail
        states[b, :L + 1] = e.states
        rewards[b, :L] = e.rewards
        terminal[b, :L] = e.terminal
        mask[b, :L] = 1.0
    return EpisodeBatch(obs, actions, avail, states, rewards, terminal, mask)


class ReplayBuffer:
    """FIFO ring of complete episodes, sampled uniformly with replacement."""

    def __init__(self, capacity: int = 5000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: collections.deque = collections.deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def push(self, episode: Episode) -> None:
        if not episode.complete:
            raise ValueError("replay stores complete episodes only")
        self._items.append(episode)

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if len(self._items) < batch_size:
            raise UnderfilledBufferError(f"buffer holds {len(self._items)} episodes, need {batch_size}")
        return rng.integers(0, len(self._items), size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator) -> EpisodeBatch:
        idx = self.sample_indices(batch_size, rng)
        return collate(self._items[i] for i in idx)

    def __getitem__(self, k: int) -> Episode:
        return self._items[k]


# learner --------------------------------------------------------------------
@dataclass
class Learner:
    agent: ModelParams
    mixer: ModelParams
    target_agent: ModelParams
    target_mixer: ModelParams
    opt: OptimizerState
    n_actions: int
    gamma: float = 0.99
    tau: float = 0.01
    grad_clip: float = 10.0
    updates: int = 0

    @classmethod
    def create(cls, obs_dim: int, state_dim: int, n_agents: int, n_actions: int,
               rng: np.random.Generator, lr: float = 5e-4, gamma: float = 0.99, tau: float = 0.01,
               grad_clip: float = 10.0) -> "Learner":
        agent = dc.init_params(agent_arch(agent_input_dim(obs_dim, n_actions, n_agents), n_actions), rng)
        mixer = dc.init_params(mixer_arch(n_agents, state_dim), rng)
        joint = joint_params(agent, mixer)
        return cls(agent, mixer, agent.copy(), mixer.copy(), OptimizerState.for_params(joint, lr=lr),
                   n_actions, gamma, tau, grad_clip)

    def joint(self) -> ModelParams:
        return joint_params(self.agent, self.mixer)


def joint_params(agent: ModelParams, mixer: ModelParams) -> ModelParams:
    """A view sharing tensors of both networks under "agent."/"mixer." prefixes."""
    view = ModelParams.__new__(ModelParams)
    view.arch = {"kind": "composite", "parts": {"agent": agent.arch, "mixer": mixer.arch}}
    view.tensors = {**{f"agent.{k}": t for k, t in agent.tensors.items()},
                    **{f"mixer.{k}": t for k, t in mixer.tensors.items()}}
    return view


def unroll(agent: ModelParams, inputs: np.ndarray):
    """Agent network over a padded batch. ``inputs``: (B, T+1, n, in).

    Returns a list over time of (B*n, A) utility tensors.
    """
    B, T1, n, _ = inputs.shape
    h = init_hidden(B * n, agent.arch["parts"]["gru"]["hidden"])
    out = []
    for t in range(T1):
        q, h = agent_step(agent, inputs[:, t].reshape(B * n, -1), h)
        out.append(q)
    return out


def td_targets(rewards, terminal, next_values, gamma: float) -> np.ndarray:
    return np.asarray(rewards) + gamma * (1.0 - np.asarray(terminal, dtype=np.float64)) * np.asarray(next_values)


def masked_mse(q_tot: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean squared TD error over valid steps."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.sum() <= 0:
        raise EmptyBatchError("no valid steps in batch")
    err = (q_tot - targets) * mask
    return dc.tsum(dc.square(err)) / float(mask.sum())


def last_actions_of(actions: np.ndarray) -> np.ndarray:
    """Shift (B, T, n) actions right by one step, filling t=0 with -1; result (B, T+1, n)."""
    B, T, n = actions.shape
    out = np.full((B, T + 1, n), -1, dtype=np.int64)
    out[:, 1:] = actions
    return out


def td_loss(learner: Learner, batch: EpisodeBatch) -> tuple:
    """Build the TD loss graph. Returns (loss tensor, info dict)."""
    if batch.size == 0:
        raise EmptyBatchError("empty batch")
    B, T, n = batch.actions.shape
    A = learner.n_actions
    inputs = build_agent_inputs(batch.obs, last_actions_of(batch.actions), A)
    qs = unroll(learner.agent, inputs)
    with dc.no_grad():
        tq = unroll(learner.target_agent, inputs)
    # chosen utilities for t < T, stacked time-major into (T*B, n)
    chosen = []
    for t in range(T):
        a = batch.actions[:, t].reshape(B * n, 1)
        chosen.append(dc.reshape(dc.take_along(qs[t], a, axis=1), (B, n)))
    chosen = dc.concat(chosen, axis=0)
    states = batch.states[:, :T].transpose(1, 0, 2).reshape(T * B, -1)
    q_tot = mix(chosen, states, learner.mixer)
    with dc.no_grad():
        nxt = np.stack([greedy_values(tq[t + 1].data.reshape(B, n, A), batch.avail[:, t + 1])
                        for t in range(T)])                      # (T, B, n)
        next_states = batch.states[:, 1:T + 1].transpose(1, 0, 2).reshape(T * B, -1)
        q_next = mix(nxt.reshape(T * B, n), next_states, learner.target_mixer).data
    targets = td_targets(batch.rewards.T.reshape(-1), batch.terminal.T.reshape(-1), q_next, learner.gamma)
    loss = masked_mse(q_tot, targets, batch.mask.T.reshape(-1))
    return loss, {"q_tot": q_tot.data, "targets": targets}


def greedy_values(utilities: np.ndarray, avail: np.ndarray) -> np.ndarray:
    return np.where(avail, utilities, -np.inf).max(axis=-1)


def td_update(learner: Learner, batch: EpisodeBatch) -> float:
    """One TD step on the online networks followed by the target EMA."""
    loss, _ = td_loss(learner, batch)
    joint = learner.joint()
    grads = dc.grad(loss, joint)
    if learner.grad_clip:
        dc.clip_grad_norm(grads, learner.grad_clip)
    dc.rmsprop_step(joint, grads, learner.opt)
    sync_target(learner.agent, learner.target_agent, learner.tau)
    sync_target(learner.mixer, learner.target_mixer, learner.tau)
    learner.updates += 1
    return float(loss.data)


def sync_target(params: ModelParams, target: ModelParams, c: float) -> ModelParams:
    if not 0.0 < c <= 1.0:
        raise ValueError("mixing coefficient must lie in (0, 1]")
    for k, t in target.tensors.items():
        src = params.tensors[k].data
        t.data = src.copy() if c == 1.0 else (1.0 - c) * t.data + c * src
    return target
