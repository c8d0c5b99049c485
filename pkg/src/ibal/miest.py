"""Mutual-information estimators.

* A conditional diagonal-Gaussian predictor scored with the CLUB sample
  estimate gives per-dimension observation-level MI.
* A masked action-reconstruction model gives action-level MI as a KL
  divergence between conditional and marginal action distributions.
* A group model conditioned on the whole joint action gives the group-wise
  estimate used by the redundancy diagnostic.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import diffcore as dc
from .diffcore import ModelParams, OptimizerState

LOGVAR_MIN, LOGVAR_MAX = -8.0, 4.0
MIN_BATCH = 32
LOG_2PI = float(np.log(2.0 * np.pi))


class BatchTooSmallError(ValueError):
    pass


def one_hot(idx, size: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros(idx.shape + (size,))
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random index map with no fixed points (a random n-cycle)."""
    if n < 2:
        raise BatchTooSmallError("need at least two samples to pair negatives")
    p = rng.permutation(n)
    out = np.empty(n, dtype=np.int64)
    out[p] = np.roll(p, -1)
    return out


# conditional Gaussian predictor ---------------------------------------------
@dataclass
class GaussianModel:
    """Predicts a diagonal Gaussian over ``out_dim`` targets from features."""

    params: ModelParams
    opt: OptimizerState
    out_dim: int
    clamped_fraction: float = 0.0

    @classmethod
    def create(cls, in_dim: int, out_dim: int, rng: np.random.Generator, hidden: int = 64,
               lr: float = 1e-3) -> "GaussianModel":
        arch = dc.mlp_arch([in_dim, hidden, hidden, 2 * out_dim], activation="elu")
        params = dc.init_params(arch, rng)
        return cls(params, OptimizerState.for_params(params, lr=lr), out_dim)

    def predict(self, x):
        out = dc.mlp_forward(self.params, x)
        mu = out[:, :self.out_dim]
        raw = out[:, self.out_dim:]
        return mu, dc.clip(raw, LOGVAR_MIN, LOGVAR_MAX), raw

    def nll(self, x, y) -> dc.Tensor:
        """Mean (over samples and dimensions) Gaussian negative log-likelihood."""
        mu, logvar, raw = self.predict(x)
        self.clamped_fraction = float(((raw.data < LOGVAR_MIN) | (raw.data > LOGVAR_MAX)).mean())
        per = 0.5 * (dc.square(mu - y) * dc.exp(logvar * -1.0) + logvar + LOG_2PI)
        return dc.tmean(per)

    def train_step(self, x, y) -> float:
        loss = self.nll(x, y)
        grads = dc.grad(loss, self.params)
        dc.clip_grad_norm(grads, 10.0)
        dc.rmsprop_step(self.params, grads, self.opt)
        return float(loss.data)

    def log_density(self, x, y) -> np.ndarray:
        """Per-dimension log density, shape (N, out_dim)."""
        with dc.no_grad():
            mu, logvar, _ = self.predict(x)
        mu, logvar = mu.data, logvar.data
        return -0.5 * ((np.asarray(y) - mu) ** 2 * np.exp(-logvar) + logvar + LOG_2PI)

    def copy(self) -> "GaussianModel":
        return GaussianModel(self.params.copy(), self.opt.copy(), self.out_dim)


def club_scores(model: GaussianModel, x_pos, x_negs, y) -> np.ndarray:
    """Per-dimension CLUB estimate: mean log q(y|x+) - mean log q(y|x-).

    ``x_negs`` is a list of negative feature matrices (each row with the
    conditioning variable taken from another sample). Dimensions whose target
    is constant over the batch score exactly zero; negatives are clamped to 0.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape[0] < MIN_BATCH:
        raise BatchTooSmallError(f"CLUB needs at least {MIN_BATCH} samples, got {y.shape[0]}")
    pos = model.log_density(x_pos, y).mean(axis=0)
    neg = np.mean([model.log_density(xn, y).mean(axis=0) for xn in x_negs], axis=0)
    scores = pos - neg
    scores[np.ptp(y, axis=0) == 0] = 0.0
    return np.maximum(scores, 0.0)


def club_scalar(model: GaussianModel, x, y, rng: np.random.Generator, n_neg: int = 4) -> np.ndarray:
    """CLUB for a plain (x, y) sample where negatives re-pair x across rows."""
    x = np.asarray(x, dtype=np.float64)
    negs = [x[derangement(len(x), rng)] for _ in range(n_neg)]
    return club_scores(model, x, negs, y)


# transition store -----------------------------------------------------------
@dataclass
class MIData:
    """Aligned per-step arrays. ``obs``/``next_obs`` are clean observations."""

    obs: np.ndarray        # (N, n, d)
    next_obs: np.ndarray   # (N, n, d)
    act_exec: np.ndarray   # (N, n)
    act_int: np.ndarray    # (N, n)
    hidden: np.ndarray     # (N, n, H)

    def __len__(self) -> int:
        return len(self.act_exec)

    def tail(self, k: int) -> "MIData":
        return MIData(self.obs[-k:], self.next_obs[-k:], self.act_exec[-k:], self.act_int[-k:],
                      self.hidden[-k:])

    def take(self, idx) -> "MIData":
        return MIData(self.obs[idx], self.next_obs[idx], self.act_exec[idx], self.act_int[idx],
                      self.hidden[idx])

    def with_next_obs(self, next_obs: np.ndarray) -> "MIData":
        return MIData(self.obs, next_obs, self.act_exec, self.act_int, self.hidden)


class TransitionStore:
    """Bounded FIFO of the most recent transitions for MI-model training,
    kept in preallocated ring arrays."""

    def __init__(self, capacity: int = 4096):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._cols: Optional[list] = None
        self._next = 0
        self._size = 0
        self._cache: Optional[MIData] = None

    def __len__(self) -> int:
        return self._size

    def push(self, obs, next_obs, act_exec, act_int, hidden) -> None:
        row = (obs, next_obs, act_exec, act_int, hidden)
        if self._cols is None:
            self._cols = [np.empty((self.capacity,) + np.shape(v), dtype=np.asarray(v).dtype) for v in row]
        for col, v in zip(self._cols, row):
            col[self._next] = v
        self._next = (self._next + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)
        self._cache = None

    def data(self) -> MIData:
        """Rows in insertion order, oldest first."""
        if self._cache is None:
            if self._cols is None:
                raise ValueError("transition store is empty")
            if self._size < self.capacity:
                cols = [c[:self._size].copy() for c in self._cols]
            else:
                order = np.r_[self._next:self.capacity, 0:self._next]
                cols = [c[order] for c in self._cols]
            self._cache = MIData(*cols)
        return self._cache


# observation model ----------------------------------------------------------
@dataclass
class ObsReconModel:
    """Shared pairwise predictor of o^i_{t+1} given (i, j, a^i, a^j, o^i_t, h^i_t)."""

    net: GaussianModel
    n_agents: int
    n_actions: int
    obs_dim: int
    hidden_dim: int

    @classmethod
    def create(cls, n_agents, n_actions, obs_dim, hidden_dim, rng, lr=1e-3, width=64) -> "ObsReconModel":
        in_dim = 2 * n_agents + 2 * n_actions + obs_dim + hidden_dim
        return cls(GaussianModel.create(in_dim, obs_dim, rng, hidden=width, lr=lr),
                   n_agents, n_actions, obs_dim, hidden_dim)

    def features(self, data: MIData, i, j, aj=None) -> np.ndarray:
        """Feature rows for observer ``i`` and actor ``j`` (scalars or per-row arrays)."""
        N = len(data)
        rows = np.arange(N)
        i = np.broadcast_to(np.asarray(i), (N,))
        j = np.broadcast_to(np.asarray(j), (N,))
        ai = data.act_exec[rows, i]
        aj = data.act_exec[rows, j] if aj is None else np.asarray(aj)
        return np.concatenate([one_hot(i, self.n_agents), one_hot(j, self.n_agents),
                               one_hot(ai, self.n_actions), one_hot(aj, self.n_actions),
                               data.obs[rows, i], data.hidden[rows, i]], axis=1)

    def train_step(self, data: MIData, rng: np.random.Generator, batch: int = 256) -> float:
        n = self.n_agents
        idx = rng.integers(0, len(data), size=batch)
        sub = data.take(idx)
        i = rng.integers(0, n, size=batch)
        j = (i + rng.integers(1, n, size=batch)) % n
        x = self.features(sub, i, j)
        y = sub.next_obs[np.arange(batch), i]
        return self.net.train_step(x, y)

    def pair_scores(self, data: MIData, i: int, j: int, rng: np.random.Generator,
                    n_neg: int = 4) -> np.ndarray:
        y = data.next_obs[:, i]
        pos = self.features(data, i, j)
        aj = data.act_exec[:, j]
        negs = [self.features(data, i, j, aj=aj[derangement(len(data), rng)]) for _ in range(n_neg)]
        return club_scores(self.net, pos, negs, y)


@dataclass
class DimMIScoreTable:
    scores: np.ndarray          # (n, d, n): observer i, dimension d, actor j
    refreshed_at: int = -1
    stale: bool = False

    def __post_init__(self):
        if not np.isfinite(self.scores).all():
            raise ValueError("score table must be finite")
        if (self.scores < 0).any():
            raise ValueError("scores are clamped below at 0")

    @classmethod
    def empty(cls, n_agents: int, obs_dim: int) -> "DimMIScoreTable":
        return cls(np.zeros((n_agents, obs_dim, n_agents)), -1, True)

    def normalized(self) -> np.ndarray:
        m = self.scores.max()
        return self.scores / m if m > 0 else self.scores.copy()

    def aggregate(self, i: int, others) -> np.ndarray:
        others = list(others)
        if not others:
            return np.zeros(self.scores.shape[1])
        return self.scores[i][:, others].sum(axis=1)


def refresh_score_table(model: ObsReconModel, data: MIData, previous: DimMIScoreTable,
                        episode: int, rng: np.random.Generator, per_pair: int = 512,
                        n_neg: int = 4) -> DimMIScoreTable:
    """Rebuild the table for every ordered pair i != j from clean observations."""
    if len(data) < MIN_BATCH:
        return DimMIScoreTable(previous.scores.copy(), previous.refreshed_at, True)
    recent = data.tail(per_pair)
    n = model.n_agents
    scores = np.zeros((n, model.obs_dim, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                scores[i, :, j] = model.pair_scores(recent, i, j, rng, n_neg)
    return DimMIScoreTable(scores, episode, False)


def estimate_masked_scores(model: ObsReconModel, data: MIData, masks: dict, rng,
                           per_pair: int = 512, n_neg: int = 4) -> DimMIScoreTable:
    """Re-score after zero-forcing each agent's masked dimensions in its observations."""
    obs, nxt = data.obs.copy(), data.next_obs.copy()
    for i, dims in masks.items():
        dims = np.asarray(dims, dtype=np.int64)
        obs[:, i, dims] = 0.0
        nxt[:, i, dims] = 0.0
    masked = MIData(obs, nxt, data.act_exec, data.act_int, data.hidden)
    return refresh_score_table(model, masked, DimMIScoreTable.empty(model.n_agents, model.obs_dim),
                               0, rng, per_pair, n_neg)


# action model ---------------------------------------------------------------
@dataclass
class ActionReconModel:
    """Per-agent categorical predictor of the joint action from a partially
    zero-masked joint action and the agents' hidden states."""

    params: ModelParams
    opt: OptimizerState
    n_agents: int
    n_actions: int
    hidden_dim: int

    @classmethod
    def create(cls, n_agents, n_actions, hidden_dim, rng, lr=1e-3, width=64) -> "ActionReconModel":
        in_dim = n_agents * n_actions + n_agents * hidden_dim
        arch = dc.mlp_arch([in_dim, width, width, n_agents * n_actions], activation="elu")
        params = dc.init_params(arch, rng)
        return cls(params, OptimizerState.for_params(params, lr=lr), n_agents, n_actions, hidden_dim)

    def inputs(self, joint, hidden, visible) -> np.ndarray:
        """``joint`` (N, n) actions, ``hidden`` (N, n, H), ``visible`` (N, n) bool; hidden-from-input
        agents get an all-zero one-hot."""
        joint = np.asarray(joint)
        oh = one_hot(joint, self.n_actions) * np.asarray(visible, dtype=np.float64)[..., None]
        N = joint.shape[0]
        return np.concatenate([oh.reshape(N, -1), np.asarray(hidden).reshape(N, -1)], axis=1)

    def log_probs_tensor(self, x) -> dc.Tensor:
        logits = dc.mlp_forward(self.params, x)
        N = logits.shape[0]
        return dc.log_softmax(dc.reshape(logits, (N, self.n_agents, self.n_actions)), axis=-1)

    def log_probs(self, x) -> np.ndarray:
        with dc.no_grad():
            return self.log_probs_tensor(x).data

    def ce_loss(self, joint, hidden, visible, target_mask) -> dc.Tensor:
        x = self.inputs(joint, hidden, visible)
        lp = self.log_probs_tensor(x)
        picked = dc.reshape(dc.take_along(lp, np.asarray(joint)[..., None], axis=-1), tuple(np.shape(joint)))
        w = np.asarray(target_mask, dtype=np.float64)
        return dc.tsum(picked * w) * (-1.0 / max(w.sum(), 1.0))

    def train_step(self, joint, hidden, visible, target_mask) -> float:
        loss = self.ce_loss(joint, hidden, visible, target_mask)
        grads = dc.grad(loss, self.params)
        dc.clip_grad_norm(grads, 10.0)
        dc.rmsprop_step(self.params, grads, self.opt)
        return float(loss.data)

    def train_on(self, data: MIData, K: int, rng: np.random.Generator, batch: int = 256) -> float:
        """One step over random rows, each with its own sampled partition (k may be 0)."""
        idx = rng.integers(0, len(data), size=batch)
        visible = sample_visible(batch, self.n_agents, K, rng)
        return self.train_step(data.act_int[idx], data.hidden[idx], visible, ~visible)

    def copy(self) -> "ActionReconModel":
        return ActionReconModel(self.params.copy(), self.opt.copy(), self.n_agents, self.n_actions,
                                self.hidden_dim)


def sample_visible(rows: int, n: int, K: int, rng: np.random.Generator) -> np.ndarray:
    """Per row: k ~ U{0..K}, then a uniformly random size-k set of visible (G1) agents."""
    k = rng.integers(0, K + 1, size=rows)
    rank = np.argsort(rng.random((rows, n)), axis=1).argsort(axis=1)
    return rank < k[:, None]


def kl_categorical(logp: np.ndarray, logq: np.ndarray) -> np.ndarray:
    """KL(p || q) along the last axis from log-probabilities.

    Tiny negative values from rounding are clamped to zero.
    """
    p = np.exp(logp)
    return np.maximum((p * (logp - logq)).sum(axis=-1), 0.0)


def action_level_mi(model: ActionReconModel, candidates, hidden, g1, g2) -> np.ndarray:
    """Sum over j in G2 of KL(p(a^j | a^{G1}, tau) || p(a^j | nothing, tau)).

    ``candidates`` is (C, n): joint actions whose G1 entries are evaluated;
    ``hidden`` is (n, H). Returns one value per candidate.
    """
    candidates = np.atleast_2d(np.asarray(candidates))
    C, n = candidates.shape
    g1, g2 = list(g1), list(g2)
    if not g2 or not g1:
        return np.zeros(C)
    h = np.broadcast_to(np.asarray(hidden), (C,) + np.shape(hidden))
    visible = np.zeros((C, n), dtype=bool)
    visible[:, g1] = True
    cond = model.log_probs(model.inputs(candidates, h, visible))
    marg = model.log_probs(model.inputs(candidates[:1], h[:1], np.zeros((1, n), dtype=bool)))
    kl = kl_categorical(cond[:, g2], np.broadcast_to(marg[:, g2], cond[:, g2].shape))
    return kl.sum(axis=1)


# redundancy -----------------------------------------------------------------
@dataclass
class RedundancyReport:
    groupwise: float
    individual: float
    residual: float

    def __post_init__(self):
        if not all(np.isfinite([self.groupwise, self.individual, self.residual])):
            raise ValueError("redundancy report must be finite")


def make_report(groupwise: float, individual: float) -> RedundancyReport:
    return RedundancyReport(groupwise, individual, groupwise - individual)


class GroupObsModel:
    """Predicts the G1 agents' next observations from the full joint action."""

    MAX_AGENTS = 3

    def __init__(self, n_agents, n_actions, obs_dim, hidden_dim, g1, rng, lr=1e-3, width=64):
        if n_agents > self.MAX_AGENTS:
            raise ValueError(f"redundancy diagnostic supports at most {self.MAX_AGENTS} agents")
        self.g1 = sorted(int(i) for i in g1)
        self.g2 = [j for j in range(n_agents) if j not in self.g1]
        if not self.g1 or not self.g2:
            raise ValueError("both groups must be non-empty")
        self.n_agents, self.n_actions = n_agents, n_actions
        in_dim = n_agents * n_actions + len(self.g1) * (obs_dim + hidden_dim)
        self.net = GaussianModel.create(in_dim, len(self.g1) * obs_dim, rng, hidden=width, lr=lr)

    def features(self, data: MIData, g2_actions=None) -> np.ndarray:
        joint = data.act_exec.copy()
        if g2_actions is not None:
            joint[:, self.g2] = g2_actions
        N = len(data)
        return np.concatenate([one_hot(joint, self.n_actions).reshape(N, -1),
                               data.obs[:, self.g1].reshape(N, -1),
                               data.hidden[:, self.g1].reshape(N, -1)], axis=1)

    def target(self, data: MIData) -> np.ndarray:
        return data.next_obs[:, self.g1].reshape(len(data), -1)

    def train_step(self, data: MIData, rng, batch: int = 256) -> float:
        sub = data.take(rng.integers(0, len(data), size=batch))
        return self.net.train_step(self.features(sub), self.target(sub))

    def scores(self, data: MIData, rng, n_neg: int = 4) -> np.ndarray:
        g2a = data.act_exec[:, self.g2]
        negs = [self.features(data, g2a[derangement(len(data), rng)]) for _ in range(n_neg)]
        return club_scores(self.net, self.features(data), negs, self.target(data))


def redundancy_estimate(group: GroupObsModel, pair_model: ObsReconModel, data: MIData,
                        rng: np.random.Generator, n_neg: int = 4) -> RedundancyReport:
    """Group-wise CLUB estimate minus the summed dimension-wise scores over G1 x G2."""
    groupwise = float(group.scores(data, rng, n_neg).sum())
    individual = 0.0
    for i in group.g1:
        for j in group.g2:
            individual += float(pair_model.pair_scores(data, i, j, rng, n_neg).sum())
    return make_report(groupwise, individual)
