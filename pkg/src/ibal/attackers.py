"""Attack constructions: group partitions, MI-guided masking, the MI-minimising
action attacker, the adaptive attack probability, and baseline attacks."""
from __future__ import annotations

import collections
import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import diffcore as dc
from . import qmix
from .miest import ActionReconModel, DimMIScoreTable, action_level_mi


# partitions -----------------------------------------------------------------
@dataclass(frozen=True)
class GroupPartition:
    g1: tuple
    g2: tuple
    K: int

    def __post_init__(self):
        if set(self.g1) & set(self.g2):
            raise ValueError("groups overlap")
        if len(self.g1) > self.K:
            raise ValueError("|G1| exceeds K")

    @property
    def n(self) -> int:
        return len(self.g1) + len(self.g2)


def sample_partition(n: int, K: int, rng: np.random.Generator) -> GroupPartition:
    """k ~ U{0..K}, then G1 uniform among size-k subsets."""
    if not 0 <= K <= n // 2:
        raise ValueError(f"K={K} outside [0, {n // 2}] for n={n}")
    k = int(rng.integers(0, K + 1))
    g1 = tuple(sorted(int(i) for i in rng.choice(n, size=k, replace=False))) if k else ()
    g2 = tuple(i for i in range(n) if i not in g1)
    return GroupPartition(g1, g2, K)


# observation masks ----------------------------------------------------------
@dataclass
class MaskSet:
    dims: dict          # agent -> sorted int array
    L: int

    @classmethod
    def empty(cls) -> "MaskSet":
        return cls({}, 0)

    def for_agent(self, i: int) -> np.ndarray:
        return self.dims.get(i, np.zeros(0, dtype=np.int64))


def top_l(scores: np.ndarray, L: int) -> np.ndarray:
    """Indices of the L largest scores; ties go to the lowest index."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    return np.sort(order[:L])


def select_mask(table: DimMIScoreTable, partition: GroupPartition, L: int,
                symmetric: bool = True) -> MaskSet:
    d = table.scores.shape[1]
    if L > d:
        raise ValueError(f"L={L} exceeds observation dimension {d}")
    if L == 0 or not partition.g1 or not partition.g2:
        return MaskSet({}, L)
    dims = {i: top_l(table.aggregate(i, partition.g2), L) for i in partition.g1}
    if symmetric:
        for j in partition.g2:
            dims[j] = top_l(table.aggregate(j, partition.g1), L)
    return MaskSet(dims, L)


def random_mask(partition: GroupPartition, L: int, obs_dim: int, rng: np.random.Generator,
                symmetric: bool = True) -> MaskSet:
    if L == 0 or not partition.g1 or not partition.g2:
        return MaskSet({}, L)
    agents = list(partition.g1) + (list(partition.g2) if symmetric else [])
    return MaskSet({i: np.sort(rng.choice(obs_dim, size=L, replace=False)) for i in agents}, L)


def apply_obs_mask(obs: np.ndarray, mask: MaskSet) -> np.ndarray:
    out = np.array(obs, dtype=np.float64, copy=True)
    for i, dims in mask.dims.items():
        out[i, dims] = 0.0
    return out


# adaptive attack probability ------------------------------------------------
@dataclass
class AttackProbState:
    p_max: float
    alpha: float = 1.1
    eta: float = 0.8
    window: int = 100
    history: collections.deque = field(default_factory=collections.deque)

    def __post_init__(self):
        if self.alpha <= 1:
            raise ValueError("alpha must exceed 1")
        if not 0 < self.eta < 1:
            raise ValueError("eta must lie in (0, 1)")
        self.history = collections.deque(self.history, maxlen=self.window)

    @property
    def sigma_bar(self) -> float:
        return float(np.mean(self.history)) if self.history else 0.0

    def copy(self) -> "AttackProbState":
        return AttackProbState(self.p_max, self.alpha, self.eta, self.window, collections.deque(self.history))


def update_pact(state: AttackProbState, success: float) -> AttackProbState:
    """Push one episode outcome; grow the cap by alpha when the windowed success rate reaches eta."""
    nxt = state.copy()
    nxt.history.append(float(success))
    if nxt.sigma_bar >= nxt.eta:
        nxt.p_max = min(1.0, nxt.alpha * nxt.p_max)
    return nxt


def sample_pact(state: AttackProbState, K: int, rng: np.random.Generator,
                lo: Optional[float] = None) -> float:
    """Uniform draw on [lo, P_act^max] with lo = 1/K unless overridden."""
    if K == 0:
        return 0.0
    lo = 1.0 / K if lo is None else lo
    # the draw is always made so the stream does not depend on the cap
    u = rng.random()
    if state.p_max <= lo:
        return lo
    return lo + u * (state.p_max - lo)


# action attacks -------------------------------------------------------------
def ib_action_attack(a_hat, partition: GroupPartition, model: ActionReconModel, p_act: float,
                     avail: np.ndarray, hidden: np.ndarray, rng: np.random.Generator):
    """Replace G1 actions (ascending index) by their MI-minimising available action.

    Returns (executed joint action, fired flag). One uniform draw per call.
    """
    a = np.array(a_hat, dtype=np.int64, copy=True)
    fired = bool(rng.random() < p_act)
    if not fired or not partition.g1 or not partition.g2:
        return a, fired
    for i in sorted(partition.g1):
        choices = np.flatnonzero(avail[i])
        cands = np.repeat(a[None, :], len(choices), axis=0)
        cands[:, i] = choices
        mi = action_level_mi(model, cands, hidden, partition.g1, partition.g2)
        a[i] = choices[int(np.argmin(mi))]
    return a, fired


def joint_argmin_action(a_hat, partition: GroupPartition, model: ActionReconModel,
                        avail: np.ndarray, hidden: np.ndarray) -> np.ndarray:
    """Exhaustive argmin over the G1 action product (|G1| <= 2 only)."""
    if len(partition.g1) > 2:
        raise ValueError("joint argmin is only exposed for |G1| <= 2")
    a = np.array(a_hat, dtype=np.int64, copy=True)
    g1 = sorted(partition.g1)
    if not g1 or not partition.g2:
        return a
    combos = list(itertools.product(*[np.flatnonzero(avail[i]) for i in g1]))
    cands = np.repeat(a[None, :], len(combos), axis=0)
    cands[:, g1] = np.array(combos)
    mi = action_level_mi(model, cands, hidden, partition.g1, partition.g2)
    return cands[int(np.argmin(mi))]


def rand_act(a_hat, avail: np.ndarray, prob: float, rng: np.random.Generator):
    a = np.array(a_hat, dtype=np.int64, copy=True)
    u, who, pick = rng.random(), int(rng.integers(0, len(a))), rng.random()
    fired = bool(u < prob)
    if fired:
        choices = np.flatnonzero(avail[who])
        a[who] = choices[min(int(pick * len(choices)), len(choices) - 1)]
    return a, fired


def value_min_act(a_hat, utilities: np.ndarray, avail: np.ndarray, prob: float,
                  rng: np.random.Generator):
    a = np.array(a_hat, dtype=np.int64, copy=True)
    u, who = rng.random(), int(rng.integers(0, len(a)))
    fired = bool(u < prob)
    if fired:
        a[who] = int(np.argmin(np.where(avail[who], utilities[who], np.inf)))
    return a, fired


# observation attacks --------------------------------------------------------
def rand_obs(obs: np.ndarray, sigma: float, rng: np.random.Generator, dims=None) -> np.ndarray:
    out = np.array(obs, dtype=np.float64, copy=True)
    who = int(rng.integers(0, out.shape[0]))
    noise = rng.normal(0.0, 1.0, size=out.shape[1]) * sigma
    if dims is None:
        out[who] += noise
    else:
        out[who, dims] += noise[dims]
    return out


def obs_gradient(agent: dc.ModelParams, obs_i: np.ndarray, agent_index: int, n_agents: int,
                 last_action: int, h_prev: np.ndarray, n_actions: int, action: Optional[int] = None):
    """Gradient of Q^i(tau, a) with respect to o^i; ``a`` defaults to the greedy action."""
    if agent is None:
        raise ValueError("gradient attacks need differentiable policy access")
    o = dc.Tensor(np.asarray(obs_i, dtype=np.float64)[None, :], requires_grad=True)
    rest = qmix.build_agent_inputs(np.zeros((1, n_agents, 0)), np.array([[last_action] * n_agents]),
                                   n_actions)[0, agent_index][None, :]
    x = dc.concat([o, dc.Tensor(rest)], axis=1)
    q, _ = qmix.agent_step(agent, x, np.asarray(h_prev)[None, :])
    a = int(np.argmax(q.data[0])) if action is None else int(action)
    return dc.grad(q[0, a], o)[0], a


def fgsm_obs(obs: np.ndarray, eps: float, agent: dc.ModelParams, who: int, last_actions,
             h_prev: np.ndarray, n_actions: int, dims=None) -> np.ndarray:
    """o~ = o - eps * sign(grad_o Q^i(tau, a^i)) for agent ``who``."""
    out = np.array(obs, dtype=np.float64, copy=True)
    g, _ = obs_gradient(agent, out[who], who, out.shape[0], int(last_actions[who]), h_prev[who], n_actions)
    step = -eps * np.sign(g)
    if dims is None:
        out[who] += step
    else:
        out[who, dims] += step[dims]
    return out


# episode-level attacker handles ---------------------------------------------
@dataclass
class StepContext:
    """What attackers may look at when perturbing one step."""

    avail: np.ndarray
    hidden_prev: np.ndarray     # agent hiddens before this step (n, H)
    hidden: Optional[np.ndarray] = None   # hiddens after reading this step's observation
    last_actions: Optional[np.ndarray] = None
    utilities: Optional[np.ndarray] = None
    agent: Optional[dc.ModelParams] = None
    n_actions: int = 0


OBS_MODES = ("identity", "mask", "noise-dims", "fgsm-dims", "rand-obs", "fgsm")
ACT_MODES = ("identity", "ib", "rand-act", "value-min")


@dataclass
class ObsAttacker:
    mode: str = "identity"
    mask: MaskSet = field(default_factory=MaskSet.empty)
    sigma: float = 0.1
    eps: float = 0.1

    def __post_init__(self):
        if self.mode not in OBS_MODES:
            raise ValueError(f"unknown observation attack {self.mode!r}")

    def __call__(self, obs: np.ndarray, ctx: StepContext, rng: np.random.Generator) -> np.ndarray:
        m = self.mode
        if m == "identity":
            return np.array(obs, dtype=np.float64, copy=True)
        if m == "mask":
            return apply_obs_mask(obs, self.mask)
        if m == "rand-obs":
            return rand_obs(obs, self.sigma, rng)
        if m == "fgsm":
            who = int(rng.integers(0, obs.shape[0]))
            return fgsm_obs(obs, self.eps, ctx.agent, who, ctx.last_actions, ctx.hidden_prev, ctx.n_actions)
        out = np.array(obs, dtype=np.float64, copy=True)
        for i, dims in sorted(self.mask.dims.items()):
            if m == "noise-dims":
                out[i, dims] += rng.normal(0.0, self.sigma, size=len(dims))
            else:
                out = fgsm_obs(out, self.eps, ctx.agent, i, ctx.last_actions, ctx.hidden_prev,
                               ctx.n_actions, dims=dims)
        return out


@dataclass
class ActionAttacker:
    mode: str = "identity"
    partition: Optional[GroupPartition] = None
    model: Optional[ActionReconModel] = None
    p_act: float = 0.0
    prob: float = 0.3

    def __post_init__(self):
        if self.mode not in ACT_MODES:
            raise ValueError(f"unknown action attack {self.mode!r}")

    def __call__(self, a_hat, ctx: StepContext, rng: np.random.Generator):
        m = self.mode
        if m == "identity":
            return np.array(a_hat, dtype=np.int64, copy=True), False
        if m == "ib":
            return ib_action_attack(a_hat, self.partition, self.model, self.p_act, ctx.avail,
                                    ctx.hidden, rng)
        if m == "rand-act":
            return rand_act(a_hat, ctx.avail, self.prob, rng)
        return value_min_act(a_hat, ctx.utilities, ctx.avail, self.prob, rng)


IDENTITY_OBS = ObsAttacker()
IDENTITY_ACT = ActionAttacker()


# attack specifications -------------------------------------------------------
ATTACK_KINDS = ("none", "interaction-breaking", "rand-obs", "rand-act", "rand-combined", "fgsm", "value-min")


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    sigma: float = 0.1
    prob: float = 0.3
    eps: float = 0.1
    K: int = 1
    L: int = 0
    p_act: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.sigma < 0 or self.eps < 0 or not 0 <= self.prob <= 1:
            raise ValueError("attack parameters out of range")
        if self.p_act is not None and not 0 <= self.p_act <= 1:
            raise ValueError("p_act must lie in [0, 1]")


def baseline_attackers(spec: AttackSpec) -> tuple:
    """Observation and action handles for the non-MI baselines."""
    k = spec.kind
    if k == "interaction-breaking":
        raise ValueError("interaction-breaking attackers are built per episode")
    obs = ObsAttacker("identity")
    act = ActionAttacker("identity")
    if k in ("rand-obs", "rand-combined"):
        obs = ObsAttacker("rand-obs", sigma=spec.sigma)
    if k in ("rand-act", "rand-combined"):
        act = ActionAttacker("rand-act", prob=spec.prob)
    if k == "fgsm":
        obs = ObsAttacker("fgsm", eps=spec.eps)
    if k == "value-min":
        act = ActionAttacker("value-min", prob=spec.prob)
    return obs, act
