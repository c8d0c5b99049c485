"""Induced environment: a base environment with the observation and action
attackers folded into its dynamics, plus episode rollouts."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import diffcore as dc
from . import qmix
from .attackers import IDENTITY_ACT, IDENTITY_OBS, ActionAttacker, ObsAttacker, StepContext


@dataclass
class Transition:
    obs: np.ndarray          # masked observation presented to the agents
    clean_obs: np.ndarray
    a_hat: np.ndarray        # intermediate (policy) joint action
    a_tilde: np.ndarray      # executed joint action
    reward: float
    avail: np.ndarray
    state: np.ndarray
    terminated: bool
    truncated: bool
    fired: bool
    hidden: np.ndarray       # agent hiddens after reading ``obs``


@dataclass
class EpisodeTrace:
    seed: int
    steps: list = field(default_factory=list)
    final_obs: Optional[np.ndarray] = None
    final_clean_obs: Optional[np.ndarray] = None
    final_avail: Optional[np.ndarray] = None
    final_state: Optional[np.ndarray] = None
    success: bool = False

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def episode_return(self) -> float:
        return float(sum(s.reward for s in self.steps))

    def to_episode(self, replay_action: str = "intermediate", timeout_terminal: bool = True) -> qmix.Episode:
        """Replay episode. With ``timeout_terminal`` the step-limit step is not bootstrapped."""
        if replay_action not in ("intermediate", "executed"):
            raise ValueError("replay_action must be 'intermediate' or 'executed'")
        key = "a_hat" if replay_action == "intermediate" else "a_tilde"
        s = self.steps
        return qmix.Episode(
            obs=np.stack([t.obs for t in s] + [self.final_obs]),
            actions=np.stack([getattr(t, key) for t in s]),
            avail=np.stack([t.avail for t in s] + [self.final_avail]),
            states=np.stack([t.state for t in s] + [self.final_state]),
            rewards=np.array([t.reward for t in s]),
            terminal=np.array([t.terminated and (timeout_terminal or not t.truncated) for t in s]),
            complete=bool(s) and s[-1].terminated,
        )

    def mi_rows(self):
        """(clean o_t, clean o_{t+1}, executed, intermediate, hidden) per step."""
        clean = [t.clean_obs for t in self.steps] + [self.final_clean_obs]
        for k, t in enumerate(self.steps):
            yield clean[k], clean[k + 1], t.a_tilde, t.a_hat, t.hidden

    def to_jsonl(self, path) -> None:
        with open(path, "a", encoding="utf-8") as fh:
            for k, t in enumerate(self.steps):
                fh.write(json.dumps({
                    "seed": self.seed, "t": k, "obs": t.obs.tolist(), "a_hat": t.a_hat.tolist(),
                    "a_tilde": t.a_tilde.tolist(), "reward": t.reward, "attack_fired": t.fired,
                    "terminated": t.terminated}) + "\n")


class InducedEnv:
    """Base environment composed with attackers.

    ``reset`` presents attacked initial observations; ``step(a_hat)`` draws the
    executed action from the action attacker, advances the base environment
    with it and returns the attacked next observation and the base reward.
    """

    def __init__(self, env, obs_attacker: ObsAttacker = IDENTITY_OBS,
                 act_attacker: ActionAttacker = IDENTITY_ACT, rng: Optional[np.random.Generator] = None):
        self.env = env
        self.obs_attacker = obs_attacker
        self.act_attacker = act_attacker
        self.rng = rng if rng is not None else np.random.default_rng(0)
        for i, dims in getattr(obs_attacker, "mask").dims.items():
            if not 0 <= i < env.n_agents or (len(dims) and max(dims) >= env.obs_dim):
                raise ValueError("observation mask does not fit the environment")
        self.state = None
        self.clean_obs = None
        self.last_executed = None
        self._avail = None

    @property
    def n_agents(self) -> int:
        return self.env.n_agents

    @property
    def n_actions(self) -> int:
        return self.env.n_actions

    def avail(self) -> np.ndarray:
        if self._avail is None:
            self._avail = self.env.avail_all(self.state)
        return self._avail

    def reset(self, seed: int, ctx: Optional[StepContext] = None) -> np.ndarray:
        self.state, self.clean_obs = self.env.reset(seed)
        self.last_executed = None
        self._avail = None
        return self._present(ctx)

    def _present(self, ctx: Optional[StepContext]) -> np.ndarray:
        ctx = ctx if ctx is not None else StepContext(avail=None, hidden_prev=None)
        ctx = dataclasses.replace(ctx, avail=self.avail())
        return self.obs_attacker(self.clean_obs, ctx, self.rng)

    def step(self, a_hat, ctx: StepContext, next_ctx: Optional[StepContext] = None):
        """Returns (next attacked obs, reward, terminated, info)."""
        ctx = dataclasses.replace(ctx, avail=self.avail())
        a_tilde, fired = self.act_attacker(a_hat, ctx, self.rng)
        res = self.env.step(self.state, a_tilde)
        self.state, self.clean_obs, self.last_executed = res.state, res.obs, a_tilde
        self._avail = None
        if next_ctx is not None and next_ctx.last_actions is None:
            next_ctx = dataclasses.replace(next_ctx, last_actions=np.asarray(a_tilde, dtype=np.int64))
        obs = self._present(next_ctx)
        info = {"a_tilde": a_tilde, "fired": fired, "success": res.success, "truncated": res.truncated,
                "clean_obs": res.obs, "raw_reward": res.raw_reward}
        return obs, res.reward, res.terminated, info


def rollout_episode(env, agent: dc.ModelParams, epsilon: float, seed: int,
                    explore_rng: np.random.Generator, obs_attacker: ObsAttacker = IDENTITY_OBS,
                    act_attacker: ActionAttacker = IDENTITY_ACT,
                    attack_rng: Optional[np.random.Generator] = None,
                    replay_action: str = "intermediate") -> EpisodeTrace:
    """Run one episode of the policy inside the induced environment.

    ``env`` may be a base environment (it is wrapped) or an InducedEnv.
    """
    ienv = env if isinstance(env, InducedEnv) else InducedEnv(env, obs_attacker, act_attacker, attack_rng)
    base = ienv.env
    n, A = base.n_agents, base.n_actions
    hsize = agent.arch["parts"]["gru"]["hidden"]
    h_prev = qmix.init_hidden(n, hsize)
    last = np.full(n, -1, dtype=np.int64)
    trace = EpisodeTrace(seed=seed)
    obs = ienv.reset(seed, StepContext(None, h_prev, last_actions=last, agent=agent, n_actions=A))
    while True:
        avail = ienv.avail()
        clean = ienv.clean_obs
        state_vec = base.state_vector(ienv.state)
        with dc.no_grad():
            q, h = qmix.agent_step(agent, qmix.build_agent_inputs(obs, last, A), h_prev)
        q, h = q.data, h.data
        a_hat = qmix.select_actions(q, avail, epsilon, explore_rng)
        ctx = StepContext(avail, h_prev, hidden=h, last_actions=last, utilities=q, agent=agent, n_actions=A)
        # the agent's previous-action input follows the replayed action variable
        nxt_last = a_hat if replay_action == "intermediate" else None
        nxt_obs, r, done, info = ienv.step(a_hat, ctx, _next_ctx(h, nxt_last, agent, A))
        learn_last = a_hat if replay_action == "intermediate" else info["a_tilde"]
        trace.steps.append(Transition(obs, clean, a_hat, info["a_tilde"], float(r), avail, state_vec,
                                      bool(done), info["truncated"], info["fired"], h))
        obs, h_prev, last = nxt_obs, h, np.asarray(learn_last, dtype=np.int64)
        if done:
            trace.final_obs = obs
            trace.final_clean_obs = ienv.clean_obs
            trace.final_avail = ienv.avail()
            trace.final_state = base.state_vector(ienv.state)
            trace.success = bool(info["success"])
            return trace


def _next_ctx(h, last, agent, A) -> StepContext:
    last = None if last is None else np.asarray(last, dtype=np.int64)
    return StepContext(None, h, last_actions=last, agent=agent, n_actions=A)


def direct_rollout(env, agent: dc.ModelParams, epsilon: float, seed: int,
                   explore_rng: np.random.Generator, obs_attacker: ObsAttacker,
                   act_attacker: ActionAttacker, attack_rng: np.random.Generator) -> list:
    """Hand-composed loop: f_adv, then the policy, then pi_adv, then the base step.

    Returns a list of (o~, a^, a~, r) tuples.
    """
    n, A = env.n_agents, env.n_actions
    h_prev = np.zeros((n, agent.arch["parts"]["gru"]["hidden"]))
    last = np.full(n, -1, dtype=np.int64)
    state, clean = env.reset(seed)
    out = []
    for _ in range(env.spec.step_limit):
        avail = env.avail_all(state)
        o_tilde = obs_attacker(clean, StepContext(avail, h_prev, last_actions=last, agent=agent, n_actions=A),
                               attack_rng)
        with dc.no_grad():
            x = qmix.build_agent_inputs(o_tilde, last, A)
            q, h = qmix.agent_step(agent, x, h_prev)
        a_hat = qmix.select_actions(q.data, avail, epsilon, explore_rng)
        a_tilde, _ = act_attacker(a_hat, StepContext(avail, h_prev, hidden=h.data, last_actions=last,
                                                     utilities=q.data, agent=agent, n_actions=A), attack_rng)
        res = env.step(state, a_tilde)
        out.append((o_tilde, a_hat, a_tilde, float(res.reward)))
        state, clean, h_prev, last = res.state, res.obs, h.data, a_hat
        if res.terminated:
            break
    return out


@dataclass
class ProbeReport:
    seeds: list
    divergences: dict       # seed -> first divergent step
    returns_wrapper: list
    returns_direct: list

    @property
    def ok(self) -> bool:
        return not self.divergences


def equivalence_probe(env, agent: dc.ModelParams, make_attackers, seeds, epsilon: float = 0.0,
                      stream_seed: int = 0) -> ProbeReport:
    """Compare wrapper and direct-composition rollouts step by step.

    ``make_attackers(seed)`` returns fresh (obs attacker, action attacker) for an episode.
    Both paths get identically seeded exploration and attack streams.
    """
    div, rw, rd = {}, [], []
    for seed in seeds:
        oa, aa = make_attackers(seed)
        trace = rollout_episode(env, agent, epsilon, seed, np.random.default_rng([stream_seed, seed, 1]),
                                oa, aa, np.random.default_rng([stream_seed, seed, 2]))
        oa, aa = make_attackers(seed)
        direct = direct_rollout(env, agent, epsilon, seed, np.random.default_rng([stream_seed, seed, 1]),
                                oa, aa, np.random.default_rng([stream_seed, seed, 2]))
        wrapped = [(t.obs, t.a_hat, t.a_tilde, t.reward) for t in trace.steps]
        rw.append(sum(x[3] for x in wrapped))
        rd.append(sum(x[3] for x in direct))
        if len(wrapped) != len(direct):
            div[seed] = min(len(wrapped), len(direct))
            continue
        for k, (a, b) in enumerate(zip(wrapped, direct)):
            if not (np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
                    and np.array_equal(a[2], b[2]) and a[3] == b[3]):
                div[seed] = k
                break
    return ProbeReport(list(seeds), div, rw, rd)
