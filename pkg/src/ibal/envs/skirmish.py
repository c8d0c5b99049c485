"""Small grid combat task against a scripted focus-fire opponent.

Actions: 0 no-op (dead units only), 1 stop, 2..5 north/south/west/east,
6+k target k (enemy k for marines, ally k for the optional healer, which is
the last ally). Raw reward is enemy health removed + kill bonus per kill +
win bonus, rescaled so that the largest possible episode return is
``spec.reward_max``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import DIRS, EnvSpec, InvalidActionError, ObsLayout, PlacementError, StepResult

NOOP, STOP, FIRST_TARGET = 0, 1, 6


@dataclass(frozen=True)
class SkirmishState:
    ally_pos: np.ndarray   # (n, 2)
    ally_hp: np.ndarray    # (n,)
    enemy_pos: np.ndarray  # (m, 2)
    enemy_hp: np.ndarray   # (m,)
    t: int = 0

    def copy(self) -> "SkirmishState":
        return SkirmishState(self.ally_pos.copy(), self.ally_hp.copy(), self.enemy_pos.copy(),
                             self.enemy_hp.copy(), self.t)


def _cheb(a, b) -> int:
    return int(max(abs(int(a[0]) - int(b[0])), abs(int(a[1]) - int(b[1]))))


class SkirmishEnv:
    def __init__(self, spec: EnvSpec):
        if spec.kind != "skirmish":
            raise ValueError("SkirmishEnv needs a skirmish spec")
        if spec.n_enemies < 1:
            raise ValueError("need at least one enemy")
        self.spec = spec
        self.n_agents = spec.n_agents
        self.n_targets = max(spec.n_enemies, spec.n_agents) if spec.healer else spec.n_enemies
        self.n_actions = FIRST_TARGET + self.n_targets
        self.max_raw = spec.n_enemies * (spec.enemy_health + spec.kill_reward) + spec.win_reward
        self._layout = self._build_layout()

    def is_healer(self, agent: int) -> bool:
        return self.spec.healer and agent == self.n_agents - 1

    def _type(self, agent: int) -> tuple:
        return (0.0, 1.0) if self.is_healer(agent) else (1.0, 0.0)

    def _build_layout(self) -> list:
        layouts = []
        for i in range(self.n_agents):
            labels = [("self",)] * 5 + [("move",)] * 4
            for e in range(self.spec.n_enemies):
                labels += [("enemy", e)] * 6
            for j in range(self.n_agents):
                if j != i:
                    labels += [("agent", j)] * 6
            layouts.append(ObsLayout(tuple(labels)))
        return layouts

    def obs_layout(self, agent: int = 0) -> ObsLayout:
        return self._layout[agent]

    @property
    def obs_dim(self) -> int:
        return 9 + 6 * self.spec.n_enemies + 6 * (self.n_agents - 1)

    @property
    def state_dim(self) -> int:
        return 3 * (self.n_agents + self.spec.n_enemies) + 1

    def reset(self, seed: int):
        spec = self.spec
        rng = np.random.default_rng(seed)
        W, H = spec.width, spec.height
        left = [(x, y) for x in range(min(2, W)) for y in range(H)]
        right = [(x, y) for x in range(max(W - 2, 0), W) for y in range(H) if (x, y) not in left]
        if len(left) < spec.n_agents or len(right) < spec.n_enemies:
            raise PlacementError(f"arena {W}x{H} too small for {spec.n_agents} vs {spec.n_enemies}")
        a = rng.choice(len(left), size=spec.n_agents, replace=False)
        e = rng.choice(len(right), size=spec.n_enemies, replace=False)
        state = SkirmishState(
            ally_pos=np.array([left[k] for k in a], dtype=np.int64),
            ally_hp=np.full(spec.n_agents, spec.unit_health * spec.hp_scale),
            enemy_pos=np.array([right[k] for k in e], dtype=np.int64),
            enemy_hp=np.full(spec.n_enemies, float(spec.enemy_health)),
            t=0,
        )
        return state, self.observe(state)

    def _occupied(self, state: SkirmishState) -> set:
        occ = {tuple(p) for p, hp in zip(state.ally_pos.tolist(), state.ally_hp) if hp > 0}
        occ |= {tuple(p) for p, hp in zip(state.enemy_pos.tolist(), state.enemy_hp) if hp > 0}
        return occ

    def _move_ok(self, occ: set, x: int, y: int) -> bool:
        return 0 <= x < self.spec.width and 0 <= y < self.spec.height and (x, y) not in occ

    def available_actions(self, state: SkirmishState, agent: int) -> np.ndarray:
        if not 0 <= agent < self.n_agents:
            raise IndexError(f"agent {agent} out of range")
        spec = self.spec
        mask = np.zeros(self.n_actions, dtype=bool)
        if state.ally_hp[agent] <= 0 or agent in spec.disabled:
            mask[NOOP] = True
            return mask
        mask[STOP] = True
        occ = self._occupied(state)
        x, y = state.ally_pos[agent]
        for k, (dx, dy) in enumerate(DIRS):
            mask[2 + k] = self._move_ok(occ, x + dx, y + dy)
        me = state.ally_pos[agent]
        if self.is_healer(agent):
            nominal = spec.unit_health
            for k in range(self.n_agents):
                if (k != agent and 0 < state.ally_hp[k] < nominal
                        and _cheb(me, state.ally_pos[k]) <= spec.attack_range):
                    mask[FIRST_TARGET + k] = True
        else:
            for k in range(spec.n_enemies):
                if state.enemy_hp[k] > 0 and _cheb(me, state.enemy_pos[k]) <= spec.attack_range:
                    mask[FIRST_TARGET + k] = True
        return mask

    def avail_all(self, state: SkirmishState) -> np.ndarray:
        return np.stack([self.available_actions(state, i) for i in range(self.n_agents)])

    def step(self, state: SkirmishState, actions) -> StepResult:
        spec = self.spec
        actions = [int(a) for a in actions]
        if len(actions) != self.n_agents:
            raise ValueError(f"expected {self.n_agents} actions, got {len(actions)}")
        for d in spec.disabled:
            actions[d] = NOOP
        avail = [self.available_actions(state, i) for i in range(self.n_agents)]
        for i, a in enumerate(actions):
            if not (0 <= a < self.n_actions and avail[i][a]):
                raise InvalidActionError(i, a)
        nxt = state.copy()
        occ = self._occupied(state)
        for i, a in enumerate(actions):
            if 2 <= a <= 5:
                dx, dy = DIRS[a - 2]
                x, y = int(nxt.ally_pos[i, 0]) + dx, int(nxt.ally_pos[i, 1]) + dy
                if self._move_ok(occ, x, y):
                    occ.discard(tuple(nxt.ally_pos[i].tolist()))
                    occ.add((x, y))
                    nxt.ally_pos[i] = (x, y)
        before = nxt.enemy_hp.copy()
        for i, a in enumerate(actions):
            if a >= FIRST_TARGET:
                k = a - FIRST_TARGET
                if self.is_healer(i):
                    nxt.ally_hp[k] = min(spec.unit_health, nxt.ally_hp[k] + spec.heal_power)
                else:
                    nxt.enemy_hp[k] = max(0.0, nxt.enemy_hp[k] - spec.attack_power)
        damage = float((before - nxt.enemy_hp).sum())
        kills = int(((before > 0) & (nxt.enemy_hp <= 0)).sum())
        self._enemy_turn(nxt)
        win = bool((nxt.enemy_hp <= 0).all())
        lost = bool((nxt.ally_hp <= 0).all())
        raw = damage + spec.kill_reward * kills + (spec.win_reward if win else 0.0)
        nxt = SkirmishState(nxt.ally_pos, nxt.ally_hp, nxt.enemy_pos, nxt.enemy_hp, state.t + 1)
        timeout = nxt.t >= spec.step_limit
        done = win or lost or timeout
        return StepResult(obs=self.observe(nxt), state=nxt, reward=raw * spec.reward_max / self.max_raw,
                          terminated=done, success=win, truncated=bool(timeout and not (win or lost)),
                          raw_reward=raw)

    def _enemy_turn(self, s: SkirmishState) -> None:
        """Each surviving enemy focus-fires its nearest living ally, else closes in."""
        spec = self.spec
        alive = [k for k in range(self.n_agents) if s.ally_hp[k] > 0]
        if not alive:
            return
        occ = self._occupied(s)
        for e in range(spec.n_enemies):
            if s.enemy_hp[e] <= 0:
                continue
            target = min(alive, key=lambda k: (_cheb(s.enemy_pos[e], s.ally_pos[k]), k))
            if s.ally_hp[target] <= 0:
                continue
            if _cheb(s.enemy_pos[e], s.ally_pos[target]) <= spec.attack_range:
                s.ally_hp[target] = max(0.0, s.ally_hp[target] - spec.enemy_attack)
                continue
            ex, ey = (int(v) for v in s.enemy_pos[e])
            dx = int(np.sign(s.ally_pos[target, 0] - ex))
            dy = int(np.sign(s.ally_pos[target, 1] - ey))
            steps = [(dx, 0), (0, dy)] if abs(s.ally_pos[target, 0] - ex) >= abs(s.ally_pos[target, 1] - ey) \
                else [(0, dy), (dx, 0)]
            for mx, my in steps:
                if (mx or my) and self._move_ok(occ, ex + mx, ey + my):
                    occ.discard((ex, ey))
                    occ.add((ex + mx, ey + my))
                    s.enemy_pos[e] = (ex + mx, ey + my)
                    break

    def observe(self, state: SkirmishState) -> np.ndarray:
        spec = self.spec
        s, W, H = float(spec.sight), max(spec.width - 1, 1), max(spec.height - 1, 1)
        out = np.zeros((self.n_agents, self.obs_dim))
        occ = self._occupied(state)
        for i in range(self.n_agents):
            if state.ally_hp[i] <= 0:
                continue
            me = state.ally_pos[i]
            row = [state.ally_hp[i] / spec.unit_health, me[0] / W, me[1] / H, *self._type(i)]
            row += [float(i not in spec.disabled and self._move_ok(occ, me[0] + dx, me[1] + dy))
                    for dx, dy in DIRS]
            for e in range(spec.n_enemies):
                p = state.enemy_pos[e]
                if state.enemy_hp[e] > 0 and _cheb(me, p) <= spec.sight:
                    row += [1.0, (p[0] - me[0]) / s, (p[1] - me[1]) / s,
                            state.enemy_hp[e] / spec.enemy_health, 1.0, 0.0]
                else:
                    row += [0.0] * 6
            for j in range(self.n_agents):
                if j == i:
                    continue
                p = state.ally_pos[j]
                if state.ally_hp[j] > 0 and _cheb(me, p) <= spec.sight:
                    row += [1.0, (p[0] - me[0]) / s, (p[1] - me[1]) / s,
                            state.ally_hp[j] / spec.unit_health, *self._type(j)]
                else:
                    row += [0.0] * 6
            out[i] = row
        return out

    def state_vector(self, state: SkirmishState) -> np.ndarray:
        spec = self.spec
        W, H = max(spec.width - 1, 1), max(spec.height - 1, 1)
        parts = [state.ally_pos[:, 0] / W, state.ally_pos[:, 1] / H, state.ally_hp / spec.unit_health,
                 state.enemy_pos[:, 0] / W, state.enemy_pos[:, 1] / H, state.enemy_hp / spec.enemy_health,
                 [state.t / spec.step_limit]]
        return np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in parts])
