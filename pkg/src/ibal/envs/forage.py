"""Level-based foraging gridworld.

Actions: 0 no-op, 1 north, 2 south, 3 west, 4 east, 5 load.
A food is collected when the summed level of adjacent agents loading it
reaches the food level. Episodes end when all food is gone or at the step limit.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .base import DIRS, EnvSpec, InvalidActionError, ObsLayout, PlacementError, StepResult

NOOP, LOAD = 0, 5
N_ACTIONS = 6


@dataclass(frozen=True)
class ForageState:
    agent_pos: np.ndarray    # (n, 2) int, (x, y)
    agent_level: np.ndarray  # (n,)
    food_pos: np.ndarray     # (m, 2)
    food_level: np.ndarray   # (m,)
    food_alive: np.ndarray   # (m,) bool
    t: int = 0

    def copy(self) -> "ForageState":
        return ForageState(self.agent_pos.copy(), self.agent_level.copy(), self.food_pos.copy(),
                           self.food_level.copy(), self.food_alive.copy(), self.t)


class ForageEnv:
    n_actions = N_ACTIONS

    def __init__(self, spec: EnvSpec):
        if spec.kind != "forage":
            raise ValueError("ForageEnv needs a forage spec")
        self.spec = spec
        self.n_agents = spec.n_agents
        self._max_agent_level = float(max(spec.agent_levels))
        self._max_food_level = float(max(spec.food_levels, default=1))
        self._layout = self._build_layout()

    # layout ------------------------------------------------------------------
    def _build_layout(self) -> list:
        layouts = []
        for i in range(self.n_agents):
            labels = [("self",)] * 3
            for j in range(self.n_agents):
                if j != i:
                    labels += [("agent", j)] * 4
            for f in range(self.spec.n_food):
                labels += [("food", f)] * 4
            layouts.append(ObsLayout(tuple(labels)))
        return layouts

    def obs_layout(self, agent: int = 0) -> ObsLayout:
        return self._layout[agent]

    @property
    def obs_dim(self) -> int:
        return 3 + 4 * (self.n_agents - 1) + 4 * self.spec.n_food

    @property
    def state_dim(self) -> int:
        return 3 * self.n_agents + 4 * self.spec.n_food + 1

    # dynamics ----------------------------------------------------------------
    def reset(self, seed: int):
        spec = self.spec
        rng = np.random.default_rng(seed)
        W, H = spec.width, spec.height
        # food sits off the border and never touches another food
        inner = [(x, y) for x in range(1, W - 1) for y in range(1, H - 1)]
        foods = []
        order = rng.permutation(len(inner))
        for k in order:
            if len(foods) == spec.n_food:
                break
            c = inner[k]
            if all(max(abs(c[0] - f[0]), abs(c[1] - f[1])) > 1 for f in foods):
                foods.append(c)
        if len(foods) < spec.n_food:
            raise PlacementError(f"cannot place {spec.n_food} foods on a {W}x{H} grid")
        taken = set(foods)
        free = [(x, y) for x in range(W) for y in range(H) if (x, y) not in taken]
        if len(free) < spec.n_agents:
            raise PlacementError(f"cannot place {spec.n_agents} agents on a {W}x{H} grid")
        pick = rng.choice(len(free), size=spec.n_agents, replace=False)
        state = ForageState(
            agent_pos=np.array([free[k] for k in pick], dtype=np.int64).reshape(-1, 2),
            agent_level=np.array(spec.agent_levels, dtype=np.int64),
            food_pos=np.array(foods, dtype=np.int64).reshape(-1, 2),
            food_level=np.array(spec.food_levels, dtype=np.int64),
            food_alive=np.ones(spec.n_food, dtype=bool),
            t=0,
        )
        return state, self.observe(state)

    @staticmethod
    def _food_cells(state: ForageState) -> dict:
        return {(int(x), int(y)): f for f, (x, y) in enumerate(state.food_pos) if state.food_alive[f]}

    def _food_at(self, state: ForageState, x: int, y: int, cells: Optional[dict] = None) -> int:
        cells = self._food_cells(state) if cells is None else cells
        return cells.get((int(x), int(y)), -1)

    def _adjacent_food(self, state: ForageState, agent: int, cells: Optional[dict] = None) -> int:
        cells = self._food_cells(state) if cells is None else cells
        x, y = (int(v) for v in state.agent_pos[agent])
        for dx, dy in DIRS:
            f = cells.get((x + dx, y + dy), -1)
            if f >= 0:
                return f
        return -1

    def available_actions(self, state: ForageState, agent: int, cells: Optional[dict] = None) -> np.ndarray:
        if not 0 <= agent < self.n_agents:
            raise IndexError(f"agent {agent} out of range")
        mask = np.zeros(N_ACTIONS, dtype=bool)
        mask[NOOP] = True
        if agent in self.spec.disabled:
            return mask
        cells = self._food_cells(state) if cells is None else cells
        x, y = (int(v) for v in state.agent_pos[agent])
        w, h = self.spec.width, self.spec.height
        for k, (dx, dy) in enumerate(DIRS):
            nx, ny = x + dx, y + dy
            if 0 <= nx < w and 0 <= ny < h and (nx, ny) not in cells:
                mask[1 + k] = True
        mask[LOAD] = self._adjacent_food(state, agent, cells) >= 0
        return mask

    def avail_all(self, state: ForageState) -> np.ndarray:
        cells = self._food_cells(state)
        return np.stack([self.available_actions(state, i, cells) for i in range(self.n_agents)])

    def step(self, state: ForageState, actions) -> StepResult:
        spec = self.spec
        actions = [int(a) for a in actions]
        if len(actions) != self.n_agents:
            raise ValueError(f"expected {self.n_agents} actions, got {len(actions)}")
        for d in spec.disabled:
            actions[d] = NOOP
        cells = self._food_cells(state)
        for i, a in enumerate(actions):
            if not (0 <= a < N_ACTIONS and self.available_actions(state, i, cells)[a]):
                raise InvalidActionError(i, a)
        nxt = state.copy()
        occupied = {tuple(p) for p in state.agent_pos.tolist()}
        claimed = set()
        # moves resolve in ascending agent index; a cell held at the start of the step blocks entry
        for i, a in enumerate(actions):
            if 1 <= a <= 4:
                dx, dy = DIRS[a - 1]
                target = (int(state.agent_pos[i, 0]) + dx, int(state.agent_pos[i, 1]) + dy)
                if target in occupied or target in claimed:
                    continue
                claimed.add(target)
                nxt.agent_pos[i] = target
        gained = 0.0
        loaders: dict = {}
        for i, a in enumerate(actions):
            if a == LOAD:
                f = self._adjacent_food(state, i, cells)
                loaders.setdefault(f, []).append(i)
        for f in sorted(loaders):
            if sum(int(state.agent_level[i]) for i in loaders[f]) >= state.food_level[f]:
                nxt.food_alive[f] = False
                gained += float(state.food_level[f])
        total = float(state.food_level.sum())
        reward = gained / total if total > 0 else 0.0
        nxt = ForageState(nxt.agent_pos, nxt.agent_level, nxt.food_pos, nxt.food_level,
                          nxt.food_alive, state.t + 1)
        success = not nxt.food_alive.any()
        timeout = nxt.t >= spec.step_limit
        return StepResult(obs=self.observe(nxt), state=nxt, reward=reward,
                          terminated=bool(success or timeout), success=bool(success),
                          truncated=bool(timeout and not success), raw_reward=gained)

    # observations ------------------------------------------------------------
    def observe(self, state: ForageState) -> np.ndarray:
        spec = self.spec
        n, m, s = self.n_agents, spec.n_food, float(spec.sight)
        pos = state.agent_pos.astype(np.float64)
        out = np.zeros((n, self.obs_dim))
        out[:, 0] = pos[:, 0] / max(spec.width - 1, 1)
        out[:, 1] = pos[:, 1] / max(spec.height - 1, 1)
        out[:, 2] = state.agent_level / self._max_agent_level
        rel = pos[None, :, :] - pos[:, None, :]            # (i, j, 2)
        vis = np.abs(rel).max(axis=2) <= spec.sight
        frel = state.food_pos[None, :, :].astype(np.float64) - pos[:, None, :]  # (i, f, 2)
        fvis = (np.abs(frel).max(axis=2) <= spec.sight) & state.food_alive[None, :]
        for i in range(n):
            col = 3
            for j in range(n):
                if j == i:
                    continue
                if vis[i, j]:
                    out[i, col:col + 4] = (1.0, rel[i, j, 0] / s, rel[i, j, 1] / s,
                                           state.agent_level[j] / self._max_agent_level)
                col += 4
            for f in range(m):
                if fvis[i, f]:
                    out[i, col:col + 4] = (1.0, frel[i, f, 0] / s, frel[i, f, 1] / s,
                                           state.food_level[f] / self._max_food_level)
                col += 4
        return out

    def state_vector(self, state: ForageState) -> np.ndarray:
        spec = self.spec
        sx, sy = max(spec.width - 1, 1), max(spec.height - 1, 1)
        parts = [state.agent_pos[:, 0] / sx, state.agent_pos[:, 1] / sy,
                 state.agent_level / self._max_agent_level,
                 state.food_pos[:, 0] / sx, state.food_pos[:, 1] / sy,
                 state.food_level / self._max_food_level, state.food_alive.astype(np.float64),
                 [state.t / spec.step_limit]]
        return np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in parts])
