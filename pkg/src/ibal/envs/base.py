"""Shared environment types: specs, step results, observation layouts and perturbations."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np


class InvalidActionError(ValueError):
    def __init__(self, agent: int, action: int):
        super().__init__(f"agent {agent}: action {action} is not available")
        self.agent = agent
        self.action = action


class PlacementError(ValueError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    """Immutable environment description. Fields irrelevant to a kind are ignored."""

    kind: str = "forage"
    n_agents: int = 3
    width: int = 9
    height: int = 9
    sight: int = 3
    step_limit: int = 25
    # forage
    n_food: int = 3
    agent_levels: tuple = (1, 1, 1)
    food_levels: tuple = (2, 2, 2)
    # skirmish
    n_enemies: int = 3
    healer: bool = False
    unit_health: float = 45.0
    enemy_health: float = 45.0
    attack_power: float = 6.0
    enemy_attack: float = 6.0
    heal_power: float = 8.0
    attack_range: int = 2
    kill_reward: float = 10.0
    win_reward: float = 200.0
    reward_max: float = 20.0
    # perturbations
    disabled: tuple = ()
    hp_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("forage", "skirmish"):
            raise ValueError(f"unknown environment kind {self.kind!r}")
        if self.n_agents < 2:
            raise ValueError("n_agents must be >= 2")
        if self.sight < 1:
            raise ValueError("sight must be >= 1")
        if self.step_limit < 1:
            raise ValueError("step_limit must be >= 1")
        if self.kind == "forage":
            if len(self.agent_levels) != self.n_agents:
                raise ValueError("agent_levels must have one entry per agent")
            if len(self.food_levels) != self.n_food:
                raise ValueError("food_levels must have one entry per food")
            if min(self.agent_levels) < 1 or min(self.food_levels, default=1) < 1:
                raise ValueError("levels must be positive")
        if any(not 0 <= d < self.n_agents for d in self.disabled):
            raise ValueError("disabled agent index out of range")
        if not 0.0 < self.hp_scale <= 1.0:
            raise ValueError("hp_scale must lie in (0, 1]")

    def replace(self, **changes) -> "EnvSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "EnvSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown env keys: {unknown}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class StepResult:
    obs: np.ndarray
    state: object
    reward: float
    terminated: bool
    success: bool
    truncated: bool = False
    raw_reward: float = 0.0

    def __post_init__(self):
        if self.success and not self.terminated:
            raise ValueError("success implies terminated")
        if not np.isfinite(self.reward):
            raise ValueError("reward must be finite")


@dataclass(frozen=True)
class ObsLayout:
    """One label per observation dimension.

    Labels are tuples: ("self",), ("move",), ("agent", j), ("food", e), ("enemy", e).
    """

    labels: tuple

    @property
    def dim(self) -> int:
        return len(self.labels)

    def dims_for_agent(self, j: int) -> list:
        return [d for d, lab in enumerate(self.labels) if lab == ("agent", j)]

    def dims_for_agents(self, agents) -> list:
        agents = set(int(a) for a in agents)
        return [d for d, lab in enumerate(self.labels) if lab[0] == "agent" and lab[1] in agents]

    def self_dims(self) -> list:
        return [d for d, lab in enumerate(self.labels) if lab[0] == "self"]

    def blocks(self) -> dict:
        out: dict = {}
        for d, lab in enumerate(self.labels):
            out.setdefault(lab, []).append(d)
        return out


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str = "disable"
    ell: int = 0
    h: float = 0.0

    def __post_init__(self):
        if self.kind not in ("disable", "health-reduction"):
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.ell < 0:
            raise ValueError("ell must be >= 0")
        if not 0.0 <= self.h < 100.0:
            raise ValueError("h must lie in [0, 100)")

    @property
    def name(self) -> str:
        return f"Dis-{self.ell}" if self.kind == "disable" else f"HP-{self.h:g}"


def apply_perturbation(spec: EnvSpec, p: PerturbationSpec,
                       rng: Optional[np.random.Generator] = None) -> EnvSpec:
    """Return a perturbed copy of ``spec``; the input is left untouched."""
    if p.kind == "disable":
        if p.ell >= spec.n_agents:
            raise ValueError(f"cannot disable {p.ell} of {spec.n_agents} agents")
        if p.ell == 0:
            return spec
        if rng is None:
            raise ValueError("Dis-l needs a random generator to pick agents")
        chosen = rng.choice(spec.n_agents, size=p.ell, replace=False)
        return spec.replace(disabled=tuple(sorted(int(c) for c in chosen)))
    if spec.kind != "skirmish":
        raise ValueError("health reduction only applies to skirmish environments")
    return spec.replace(hp_scale=spec.hp_scale * (1.0 - p.h / 100.0))


def chebyshev(a, b) -> int:
    return int(max(abs(int(a[0]) - int(b[0])), abs(int(a[1]) - int(b[1]))))


# north, south, west, east as (dx, dy); y grows southwards
DIRS = ((0, -1), (0, 1), (-1, 0), (1, 0))
