"""Evaluation matrices: policies x (attacks, perturbations) x seeds."""
from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .. import attackers as atk
from ..envs import PerturbationSpec, apply_perturbation, make_env
from ..induced import rollout_episode
from ..training import TRAIN_SEED_LIMIT, TrainState, build_episode_attackers
from .checkpoint import load_checkpoint
from .config import ExperimentConfig

EVAL_SEED_LO, EVAL_SEED_HI = TRAIN_SEED_LIMIT, 2 ** 31


def attack_name(spec: atk.AttackSpec) -> str:
    default = atk.AttackSpec(spec.kind)
    if spec == default:
        return "natural" if spec.kind == "none" else spec.kind
    diffs = [f"{f.name}={getattr(spec, f.name)}" for f in dataclasses.fields(spec)
             if f.name != "kind" and getattr(spec, f.name) != getattr(default, f.name)]
    return f"{spec.kind}({','.join(diffs)})"


def episode_seeds(seed: int, episodes: int) -> np.ndarray:
    """Environment seeds for one evaluation seed; always inside [2^30, 2^31)."""
    out = np.random.default_rng([seed, 0xE7A1]).integers(EVAL_SEED_LO, EVAL_SEED_HI, size=episodes)
    assert ((out >= EVAL_SEED_LO) & (out < EVAL_SEED_HI)).all()
    assert not (out < TRAIN_SEED_LIMIT).any(), "evaluation seeds overlap the training range"
    return out


@dataclass
class EvalCell:
    policy: str
    condition: str
    mean: float            # success rate in percent, mean over per-seed rates
    std: float             # population std over per-seed rates
    episodes: int          # total episodes in the cell
    per_seed: list = field(default_factory=list)
    mean_return: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.mean <= 100.0 or self.std < 0:
            raise ValueError("cell statistics out of range")


@dataclass
class EvalReport:
    cells: list = field(default_factory=list)

    def cell(self, policy: str, condition: str) -> EvalCell:
        for c in self.cells:
            if c.policy == policy and c.condition == condition:
                return c
        raise KeyError((policy, condition))

    def merge(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(self.cells + other.cells)

    def to_dict(self) -> dict:
        return {"cells": [dataclasses.asdict(c) for c in self.cells]}

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.suffix == ".csv":
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["policy", "condition", "mean", "std", "episodes", "mean_return"])
                for c in self.cells:
                    w.writerow([c.policy, c.condition, repr(c.mean), repr(c.std), c.episodes,
                                repr(c.mean_return)])
        else:
            path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def table(self) -> str:
        lines = [f"{'policy':<14}{'condition':<28}{'success %':>14}{'episodes':>10}"]
        for c in self.cells:
            lines.append(f"{c.policy:<14}{c.condition:<28}{c.mean:8.1f} ±{c.std:4.1f}{c.episodes:>10}")
        return "\n".join(lines)


def _ib_config(state: TrainState, spec: atk.AttackSpec):
    """Training config as seen by the evaluation-time interaction-breaking attacker."""
    cfg = state.config
    return dataclasses.replace(cfg, K=spec.K, L=spec.L if spec.L > 0 else None, mask_mode="mi",
                               obs_attack=True, act_attack=True, symmetric_budget=cfg.symmetric_budget)


def _run_cell(state: TrainState, condition, seeds, episodes: int) -> tuple:
    base_spec = state.config.env
    agent = state.learner.agent
    per_seed, returns = [], []
    for s in seeds:
        ep_seeds = episode_seeds(s, episodes)
        attack_rng = np.random.default_rng([s, 0xA77])
        explore_rng = np.random.default_rng([s, 0xE5])
        wins = []
        for es in ep_seeds:
            obs_att, act_att = atk.IDENTITY_OBS, atk.IDENTITY_ACT
            spec = base_spec
            if isinstance(condition, PerturbationSpec):
                spec = apply_perturbation(base_spec, condition, attack_rng)
            elif condition.kind == "interaction-breaking":
                env0 = make_env(spec)
                cfg = _ib_config(state, condition)
                partition = atk.sample_partition(env0.n_agents, condition.K, attack_rng)
                p_act = condition.p_act if condition.p_act is not None else (
                    1.0 / condition.K if condition.K > 0 else 0.0)
                obs_att, act_att = build_episode_attackers(cfg, env0, state.table, state.act_model, partition,
                                                           p_act, attack_rng)
            elif condition.kind != "none":
                obs_att, act_att = atk.baseline_attackers(condition)
            env = make_env(spec)
            trace = rollout_episode(env, agent, 0.0, int(es), explore_rng, obs_att, act_att, attack_rng)
            wins.append(float(trace.success))
            returns.append(trace.episode_return)
        per_seed.append(100.0 * float(np.mean(wins)))
    return per_seed, float(np.mean(returns))


def run_eval(checkpoint, config: ExperimentConfig, policy: str = "policy",
             conditions: Optional[list] = None) -> EvalReport:
    """Greedy evaluation of a checkpoint (path or TrainState) over every configured cell."""
    state = checkpoint if isinstance(checkpoint, TrainState) else load_checkpoint(checkpoint)
    if conditions is None:
        conditions = list(config.attacks) + list(config.perturbations)
    cells = []
    for cond in conditions:
        name = cond.name if isinstance(cond, PerturbationSpec) else attack_name(cond)
        per_seed, mean_ret = _run_cell(state, cond, config.seeds, config.episodes)
        cells.append(EvalCell(policy, name, float(np.mean(per_seed)), float(np.std(per_seed)),
                              config.episodes * len(config.seeds), per_seed, mean_ret))
    return EvalReport(cells)


def random_policy_success(spec, episodes: int = 1000, seed: int = 0) -> float:
    """Success rate (percent) of uniformly random legal actions."""
    env = make_env(spec)
    rng = np.random.default_rng([seed, 0x5A])
    wins = 0
    for es in episode_seeds(seed, episodes):
        state, _ = env.reset(int(es))
        while True:
            av = env.avail_all(state)
            a = [int(rng.choice(np.flatnonzero(m))) for m in av]
            res = env.step(state, a)
            state = res.state
            if res.terminated:
                wins += int(res.success)
                break
    return 100.0 * wins / episodes
