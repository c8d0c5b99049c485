"""Experiment configuration: training config plus the evaluation protocol.

Stored as JSON; unknown keys are rejected at every level.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..attackers import AttackSpec
from ..envs import PerturbationSpec
from ..training import TrainConfig

DEFAULT_EPISODES = 96
DEFAULT_SEEDS = (0, 1, 2, 3, 4)


def _strict(cls, d: dict, where: str) -> dict:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise KeyError(f"unknown {where} keys: {unknown}")
    return d


def default_attacks() -> list:
    return [AttackSpec("none"), AttackSpec("interaction-breaking")]


def default_perturbations() -> list:
    return [PerturbationSpec("disable", 1)]


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    attacks: list = field(default_factory=default_attacks)
    perturbations: list = field(default_factory=default_perturbations)
    episodes: int = DEFAULT_EPISODES
    seeds: list = field(default_factory=lambda: list(DEFAULT_SEEDS))
    out_dir: str = "runs"

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(_strict(TrainConfig, self.train, "train"))
        self.attacks = [a if isinstance(a, AttackSpec) else AttackSpec(**_strict(AttackSpec, a, "attack"))
                        for a in self.attacks]
        self.perturbations = [p if isinstance(p, PerturbationSpec)
                              else PerturbationSpec(**_strict(PerturbationSpec, p, "perturbation"))
                              for p in self.perturbations]
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ValueError("seed list must not be empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seed list has duplicates")
        if self.episodes < 32:
            raise ValueError("at least 32 episodes per evaluation cell")

    def to_dict(self) -> dict:
        return {"train": self.train.to_dict(),
                "attacks": [dataclasses.asdict(a) for a in self.attacks],
                "perturbations": [dataclasses.asdict(p) for p in self.perturbations],
                "episodes": self.episodes, "seeds": list(self.seeds), "out_dir": self.out_dir}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**_strict(cls, d, "experiment"))

    def with_train(self, **changes) -> "ExperimentConfig":
        t = dataclasses.replace(self.train, **changes)
        return dataclasses.replace(self, train=t)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
