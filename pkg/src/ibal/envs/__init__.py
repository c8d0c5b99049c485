from .base import (DIRS, EnvSpec, InvalidActionError, ObsLayout, PerturbationSpec, PlacementError,
                   StepResult, apply_perturbation, chebyshev)
from .forage import ForageEnv, ForageState
from .skirmish import SkirmishEnv, SkirmishState

PRESETS = {
    # desk-scale defaults; forage3 is the small config the acceptance suite trains on
    "forage3": EnvSpec(kind="forage", n_agents=3, width=7, height=7, sight=4, step_limit=25,
                       n_food=3, agent_levels=(1, 1, 1), food_levels=(1, 1, 1)),
    "forage3-9x9": EnvSpec(kind="forage", n_agents=3, width=9, height=9, sight=3, step_limit=30,
                           n_food=3, agent_levels=(1, 1, 1), food_levels=(1, 1, 2)),
    "forage5": EnvSpec(kind="forage", n_agents=5, width=9, height=9, sight=3, step_limit=30,
                       n_food=3, agent_levels=(1, 1, 1, 1, 1), food_levels=(2, 3, 2)),
    "forage-large": EnvSpec(kind="forage", n_agents=5, width=20, height=20, sight=3, step_limit=100,
                            n_food=6, agent_levels=(1, 2, 1, 2, 1), food_levels=(2, 3, 2, 3, 2, 3)),
    "skirmish3": EnvSpec(kind="skirmish", n_agents=3, width=8, height=8, sight=4, step_limit=40,
                         n_enemies=3),
    "skirmish4h": EnvSpec(kind="skirmish", n_agents=4, width=8, height=8, sight=4, step_limit=40,
                          n_enemies=4, healer=True),
}


def make_env(spec: EnvSpec):
    if spec.kind == "forage":
        return ForageEnv(spec)
    return SkirmishEnv(spec)


def preset(name: str) -> EnvSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown environment preset {name!r}; known: {sorted(PRESETS)}") from None


__all__ = ["DIRS", "EnvSpec", "ForageEnv", "ForageState", "InvalidActionError", "ObsLayout",
           "PRESETS", "PerturbationSpec", "PlacementError", "SkirmishEnv", "SkirmishState",
           "StepResult", "apply_perturbation", "chebyshev", "make_env", "preset"]
