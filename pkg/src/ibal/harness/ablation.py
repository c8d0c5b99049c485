"""Ablation variants. Each differs from the full method in one component."""
from __future__ import annotations

import dataclasses
import re
from pathlib import Path
from typing import Optional

from ..training import TrainConfig, train
from .checkpoint import checkpoint_fn
from .config import ExperimentConfig
from .evaluation import EvalReport, run_eval
from .metrics import MetricsWriter

FIXED_VARIANTS = {
    "full": {},
    "no-adaptive": {"adaptive": False},
    "random-mask": {"mask_mode": "random"},
    "no-obs-attack": {"obs_attack": False},
    "no-action-attack": {"act_attack": False},
    "gaussian-mask": {"mask_mode": "gaussian"},
    "fgsm-mask": {"mask_mode": "fgsm"},
}
SWEEPS = {"K": ("K", int), "L": ("L", int), "pact-min": ("p_act_min", float)}
_SWEEP_RE = re.compile(r"^(K|L|pact-min)=([0-9.eE+-]+)$")


def variant_changes(variant: str) -> dict:
    """Field changes a variant applies to the full method's TrainConfig."""
    if variant in FIXED_VARIANTS:
        return dict(FIXED_VARIANTS[variant])
    m = _SWEEP_RE.match(variant)
    if not m:
        raise ValueError(f"unknown ablation variant {variant!r}; expected one of "
                         f"{sorted(FIXED_VARIANTS)} or K=<int>, L=<int>, pact-min=<float>")
    field, cast = SWEEPS[m.group(1)]
    try:
        return {field: cast(m.group(2))}
    except ValueError as exc:
        raise ValueError(f"bad sweep value in {variant!r}") from exc


def variant_config(base: TrainConfig, variant: str) -> TrainConfig:
    if base.mode != "ibal":
        raise ValueError("ablations start from an IBAL config")
    return dataclasses.replace(base, **variant_changes(variant))


def config_diff(a: TrainConfig, b: TrainConfig) -> dict:
    """Fields whose values differ, as {name: (a, b)}."""
    da, db = a.to_dict(), b.to_dict()
    return {k: (da[k], db[k]) for k in da if da[k] != db[k]}


def ablate(cfg: ExperimentConfig, variant: str, out_dir: Optional[str] = None) -> EvalReport:
    """Train the variant under the experiment's seed and evaluate it."""
    tcfg = variant_config(cfg.train, variant)
    out = Path(out_dir or cfg.out_dir) / f"ablate-{variant}"
    out.mkdir(parents=True, exist_ok=True)
    with MetricsWriter(out / "metrics.csv") as writer:
        state = train(tcfg, on_row=writer, checkpoint_fn=checkpoint_fn(out))
    report = run_eval(state, cfg, policy=variant)
    report.write(out / "eval.json")
    return report
