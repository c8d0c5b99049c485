"""Per-dimension MI dump: scores before and after masking, the selected
dimensions and their overlap with the layout's ground truth."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .. import attackers as atk
from .. import miest
from ..envs import make_env
from ..induced import rollout_episode
from ..training import TrainState
from .evaluation import episode_seeds


def collect_mi_data(state: TrainState, episodes: int = 64, seed: int = 0,
                    epsilon: Optional[float] = None) -> miest.MIData:
    """Clean rollouts of the stored policy, in the evaluation seed range."""
    env = make_env(state.config.env)
    eps = state.config.eps_end if epsilon is None else epsilon
    rng = np.random.default_rng([seed, 0xD0])
    store = miest.TransitionStore(capacity=episodes * env.spec.step_limit)
    for es in episode_seeds(seed, episodes):
        trace = rollout_episode(env, state.learner.agent, eps, int(es), rng)
        for row in trace.mi_rows():
            store.push(*row)
    return store.data()


def ground_truth(env, partition: atk.GroupPartition) -> dict:
    """Dimensions of each attacked agent that encode the opposite group."""
    gt = {}
    for i in partition.g1:
        gt[i] = sorted(env.obs_layout(i).dims_for_agents(partition.g2))
    for j in partition.g2:
        gt[j] = sorted(env.obs_layout(j).dims_for_agents(partition.g1))
    return gt


def overlap(selected: dict, truth: dict, agents) -> tuple:
    """Micro-averaged (precision, recall) over ``agents``."""
    hit = sel = tru = 0
    for i in agents:
        s, t = set(int(d) for d in selected.get(i, ())), set(truth.get(i, ()))
        hit += len(s & t)
        sel += len(s)
        tru += len(t)
    return (hit / sel if sel else 0.0), (hit / tru if tru else 0.0)


@dataclass
class MIDump:
    partition: dict
    L: int
    labels: list                     # per-dimension layout labels of agent 0's view
    before: list                     # (n, d) normalized aggregate scores
    after: list                      # (n, d) after masking, same normalizer
    selected: dict                   # agent -> D^{i,*}
    truth: dict                      # agent -> encodes-other-group dims
    precision: float                 # over G1 agents
    recall: float
    precision_symmetric: float       # over G2 agents
    masked_max_ratio: float          # max masked-dim score after masking / table max
    extras: dict = field(default_factory=dict)

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def aggregate_scores(table: miest.DimMIScoreTable, partition: atk.GroupPartition) -> np.ndarray:
    """(n, d): G1 agents summed over G2 actors and vice versa; others zero."""
    n, d, _ = table.scores.shape
    out = np.zeros((n, d))
    for i in partition.g1:
        out[i] = table.aggregate(i, partition.g2)
    for j in partition.g2:
        out[j] = table.aggregate(j, partition.g1)
    return out


def normalize(m: np.ndarray, scale: Optional[float] = None) -> np.ndarray:
    scale = float(m.max()) if scale is None else scale
    return m / scale if scale > 0 else np.zeros_like(m)


def mi_dump(state: TrainState, partition: atk.GroupPartition, out: Optional[str] = None,
            data: Optional[miest.MIData] = None, seed: int = 0, episodes: int = 64) -> MIDump:
    if state.table is None:
        raise ValueError("checkpoint has no score table")
    env = make_env(state.config.env)
    L = min(state.config.budget(partition), env.obs_dim)
    mask = atk.select_mask(state.table, partition, L)
    data = collect_mi_data(state, episodes, seed) if data is None else data
    rng = np.random.default_rng([seed, 0xD1])
    cfg = state.config
    post = miest.estimate_masked_scores(state.obs_model, data, mask.dims, rng, cfg.mi_per_pair, cfg.mi_neg)
    pre_agg = aggregate_scores(state.table, partition)
    post_agg = aggregate_scores(post, partition)
    scale = float(pre_agg.max())
    masked_vals = [post.scores[i, np.asarray(d, dtype=np.int64)].max()
                   for i, d in mask.dims.items() if len(d)]
    ratio = (max(masked_vals) / post.scores.max()) if masked_vals and post.scores.max() > 0 else 0.0
    truth = ground_truth(env, partition)
    selected = {int(i): [int(x) for x in d] for i, d in mask.dims.items()}
    p, r = overlap(selected, truth, partition.g1)
    ps, _ = overlap(selected, truth, partition.g2)
    labels = ["/".join(str(x) for x in lab) for lab in env.obs_layout(0).labels]
    dump = MIDump({"g1": list(partition.g1), "g2": list(partition.g2), "K": partition.K}, int(L), labels,
                  normalize(pre_agg).tolist(), normalize(post_agg, scale).tolist(), selected,
                  {int(k): v for k, v in truth.items()}, p, r, ps, float(ratio))
    if out:
        dump.write(out)
    return dump
