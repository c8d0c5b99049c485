"""Redundancy diagnostic and the built-in self-check suite."""
from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np

from .. import attackers as atk
from .. import diffcore as dc
from .. import miest, qmix
from ..envs import make_env, preset
from ..induced import equivalence_probe
from ..training import TrainState
from .midump import collect_mi_data


# redundancy -------------------------------------------------------------------
def redundancy_report(state: TrainState, g1, data: Optional[miest.MIData] = None, steps: int = 1500,
                      seed: int = 0, episodes: int = 160, batch: int = 256) -> miest.RedundancyReport:
    """Fit the group-wise predictor and a copy of the pairwise predictor on the
    same rollouts, then compare group-wise MI with the summed pairwise scores."""
    env = make_env(state.config.env)
    data = collect_mi_data(state, episodes, seed) if data is None else data
    rng = np.random.default_rng([seed, 0x4ED])
    group = miest.GroupObsModel(env.n_agents, env.n_actions, env.obs_dim, qmix.AGENT_HIDDEN, g1, rng,
                                lr=state.config.mi_lr)
    pair = dataclasses.replace(state.obs_model, net=state.obs_model.net.copy())
    for _ in range(steps):
        group.train_step(data, rng, batch)
        pair.train_step(data, rng, batch)
    return miest.redundancy_estimate(group, pair, data, rng, state.config.mi_neg)


# CLUB sanity check -----------------------------------------------------------
def gaussian_club_estimate(rho: float, seed: int = 0, n: int = 2048, steps: int = 600,
                           batch: int = 128) -> float:
    """Fit q(y|x) on a unit bivariate Gaussian with correlation ``rho`` and
    return the CLUB estimate on a fresh sample of the same size."""
    rng = np.random.default_rng([seed, 7])
    cov = [[1.0, rho], [rho, 1.0]]
    train_xy = rng.multivariate_normal([0.0, 0.0], cov, size=n)
    model = miest.GaussianModel.create(1, 1, rng, hidden=32, lr=3e-3)
    for _ in range(steps):
        idx = rng.integers(0, n, batch)
        model.train_step(train_xy[idx, :1], train_xy[idx, 1:])
    xy = rng.multivariate_normal([0.0, 0.0], cov, size=n)
    return float(miest.club_scalar(model, xy[:, :1], xy[:, 1:], rng)[0])


# gradient checks --------------------------------------------------------------
def max_relative_error(loss_fn, params: dc.ModelParams, step: float = 1e-5, entries: int = 6,
                       rng: Optional[np.random.Generator] = None) -> float:
    """Analytic vs central-difference gradient on a random subset of entries per tensor,
    as max |a - n| / max(|a|, |n|) over each tensor's sampled entries."""
    rng = rng if rng is not None else np.random.default_rng(0)
    analytic = dc.grad(loss_fn(), params)
    worst = 0.0
    for name, t in params.tensors.items():
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(entries, flat.size), replace=False)
        a = analytic[name].reshape(-1)[picks]
        num = np.empty(len(picks))
        for k, p in enumerate(picks):
            old = flat[p]
            flat[p] = old + step
            hi = float(loss_fn().data)
            flat[p] = old - step
            lo = float(loss_fn().data)
            flat[p] = old
            num[k] = (hi - lo) / (2 * step)
        scale = max(np.abs(a).max(), np.abs(num).max())
        if scale > 1e-10:
            worst = max(worst, float(np.abs(a - num).max() / scale))
    return worst


def model_loss_fns(rng: np.random.Generator, n: int = 3, A: int = 5, d: int = 7, S: int = 9,
                   H: int = 8, B: int = 6) -> dict:
    """Small instances of each network with a scalar loss closure."""
    agent = dc.init_params(qmix.agent_arch(qmix.agent_input_dim(d, A, n), A, hidden=H), rng)
    xs = rng.normal(size=(3, B, qmix.agent_input_dim(d, A, n)))
    w = rng.normal(size=(B, A))

    def agent_loss():
        h = np.zeros((B, H))
        total = None
        for t in range(3):
            q, h = qmix.agent_step(agent, xs[t], h)
            term = dc.tsum(q * w)
            total = term if total is None else total + term
        return total

    mixer = dc.init_params(qmix.mixer_arch(n, S, embed=6, hyper=6), rng)
    chosen, states = rng.normal(size=(B, n)), rng.normal(size=(B, S))
    wm = rng.normal(size=B)

    def mixer_loss():
        return dc.tsum(qmix.mix(chosen, states, mixer) * wm)

    obs_model = miest.GaussianModel.create(10, 4, rng, hidden=8)
    ox, oy = rng.normal(size=(B, 10)), rng.normal(size=(B, 4))

    def obs_loss():
        return obs_model.nll(ox, oy)

    act_model = miest.ActionReconModel.create(n, A, H, rng, width=8)
    joint = rng.integers(0, A, size=(B, n))
    hid = rng.normal(size=(B, n, H))
    vis = miest.sample_visible(B, n, 1, rng)

    def act_loss():
        return act_model.ce_loss(joint, hid, vis, ~vis)

    return {"agent": (agent_loss, agent), "mixer": (mixer_loss, mixer),
            "obs-model": (obs_loss, obs_model.params), "action-model": (act_loss, act_model.params)}


def mixer_min_partial(n_points: int = 200, rng: Optional[np.random.Generator] = None, n: int = 3,
                      S: int = 9, h: float = 1e-6) -> float:
    """Smallest central-difference partial of Q_tot w.r.t. any agent utility."""
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = np.inf
    for _ in range(max(1, n_points // 50)):
        mixer = dc.init_params(qmix.mixer_arch(n, S), rng)
        chosen, states = rng.normal(size=(50, n)) * 3, rng.normal(size=(50, S))
        with dc.no_grad():
            for i in range(n):
                up, dn = chosen.copy(), chosen.copy()
                up[:, i] += h
                dn[:, i] -= h
                part = (qmix.mix(up, states, mixer).data - qmix.mix(dn, states, mixer).data) / (2 * h)
                worst = min(worst, float(part.min()))
    return worst


def selfcheck(seed: int = 0, probe_seeds: int = 20) -> list:
    """Returns (name, ok, detail) tuples."""
    rng = np.random.default_rng(seed)
    out = []
    for name, (fn, params) in model_loss_fns(rng).items():
        err = max_relative_error(fn, params, rng=rng)
        out.append((f"gradient/{name}", err <= 1e-4, f"max rel err {err:.2e}"))
    mp = mixer_min_partial(200, rng)
    out.append(("mixer-monotonic", mp >= -1e-9, f"min partial {mp:.3e}"))

    grown = atk.update_pact(atk.AttackProbState(0.5, 1.1, 0.8, window=1), 0.9).p_max
    capped = atk.update_pact(atk.AttackProbState(0.95, 1.1, 0.8, window=1), 0.9).p_max
    held = atk.update_pact(atk.AttackProbState(0.5, 1.1, 0.8, window=1), 0.7).p_max
    ok = abs(grown - 0.55) < 1e-12 and capped == 1.0 and held == 0.5
    out.append(("schedule", ok, f"0.5 -> {grown:.4f}, 0.95 -> {capped}"))

    env = make_env(preset("forage3"))
    init = np.random.default_rng([seed, 1])
    agent = dc.init_params(qmix.agent_arch(qmix.agent_input_dim(env.obs_dim, env.n_actions, env.n_agents),
                                           env.n_actions), init)
    model = miest.ActionReconModel.create(env.n_agents, env.n_actions, qmix.AGENT_HIDDEN, init)
    table = miest.DimMIScoreTable(init.random((env.n_agents, env.obs_dim, env.n_agents)), 0, False)

    def make(s):
        r = np.random.default_rng([seed, s, 3])
        part = atk.sample_partition(env.n_agents, 1, r)
        mask = atk.select_mask(table, part, 6)
        return atk.ObsAttacker("mask", mask), atk.ActionAttacker("ib", part, model, 1.0)

    rep = equivalence_probe(env, agent, make, range(probe_seeds), epsilon=0.1, stream_seed=seed)
    out.append(("equivalence", rep.ok, f"{len(rep.divergences)} divergent of {probe_seeds}"))
    return out
