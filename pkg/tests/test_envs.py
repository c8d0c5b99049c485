import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ibal.envs import (EnvSpec, ForageEnv, ForageState, InvalidActionError, PerturbationSpec,
                       PlacementError, SkirmishEnv, SkirmishState, apply_perturbation, make_env, preset)
from ibal.envs.forage import LOAD, NOOP


def forage_state(agents, levels, foods, food_levels, t=0):
    return ForageState(np.array(agents, dtype=np.int64), np.array(levels, dtype=np.int64),
                       np.array(foods, dtype=np.int64).reshape(-1, 2), np.array(food_levels, dtype=np.int64),
                       np.ones(len(food_levels), dtype=bool), t)


def random_rollout(env, seed, rng):
    state, obs = env.reset(seed)
    states, obs_list, acts = [state], [obs], []
    while True:
        av = env.avail_all(state)
        a = [int(rng.choice(np.flatnonzero(m))) for m in av]
        res = env.step(state, a)
        acts.append(a)
        state = res.state
        states.append(state)
        obs_list.append(res.obs)
        if res.terminated:
            return states, obs_list, acts, res


# specs ----------------------------------------------------------------------
def test_spec_invariants():
    with pytest.raises(ValueError):
        EnvSpec(n_agents=1, agent_levels=(1,))
    with pytest.raises(ValueError):
        EnvSpec(sight=0)
    with pytest.raises(ValueError):
        EnvSpec(step_limit=0)


def test_spec_dict_roundtrip_and_unknown_keys():
    spec = preset("forage3")
    assert EnvSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(KeyError):
        EnvSpec.from_dict({"kind": "forage", "bogus": 1})


# forage ---------------------------------------------------------------------
def test_reset_is_deterministic():
    env = make_env(preset("forage3"))
    s1, o1 = env.reset(17)
    s2, o2 = env.reset(17)
    assert np.array_equal(s1.agent_pos, s2.agent_pos) and np.array_equal(s1.food_pos, s2.food_pos)
    assert np.array_equal(o1, o2)


def test_six_foods_placed():
    spec = preset("forage-large")
    assert spec.n_food == 6
    state, _ = make_env(spec).reset(3)
    assert state.food_alive.sum() == 6


def test_infeasible_placement_rejected():
    spec = EnvSpec(width=3, height=3, n_food=3, food_levels=(1, 1, 1))
    with pytest.raises(PlacementError):
        make_env(spec).reset(0)


def test_block_nonzero_iff_within_sight():
    env = make_env(preset("forage3"))
    for seed in range(50):
        state, obs = env.reset(seed)
        for i in range(3):
            lay = env.obs_layout(i)
            for j in range(3):
                if j == i:
                    continue
                dx, dy = state.agent_pos[j] - state.agent_pos[i]
                visible = max(abs(dx), abs(dy)) <= env.spec.sight
                assert bool(np.any(obs[i, lay.dims_for_agent(j)] != 0)) == visible


def test_all_noop_leaves_state():
    env = make_env(preset("forage3"))
    state, _ = env.reset(5)
    res = env.step(state, [NOOP] * 3)
    assert np.array_equal(res.state.agent_pos, state.agent_pos)
    assert res.reward == 0.0


def test_cooperative_load_collects():
    spec = EnvSpec(n_agents=2, width=5, height=5, agent_levels=(2, 1), n_food=1, food_levels=(3,))
    env = ForageEnv(spec)
    state = forage_state([[1, 2], [3, 2]], [2, 1], [[2, 2]], [3])
    res = env.step(state, [LOAD, LOAD])
    assert not res.state.food_alive[0]
    assert res.raw_reward == 3 and res.reward == pytest.approx(1.0)
    assert res.success and res.terminated


def test_insufficient_level_does_not_collect():
    spec = EnvSpec(n_agents=2, width=5, height=5, agent_levels=(1, 1), n_food=1, food_levels=(3,))
    state = forage_state([[1, 2], [3, 2]], [1, 1], [[2, 2]], [3])
    res = ForageEnv(spec).step(state, [LOAD, LOAD])
    assert res.state.food_alive[0] and res.reward == 0.0


def test_step_does_not_mutate_input():
    env = make_env(preset("forage3"))
    state, _ = env.reset(2)
    before = state.copy()
    av = env.avail_all(state)
    env.step(state, [int(np.flatnonzero(m)[-1]) for m in av])
    assert np.array_equal(before.agent_pos, state.agent_pos) and before.t == state.t


def test_edge_moves_unavailable():
    spec = EnvSpec(n_agents=2, width=5, height=5, agent_levels=(1, 1), n_food=1, food_levels=(1,))
    env = ForageEnv(spec)
    state = forage_state([[0, 0], [4, 4]], [1, 1], [[2, 2]], [1])
    m0, m1 = env.available_actions(state, 0), env.available_actions(state, 1)
    assert not m0[1] and not m0[3] and m0[2] and m0[4]     # north/west off-grid at the corner
    assert not m1[2] and not m1[4]
    assert not m0[LOAD]


def test_unavailable_action_names_agent():
    spec = EnvSpec(n_agents=2, width=5, height=5, agent_levels=(1, 1), n_food=1, food_levels=(1,))
    state = forage_state([[0, 0], [4, 4]], [1, 1], [[2, 2]], [1])
    with pytest.raises(InvalidActionError) as info:
        ForageEnv(spec).step(state, [NOOP, 2])
    assert info.value.agent == 1


def test_episode_terminates_by_limit():
    env = make_env(preset("forage3"))
    rng = np.random.default_rng(0)
    for seed in range(10):
        states, _, acts, res = random_rollout(env, seed, rng)
        assert len(acts) <= env.spec.step_limit
        assert res.terminated


def test_layout_partitions_dimensions():
    for name in ("forage3", "forage5", "skirmish3", "skirmish4h"):
        env = make_env(preset(name))
        for i in range(env.n_agents):
            lay = env.obs_layout(i)
            assert lay.dim == env.obs_dim
            blocks = lay.blocks()
            covered = sorted(d for dims in blocks.values() for d in dims)
            assert covered == list(range(env.obs_dim))
            assert lay.self_dims()
            for j in range(env.n_agents):
                if j != i:
                    assert lay.dims_for_agent(j)


def test_forage5_agent_blocks_have_documented_size():
    env = make_env(preset("forage5"))
    for i in range(5):
        for j in range(5):
            if j != i:
                assert len(env.obs_layout(i).dims_for_agent(j)) == 4


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), who=st.integers(0, 2), dx=st.integers(-8, 8), dy=st.integers(-8, 8))
def test_partial_observability(seed, who, dx, dy):
    """Moving an entity that stays out of agent i's sight leaves o^i unchanged."""
    env = make_env(preset("forage3"))
    state, obs = env.reset(seed)
    s = env.spec.sight
    for i in range(3):
        if i == who:
            continue
        old = state.agent_pos[who]
        new = np.clip(old + [dx, dy], 0, env.spec.width - 1)
        if max(abs(old - state.agent_pos[i])) <= s or max(abs(new - state.agent_pos[i])) <= s:
            continue
        moved = state.copy()
        moved.agent_pos[who] = new
        assert np.array_equal(env.observe(moved)[i], obs[i])


def test_seeded_trajectory_determinism():
    env = make_env(preset("forage3"))
    a = random_rollout(env, 4, np.random.default_rng(1))
    b = random_rollout(env, 4, np.random.default_rng(1))
    assert all(np.array_equal(x, y) for x, y in zip(a[1], b[1]))


# skirmish -------------------------------------------------------------------
def skirmish_spec(**kw):
    base = dict(kind="skirmish", n_agents=2, width=8, height=8, sight=4, step_limit=20, n_enemies=2,
                enemy_health=20.0, attack_power=6.0)
    base.update(kw)
    return EnvSpec(**base)


def test_skirmish_reward_damage_plus_kill():
    env = SkirmishEnv(skirmish_spec())
    state = SkirmishState(np.array([[2, 2], [2, 4]]), np.array([45.0, 45.0]),
                          np.array([[3, 2], [3, 4]]), np.array([4.0, 20.0]), 0)
    res = env.step(state, [6, 7])      # agent 0 kills enemy 0 (4 hp), agent 1 hits enemy 1 for 6
    assert res.raw_reward == pytest.approx(4.0 + 6.0 + 10.0)
    assert not res.success
    assert res.reward == pytest.approx(res.raw_reward * 20.0 / env.max_raw)


def test_skirmish_dead_unit_noop_only():
    env = SkirmishEnv(skirmish_spec())
    state = SkirmishState(np.array([[2, 2], [2, 4]]), np.array([0.0, 45.0]),
                          np.array([[6, 2], [6, 4]]), np.array([20.0, 20.0]), 0)
    mask = env.available_actions(state, 0)
    assert mask[0] and mask.sum() == 1
    assert not env.available_actions(state, 1)[0]
    assert env.available_actions(state, 1).any()


def test_skirmish_return_conservation():
    spec = preset("skirmish3")
    env = make_env(spec)
    rng = np.random.default_rng(5)
    for seed in range(10):
        state, _ = env.reset(seed)
        total_raw, start_hp = 0.0, state.enemy_hp.copy()
        while True:
            a = [int(rng.choice(np.flatnonzero(m))) for m in env.avail_all(state)]
            res = env.step(state, a)
            total_raw += res.raw_reward
            state = res.state
            if res.terminated:
                break
        kills = int((state.enemy_hp <= 0).sum())
        win = bool((state.enemy_hp <= 0).all())
        expected = float((start_hp - state.enemy_hp).sum()) + spec.kill_reward * kills + spec.win_reward * win
        assert total_raw == pytest.approx(expected)



def test_skirmish_healer_actions():
    env = make_env(preset("skirmish4h"))
    assert env.n_actions == 6 + 4
    assert env.is_healer(3) and not env.is_healer(0)


# perturbations --------------------------------------------------------------
def test_dis0_unchanged():
    spec = preset("skirmish3")
    assert apply_perturbation(spec, PerturbationSpec("disable", 0)) == spec


def test_disabled_unit_always_noop():
    spec = apply_perturbation(preset("skirmish3"), PerturbationSpec("disable", 1), np.random.default_rng(0))
    d = spec.disabled[0]
    env = make_env(spec)
    state, _ = env.reset(1)
    pos = state.ally_pos[d].copy()
    rng = np.random.default_rng(0)
    for _ in range(10):
        mask = env.available_actions(state, d)
        assert mask[0] and mask.sum() == 1
        a = [int(rng.choice(np.flatnonzero(m))) for m in env.avail_all(state)]
        a[d] = 3                         # the policy output is ignored for a disabled unit
        res = env.step(state, a)
        state = res.state
        assert np.array_equal(state.ally_pos[d], pos)
        if res.terminated:
            break


def test_hp_reduction():
    spec = apply_perturbation(preset("skirmish3"), PerturbationSpec("health-reduction", h=15))
    state, _ = make_env(spec).reset(0)
    assert np.allclose(state.ally_hp, 0.85 * spec.unit_health)


def test_hp_reduction_rejected_on_forage():
    with pytest.raises(ValueError):
        apply_perturbation(preset("forage3"), PerturbationSpec("health-reduction", h=15))


def test_perturbation_ranges():
    with pytest.raises(ValueError):
        PerturbationSpec("health-reduction", h=100)
    with pytest.raises(ValueError):
        apply_perturbation(preset("forage3"), PerturbationSpec("disable", 3), np.random.default_rng(0))
