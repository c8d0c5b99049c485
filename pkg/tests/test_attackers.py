import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from ibal import attackers as atk
from ibal import diffcore as dc
from ibal import qmix
from ibal.attackers import (AttackProbState, GroupPartition, MaskSet, apply_obs_mask, ib_action_attack,
                            sample_pact, sample_partition, select_mask, update_pact)
from ibal.miest import ActionReconModel, DimMIScoreTable


def _table(seed=0, n=4, d=10):
    return DimMIScoreTable(np.random.default_rng(seed).random((n, d, n)))


# partitions -----------------------------------------------------------------------
def test_k_zero_gives_empty_g1():
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = sample_partition(5, 0, rng)
        assert p.g1 == () and p.g2 == tuple(range(5))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 9), st.integers(0, 10_000))
def test_partition_sizes_bounded(n, seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(0, n // 2 + 1))
    p = sample_partition(n, K, rng)
    assert len(p.g1) <= K <= n // 2
    assert sorted(p.g1 + p.g2) == list(range(n))


def test_partition_rejects_large_k():
    with pytest.raises(ValueError):
        sample_partition(4, 3, np.random.default_rng(0))


def test_partition_distribution_uniform():
    n, K, draws = 8, 4, 10_000
    rng = np.random.default_rng(11)
    parts = [sample_partition(n, K, rng) for _ in range(draws)]
    ks = np.array([len(p.g1) for p in parts])
    assert stats.chisquare(np.bincount(ks, minlength=K + 1)).pvalue > 0.01
    at2 = [p.g1 for p in parts if len(p.g1) == 2]
    subsets = list(itertools.combinations(range(n), 2))
    counts = np.array([at2.count(s) for s in subsets])
    assert stats.chisquare(counts).pvalue > 0.01


# masks ----------------------------------------------------------------------------
def test_l_zero_gives_empty_masks():
    part = GroupPartition((0,), (1, 2, 3), 1)
    assert select_mask(_table(), part, 0).dims == {}


def test_unique_top_l_selected():
    scores = np.zeros((2, 6, 2))
    scores[0, :, 1] = [0.1, 0.9, 0.3, 0.8, 0.05, 0.7]
    scores[1, :, 0] = [0.5, 0.0, 0.0, 0.6, 0.0, 0.4]
    mask = select_mask(DimMIScoreTable(scores), GroupPartition((0,), (1,), 1), 3)
    np.testing.assert_array_equal(mask.for_agent(0), [1, 3, 5])
    np.testing.assert_array_equal(mask.for_agent(1), [0, 3, 5])


def test_top_l_ties_to_lowest_index():
    np.testing.assert_array_equal(atk.top_l(np.array([1.0, 2.0, 2.0, 2.0]), 2), [1, 2])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3), st.integers(1, 10))
def test_select_mask_scale_invariant(seed, c, L):
    table = _table(seed)
    part = GroupPartition((1,), (0, 2, 3), 2)
    a = select_mask(table, part, L)
    b = select_mask(DimMIScoreTable(table.scores * c), part, L)
    assert a.dims.keys() == b.dims.keys()
    for i in a.dims:
        np.testing.assert_array_equal(a.dims[i], b.dims[i])


def test_select_mask_rejects_large_l():
    with pytest.raises(ValueError):
        select_mask(_table(), GroupPartition((0,), (1,), 1), 11)


def test_empty_mask_is_identity():
    obs = np.random.default_rng(0).normal(size=(3, 5))
    np.testing.assert_array_equal(apply_obs_mask(obs, MaskSet.empty()), obs)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_mask_zeroes_only_selected_entries(seed):
    rng = np.random.default_rng(seed)
    obs = rng.normal(size=(4, 8))
    mask = MaskSet({0: np.array([1, 5]), 3: np.array([0])}, 2)
    out = apply_obs_mask(obs, mask)
    hit = np.zeros_like(obs, dtype=bool)
    hit[0, [1, 5]] = hit[3, 0] = True
    assert (out[hit] == 0.0).all()
    assert np.array_equal(out[~hit], obs[~hit])
    np.testing.assert_array_equal(apply_obs_mask(out, mask), out)


# adaptive probability ---------------------------------------------------------------
def test_update_grows_by_alpha():
    assert update_pact(AttackProbState(0.5, 1.1, 0.8, window=1), 1.0).p_max == pytest.approx(0.55, abs=1e-15)


def test_update_caps_at_one():
    assert update_pact(AttackProbState(0.95, 1.1, 0.8, window=1), 1.0).p_max == 1.0


def test_update_holds_below_threshold():
    s = AttackProbState(0.5, 1.1, 0.8, window=4)
    for outcome in (0.0, 1.0, 1.0, 1.0):   # running means stay below 0.8
        s = update_pact(s, outcome)
    assert s.p_max == 0.5


def test_update_does_not_mutate_input():
    s = AttackProbState(0.5, 1.1, 0.8, window=1)
    update_pact(s, 1.0)
    assert s.p_max == 0.5 and len(s.history) == 0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=200), st.floats(0.05, 1.0))
def test_cap_nondecreasing_and_bounded(outcomes, start):
    s = AttackProbState(start, 1.1, 0.8, window=10)
    prev = s.p_max
    for o in outcomes:
        s = update_pact(s, float(o))
        assert prev <= s.p_max <= 1.0
        prev = s.p_max


def test_sample_at_floor_is_exact():
    rng = np.random.default_rng(0)
    assert all(sample_pact(AttackProbState(0.25), 4, rng) == 0.25 for _ in range(100))


def test_sample_range_and_mean():
    rng = np.random.default_rng(3)
    draws = np.array([sample_pact(AttackProbState(1.0), 4, rng) for _ in range(10_000)])
    assert draws.min() >= 0.25 and draws.max() <= 1.0
    assert abs(draws.mean() - (0.25 + 1.0) / 2) <= 0.01


def test_sample_k_zero_is_zero():
    assert sample_pact(AttackProbState(1.0), 0, np.random.default_rng(0)) == 0.0


def test_bad_schedule_parameters_rejected():
    with pytest.raises(ValueError):
        AttackProbState(0.5, alpha=1.0)
    with pytest.raises(ValueError):
        AttackProbState(0.5, eta=1.0)


# MI-minimising action attack -----------------------------------------------------------
@pytest.fixture(scope="module")
def act_model():
    return ActionReconModel.create(3, 5, 4, np.random.default_rng(7), width=16)


def _kl_oracle(model, cand, hidden, g1, g2):
    """Direct per-candidate sum of KL terms from the model's softmax outputs."""
    n = len(cand)
    vis = np.zeros((1, n), dtype=bool)
    vis[0, g1] = True
    cond = np.exp(model.log_probs(model.inputs(cand[None], hidden[None], vis)))[0]
    marg = np.exp(model.log_probs(model.inputs(cand[None], hidden[None], np.zeros((1, n), bool))))[0]
    return sum(float(np.sum(cond[j] * np.log(cond[j] / marg[j]))) for j in g2)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_ib_attack_picks_exhaustive_argmin(act_model, seed):
    rng = np.random.default_rng(seed)
    part = GroupPartition((int(rng.integers(0, 3)),), (), 1)
    part = GroupPartition(part.g1, tuple(i for i in range(3) if i not in part.g1), 1)
    avail = rng.random((3, 5)) < 0.7
    avail[:, 0] = True
    a_hat = np.array([rng.choice(np.flatnonzero(row)) for row in avail])
    hidden = rng.normal(size=(3, 4))
    out, fired = ib_action_attack(a_hat, part, act_model, 1.0, avail, hidden, rng)
    assert fired
    i = part.g1[0]
    best, best_v = None, np.inf
    for c in np.flatnonzero(avail[i]):
        cand = a_hat.copy()
        cand[i] = c
        v = _kl_oracle(act_model, cand, hidden, list(part.g1), list(part.g2))
        if v < best_v - 1e-12:
            best, best_v = c, v
    assert out[i] == best
    assert avail[np.arange(3), out].all()
    np.testing.assert_array_equal(out[list(part.g2)], a_hat[list(part.g2)])


def test_ib_attack_identity_cases(act_model):
    rng = np.random.default_rng(0)
    a_hat = np.array([1, 2, 3])
    avail = np.ones((3, 5), bool)
    hid = np.zeros((3, 4))
    out, fired = ib_action_attack(a_hat, GroupPartition((0,), (1, 2), 1), act_model, 0.0, avail, hid, rng)
    assert not fired and np.array_equal(out, a_hat)
    out, _ = ib_action_attack(a_hat, GroupPartition((), (0, 1, 2), 1), act_model, 1.0, avail, hid, rng)
    np.testing.assert_array_equal(out, a_hat)


def test_joint_argmin_matches_sequential_for_single_agent(act_model):
    rng = np.random.default_rng(4)
    part = GroupPartition((2,), (0, 1), 1)
    avail = np.ones((3, 5), bool)
    hid = rng.normal(size=(3, 4))
    a_hat = np.array([0, 1, 2])
    seq, _ = ib_action_attack(a_hat, part, act_model, 1.0, avail, hid, rng)
    np.testing.assert_array_equal(seq, atk.joint_argmin_action(a_hat, part, act_model, avail, hid))


# baselines --------------------------------------------------------------------------
def test_rand_obs_zero_sigma_is_identity():
    obs = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(atk.rand_obs(obs, 0.0, np.random.default_rng(1)), obs)


def test_fgsm_step_entries():
    rng = np.random.default_rng(0)
    n, A, d = 3, 4, 5
    agent = dc.init_params(qmix.agent_arch(qmix.agent_input_dim(d, A, n), A, hidden=8), rng)
    obs = rng.normal(size=(n, d))
    out = atk.fgsm_obs(obs, 0.2, agent, 1, np.array([-1, -1, -1]), np.zeros((n, 8)), A)
    delta = out - obs
    assert np.isin(np.round(delta[1], 12), [-0.2, 0.0, 0.2]).all()
    assert (delta[[0, 2]] == 0).all()


def test_value_min_picks_lowest_utility():
    rng = np.random.default_rng(0)
    util = np.array([[3.0, 1.0, 2.0]])
    out, fired = atk.value_min_act(np.array([0]), util, np.ones((1, 3), bool), 1.0, rng)
    assert fired and out[0] == 1


def test_rand_act_respects_availability():
    rng = np.random.default_rng(0)
    avail = np.array([[True, False, False, True]] * 2)
    for _ in range(200):
        out, _ = atk.rand_act(np.array([0, 3]), avail, 1.0, rng)
        assert avail[np.arange(2), out].all()


def test_unknown_attack_kind_rejected():
    with pytest.raises(ValueError):
        atk.AttackSpec("teleport")
    with pytest.raises(ValueError):
        atk.baseline_attackers(atk.AttackSpec("interaction-breaking"))
