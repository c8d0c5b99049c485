import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from ibal import diffcore as dc
from ibal import qmix
from ibal.qmix import (Episode, EpsilonSchedule, Learner, ReplayBuffer, UnderfilledBufferError, collate,
                       greedy, mix, select_actions, sync_target, td_loss, td_targets, td_update)


def _small_learner(seed=0, n=2, A=3, d=4, S=5, lr=5e-4, gamma=0.99):
    return Learner.create(d, S, n, A, np.random.default_rng(seed), lr=lr, gamma=gamma)


def _episode(T, n=2, A=3, d=4, S=5, rng=None, reward=None, terminal_last=True):
    rng = rng if rng is not None else np.random.default_rng(0)
    term = np.zeros(T, dtype=bool)
    term[-1] = terminal_last
    return Episode(obs=rng.normal(size=(T + 1, n, d)),
                   actions=rng.integers(0, A, size=(T, n)),
                   avail=np.ones((T + 1, n, A), dtype=bool),
                   states=rng.normal(size=(T + 1, S)),
                   rewards=rng.normal(size=T) if reward is None else np.full(T, reward, dtype=float),
                   terminal=term)


# agent network -----------------------------------------------------------------
def test_identical_histories_give_identical_utilities():
    rng = np.random.default_rng(1)
    agent = dc.init_params(qmix.agent_arch(qmix.agent_input_dim(4, 3, 2), 3), rng)
    obs = rng.normal(size=(6, 1, 4))
    obs = np.repeat(obs, 2, axis=1)                       # same observations for both agents
    inputs = qmix.build_agent_inputs(obs, None, 3)
    inputs[..., -2:] = np.array([1.0, 0.0])               # same id encoding too
    q, _ = qmix.agent_utilities(agent, inputs)
    np.testing.assert_array_equal(q[0], q[1])


def test_masking_keeps_available_utilities():
    rng = np.random.default_rng(2)
    agent = dc.init_params(qmix.agent_arch(qmix.agent_input_dim(4, 3, 2), 3), rng)
    inputs = qmix.build_agent_inputs(rng.normal(size=(3, 2, 4)), None, 3)
    q, _ = qmix.agent_utilities(agent, inputs)
    avail = np.array([[True, False, True], [False, True, True]])
    masked = np.where(avail, q, -np.inf)
    np.testing.assert_array_equal(masked[avail], q[avail])


def test_agent_inputs_one_hot_layout():
    obs = np.zeros((2, 3, 4))
    x = qmix.build_agent_inputs(obs, np.array([[-1, 2, 0], [1, 1, -1]]), 3)
    assert x.shape == (2, 3, 4 + 3 + 3)
    np.testing.assert_array_equal(x[0, 0, 4:7], [0, 0, 0])
    np.testing.assert_array_equal(x[0, 1, 4:7], [0, 0, 1])
    np.testing.assert_array_equal(x[1, 2, 7:], [0, 0, 1])


# action selection --------------------------------------------------------------
def test_epsilon_zero_is_argmax():
    rng = np.random.default_rng(0)
    u = rng.normal(size=(4, 6))
    avail = rng.random((4, 6)) < 0.7
    avail[:, 0] = True
    np.testing.assert_array_equal(select_actions(u, avail, 0.0, rng), np.where(avail, u, -np.inf).argmax(1))


def test_ties_go_to_lowest_index():
    u = np.array([[1.0, 3.0, 3.0, 0.0], [2.0, 2.0, 2.0, 2.0]])
    avail = np.array([[True] * 4, [False, True, True, True]])
    np.testing.assert_array_equal(greedy(u, avail), [1, 1])


def test_epsilon_one_is_uniform_over_available():
    rng = np.random.default_rng(5)
    u = np.array([[5.0, 0.0, 1.0, 2.0, 3.0]])
    avail = np.array([[True, False, True, True, True]])
    draws = np.array([select_actions(u, avail, 1.0, rng)[0] for _ in range(10000)])
    assert not np.isin(draws, [1]).any()
    counts = np.bincount(draws, minlength=5)[[0, 2, 3, 4]]
    assert stats.chisquare(counts).pvalue > 0.01


def test_no_available_action_rejected():
    with pytest.raises(ValueError):
        select_actions(np.zeros((2, 3)), np.array([[True, True, True], [False] * 3]), 0.1,
                       np.random.default_rng(0))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_greedy_invariant_to_per_agent_constant(seed, c):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(3, 5))
    avail = rng.random((3, 5)) < 0.6
    avail[:, 2] = True
    shift = c * np.arange(1, 4)[:, None]
    np.testing.assert_array_equal(greedy(u, avail), greedy(u + shift, avail))


def test_epsilon_schedule_linear():
    s = EpsilonSchedule(1.0, 0.05, 100)
    assert s.value(0) == 1.0
    assert s.value(50) == pytest.approx(0.525)
    assert s.value(100) == pytest.approx(0.05)
    assert s.value(10_000) == pytest.approx(0.05)


# mixer -------------------------------------------------------------------------
def test_single_agent_mixer_is_affine_with_nonnegative_slope():
    rng = np.random.default_rng(3)
    mixer = dc.init_params(qmix.mixer_arch(1, 4, embed=1), rng)
    state = np.tile(rng.normal(size=(1, 4)), (7, 1))
    with dc.no_grad():
        # with one embedding unit the mixer is elu(w1 q + b1) w2 + v; restrict to the
        # region where the elu argument is positive, where it is exactly affine
        b1 = dc.mlp_forward(mixer.part("hyper_b1"), state[:1]).data.item()
        w1 = abs(dc.mlp_forward(mixer.part("hyper_w1"), state[:1]).data.item())
        qs = np.linspace(0, 5, 7) + max(0.0, -b1 / max(w1, 1e-9)) + 0.1
        out = mix(qs[:, None], state, mixer).data
    slopes = np.diff(out) / np.diff(qs)
    np.testing.assert_allclose(slopes, slopes[0], rtol=1e-9)
    assert slopes[0] >= 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 2), st.floats(0.0, 10.0))
def test_raising_an_agent_utility_never_lowers_q_tot(seed, agent, bump):
    rng = np.random.default_rng(seed)
    mixer = dc.init_params(qmix.mixer_arch(3, 6, embed=8, hyper=8), rng)
    q, s = rng.normal(size=(4, 3)) * 3, rng.normal(size=(4, 6))
    up = q.copy()
    up[:, agent] += bump
    with dc.no_grad():
        assert (mix(up, s, mixer).data >= mix(q, s, mixer).data - 1e-12).all()


def test_mixer_partials_nonnegative():
    from ibal.harness.diagnostics import mixer_min_partial
    assert mixer_min_partial(200, np.random.default_rng(0)) >= -1e-9


# TD ----------------------------------------------------------------------------
def test_td_arithmetic():
    target = td_targets(np.array([1.0]), np.array([False]), np.array([2.0]), 0.99)
    loss = qmix.masked_mse(dc.Tensor(np.array([1.0])), target, np.ones(1))
    assert float(loss.data) == pytest.approx(3.9204, abs=1e-12)


def test_terminal_stops_bootstrap():
    assert td_targets([0.5], [True], [100.0], 0.99)[0] == 0.5


def _zero_params(p):
    for t in p.tensors.values():
        t.data = np.zeros_like(t.data)


def test_zero_q_zero_reward_no_discount_leaves_params_unchanged():
    learner = _small_learner(gamma=0.0)
    for p in (learner.agent, learner.mixer, learner.target_agent, learner.target_mixer):
        _zero_params(p)
    before = {k: t.data.copy() for k, t in learner.joint().tensors.items()}
    batch = collate([_episode(4, reward=0.0)])
    loss = td_update(learner, batch)
    assert loss == 0.0
    for k, t in learner.joint().tensors.items():
        np.testing.assert_array_equal(t.data, before[k])


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_td_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    learner = _small_learner(seed)
    batch = collate([_episode(int(rng.integers(1, 5)), rng=rng) for _ in range(3)])
    loss, _ = td_loss(learner, batch)
    assert float(loss.data) >= 0.0


def test_padding_is_masked():
    rng = np.random.default_rng(4)
    short, long_ = _episode(2, rng=rng), _episode(5, rng=rng)
    batch = collate([short, long_])
    np.testing.assert_array_equal(batch.mask, [[1, 1, 0, 0, 0], [1] * 5])
    learner = _small_learner()
    alone, _ = td_loss(learner, collate([short]))
    _, info = td_loss(learner, batch)
    # time-major layout: rows t*B + b
    err = (info["q_tot"] - info["targets"]).reshape(5, 2)
    np.testing.assert_allclose(np.mean(err[:2, 0] ** 2), float(alone.data), rtol=1e-10)


def test_bandit_td_loss_converges():
    rng = np.random.default_rng(0)
    learner = _small_learner(0, lr=5e-3)
    buf = ReplayBuffer(64)
    for _ in range(64):
        a = rng.integers(0, 3, size=(1, 2))
        ep = _episode(1, rng=rng)
        ep.actions = a
        ep.rewards = np.array([float((a == 0).sum())])
        ep.states = np.zeros_like(ep.states)
        buf.push(ep)
    loss = np.inf
    for _ in range(2000):
        loss = td_update(learner, buf.sample(16, rng))
        if loss < 1e-3:
            break
    assert loss < 1e-3


# target sync -------------------------------------------------------------------
def _pair():
    arch = dc.mlp_arch([2, 2], activation=None)
    src = dc.ModelParams(arch, {"w0": np.ones((2, 2)), "b0": np.ones(2)})
    tgt = dc.ModelParams(arch, {"w0": np.zeros((2, 2)), "b0": np.zeros(2)})
    return src, tgt


def test_sync_full_is_copy():
    src, tgt = _pair()
    sync_target(src, tgt, 1.0)
    for k in src.tensors:
        np.testing.assert_array_equal(tgt.tensors[k].data, src.tensors[k].data)
    tgt.tensors["w0"].data[0, 0] = 9.0
    assert src.tensors["w0"].data[0, 0] == 1.0


def test_sync_half_twice():
    src, tgt = _pair()
    sync_target(src, tgt, 0.5)
    sync_target(src, tgt, 0.5)
    np.testing.assert_allclose(tgt.tensors["w0"].data, 0.75)


def test_repeated_sync_converges():
    src, tgt = _pair()
    for _ in range(2000):
        sync_target(src, tgt, 0.01)
    np.testing.assert_allclose(tgt.tensors["b0"].data, 1.0, atol=1e-8)


def test_sync_rejects_bad_coefficient():
    src, tgt = _pair()
    with pytest.raises(ValueError):
        sync_target(src, tgt, 0.0)


# replay ------------------------------------------------------------------------
def test_replay_evicts_oldest():
    buf = ReplayBuffer(5000)
    rng = np.random.default_rng(0)
    eps = [_episode(1, rng=rng, reward=float(k)) for k in range(5001)]
    for e in eps:
        buf.push(e)
    assert len(buf) == 5000
    assert buf[0].rewards[0] == 1.0
    assert buf[4999].rewards[0] == 5000.0


def test_replay_sampling_deterministic():
    buf = ReplayBuffer(50)
    for k in range(50):
        buf.push(_episode(2, reward=float(k)))
    a = buf.sample_indices(32, np.random.default_rng(9))
    b = buf.sample_indices(32, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


def test_replay_indices_uniform():
    buf = ReplayBuffer(10)
    for k in range(10):
        buf.push(_episode(1, reward=float(k)))
    rng = np.random.default_rng(1)
    idx = np.concatenate([buf.sample_indices(8, rng) for _ in range(2500)])
    assert stats.chisquare(np.bincount(idx, minlength=10)).pvalue > 0.01


def test_underfilled_buffer_rejected():
    buf = ReplayBuffer(10)
    buf.push(_episode(1))
    with pytest.raises(UnderfilledBufferError):
        buf.sample(4, np.random.default_rng(0))


def test_partial_episode_rejected():
    ep = _episode(3)
    ep.complete = False
    with pytest.raises(ValueError):
        ReplayBuffer(4).push(ep)
