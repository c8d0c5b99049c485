import numpy as np
import pytest

from ibal import diffcore as dc
from ibal.diffcore import (ModelParams, OptimizerState, Tensor, grad, gru_arch, init_params,
                           mlp_arch, mlp_forward, recurrent_step, rmsprop_step)


def _fd_check(loss_fn, params: ModelParams, step=1e-4):
    """Max relative error of analytic vs central finite-difference gradients."""
    analytic = grad(loss_fn(), params)
    worst = 0.0
    for name, t in params.tensors.items():
        num = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + step
            hi = loss_fn().data.item()
            flat[k] = old - step
            lo = loss_fn().data.item()
            flat[k] = old
            num.reshape(-1)[k] = (hi - lo) / (2 * step)
        scale = max(np.abs(num).max(), np.abs(analytic[name]).max())
        if scale > 0:
            worst = max(worst, np.abs(num - analytic[name]).max() / scale)
    return worst


def test_identity_layer():
    p = ModelParams(mlp_arch([2, 2], activation=None), {"w0": np.eye(2), "b0": np.zeros(2)})
    out = mlp_forward(p, np.array([[1.0, 2.0]]))
    assert out.values == [1.0, 2.0]


def test_zero_weights_gives_bias():
    b = np.array([0.5, -1.5, 2.0])
    p = ModelParams(mlp_arch([4, 3], activation=None), {"w0": np.zeros((4, 3)), "b0": b})
    out = mlp_forward(p, np.random.default_rng(0).normal(size=(5, 4)))
    np.testing.assert_array_equal(out.data, np.tile(b, (5, 1)))


def test_three_layer_matches_straight_line_evaluation():
    rng = np.random.default_rng(7)
    p = init_params(mlp_arch([5, 8, 6, 3], activation="relu"), rng)
    x = rng.normal(size=(4, 5))
    a = p.arrays()
    # oracle: explicit loops, no vectorised numpy
    expected = np.zeros((4, 3))
    for r in range(4):
        h = list(x[r])
        for k, size in enumerate([8, 6, 3]):
            w, b = a[f"w{k}"], a[f"b{k}"]
            nxt = []
            for c in range(size):
                s = b[c]
                for i in range(len(h)):
                    s += h[i] * w[i, c]
                nxt.append(max(s, 0.0) if k < 2 else s)
            h = nxt
        expected[r] = h
    np.testing.assert_allclose(mlp_forward(p, x).data, expected, rtol=1e-12, atol=1e-12)


def test_shape_mismatch_names_layer():
    p = init_params(mlp_arch([3, 4, 2]), np.random.default_rng(0))
    with pytest.raises(dc.ShapeError, match="w0"):
        mlp_forward(p, np.ones((1, 5)))


def test_gru_zero_everything_gives_zero_hidden():
    arch = gru_arch(3, 4)
    p = ModelParams(arch, {k: np.zeros(s) for k, s in dc.gru_shapes(arch).items()})
    _, h = recurrent_step(p, np.zeros((1, 3)), np.zeros((1, 4)))
    np.testing.assert_array_equal(h.data, np.zeros((1, 4)))


def test_gru_fixed_point_under_repeated_input():
    rng = np.random.default_rng(3)
    p = init_params(gru_arch(3, 6), rng)
    x = rng.normal(size=(1, 3))
    h = np.zeros((1, 6))
    with dc.no_grad():
        for step in range(200):
            _, nxt = recurrent_step(p, x, h)
            delta = np.abs(nxt.data - h).max()
            h = nxt.data
            if delta < 1e-6:
                break
    assert delta < 1e-6


def test_gru_hidden_stays_inside_unit_interval():
    rng = np.random.default_rng(11)
    p = init_params(gru_arch(4, 8), rng)
    for t in p.tensors.values():
        t.data = t.data * 3.0
    h = np.zeros((16, 8))
    with dc.no_grad():
        for _ in range(30):
            _, out = recurrent_step(p, rng.normal(scale=3, size=(16, 4)), h)
            h = out.data
            assert np.all(np.abs(h) < 1.0)


def test_gru_rejects_nonfinite_hidden():
    p = init_params(gru_arch(2, 2), np.random.default_rng(0))
    with pytest.raises(FloatingPointError):
        recurrent_step(p, np.zeros((1, 2)), np.array([[np.nan, 0.0]]))


def test_grad_of_square():
    x = Tensor(3.0, requires_grad=True)
    assert grad(x * x, x) == pytest.approx(6.0)


def test_unused_leaf_gets_exact_zero():
    x = Tensor(np.ones(3), requires_grad=True)
    p = Tensor(np.ones((2, 2)), requires_grad=True)
    g = grad(dc.tsum(dc.square(x)), [x, p])
    assert np.array_equal(g[1], np.zeros((2, 2)))


def test_grad_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(dc.ShapeError):
        grad(x * 2.0, x)


def test_two_layer_net_matches_finite_differences():
    rng = np.random.default_rng(5)
    p = init_params(mlp_arch([4, 7, 3], activation="elu"), rng)
    x = rng.normal(size=(6, 4))
    y = rng.normal(size=(6, 3))
    err = _fd_check(lambda: dc.tmean(dc.square(mlp_forward(p, x) - y)), p)
    assert err <= 1e-4


def test_gru_matches_finite_differences():
    rng = np.random.default_rng(9)
    p = init_params(gru_arch(3, 4), rng)
    x = rng.normal(size=(5, 3))
    h0 = rng.uniform(-0.5, 0.5, size=(5, 4))

    def loss():
        h = h0
        for _ in range(3):
            _, h = recurrent_step(p, x, h)
        return dc.tsum(dc.square(h))

    assert _fd_check(loss, p) <= 1e-4


def test_elementwise_ops_match_finite_differences():
    rng = np.random.default_rng(2)
    arch = {"kind": "mlp", "sizes": [3, 4], "activation": None}
    p = init_params(arch, rng)
    x = rng.normal(size=(5, 3))
    idx = rng.integers(0, 4, size=(5, 1))

    def loss():
        z = mlp_forward(p, x)
        a = dc.log_softmax(z)
        b = dc.take_along(a, idx)
        c = dc.concat([dc.tanh(z), dc.exp(dc.clip(z, -0.5, 0.5)), dc.tabs(z) + 1.0], axis=-1)
        d = dc.log(dc.sigmoid(z) + 0.1) / (dc.square(z) + 2.0)
        return dc.tsum(b) + dc.tmean(c) + dc.tsum(d[:, 1:3]) + dc.tsum(dc.reshape(z, (-1,))[::3])

    assert _fd_check(loss, p) <= 1e-4


def test_rmsprop_zero_gradient_leaves_params():
    p = init_params(mlp_arch([2, 2]), np.random.default_rng(0))
    before = {k: v.copy() for k, v in p.arrays().items()}
    st = OptimizerState.for_params(p)
    rmsprop_step(p, {k: np.zeros_like(v) for k, v in before.items()}, st)
    for k in before:
        np.testing.assert_array_equal(p.arrays()[k], before[k])


def test_rmsprop_constant_gradient_step_approaches_lr():
    p = ModelParams(mlp_arch([1, 1]), {"w0": np.zeros((1, 1)), "b0": np.zeros(1)})
    st = OptimizerState.for_params(p, lr=0.01)
    g = {"w0": np.full((1, 1), 0.3), "b0": np.full(1, -2.0)}
    # closed form: accumulator -> g^2 so |step| -> lr * |g| / (|g| + eps)
    for _ in range(3000):
        prev = {k: v.copy() for k, v in p.arrays().items()}
        rmsprop_step(p, g, st)
    for k in g:
        step = np.abs(p.arrays()[k] - prev[k]).item()
        limit = 0.01 * abs(g[k].item()) / (abs(g[k].item()) + 1e-5)
        assert step == pytest.approx(limit, rel=1e-6)
        assert step == pytest.approx(0.01, rel=1e-3)


def test_rmsprop_is_deterministic():
    rng = np.random.default_rng(4)
    base = init_params(mlp_arch([3, 2]), rng)
    grads = {k: rng.normal(size=v.shape) for k, v in base.arrays().items()}
    a, b = base.copy(), base.copy()
    sa, sb = OptimizerState.for_params(a), OptimizerState.for_params(b)
    for _ in range(5):
        rmsprop_step(a, grads, sa)
        rmsprop_step(b, grads, sb)
    for k in grads:
        assert a.arrays()[k].tobytes() == b.arrays()[k].tobytes()


def test_rmsprop_rejects_nonfinite():
    p = init_params(mlp_arch([2, 1]), np.random.default_rng(0))
    before = {k: v.copy() for k, v in p.arrays().items()}
    st = OptimizerState.for_params(p)
    g = {k: np.zeros_like(v) for k, v in before.items()}
    g["b0"] = np.array([np.inf])
    with pytest.raises(dc.NonFiniteGradientError) as info:
        rmsprop_step(p, g, st)
    assert info.value.names == ["b0"]
    for k in before:
        np.testing.assert_array_equal(p.arrays()[k], before[k])
    assert all(not v.any() for v in st.sq.values())


def test_model_params_validates_shapes():
    with pytest.raises(dc.ShapeError):
        ModelParams(mlp_arch([2, 3]), {"w0": np.zeros((2, 2)), "b0": np.zeros(3)})


def _composed_gru(t, x, h):
    """Reference cell assembled from primitive ops only."""
    H = h.shape[-1]
    gx = dc.add(dc.matmul(x, t["w_x"]), t["b_x"])
    gh = dc.add(dc.matmul(h, t["w_h"]), t["b_h"])
    r = dc.sigmoid(dc.add(gx[:, :H], gh[:, :H]))
    z = dc.sigmoid(dc.add(gx[:, H:2 * H], gh[:, H:2 * H]))
    n = dc.tanh(dc.add(gx[:, 2 * H:], dc.mul(r, gh[:, 2 * H:])))
    return dc.add(dc.mul(dc.sub(1.0, z), n), dc.mul(z, h))


def test_fused_gru_matches_primitive_composition():
    rng = np.random.default_rng(11)
    p = init_params(gru_arch(5, 4), rng)
    x = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
    h = Tensor(rng.normal(size=(6, 4)) * 0.5, requires_grad=True)
    fused, _ = dc.recurrent_step(p, x, h)
    ref = _composed_gru(p.tensors, x, h)
    assert np.allclose(fused.data, ref.data, atol=1e-12)
    w = rng.normal(size=(6, 4))
    g1 = grad(dc.tsum(dc.mul(fused, w)), [x, h] + list(p.tensors.values()))
    g2 = grad(dc.tsum(dc.mul(ref, w)), [x, h] + list(p.tensors.values()))
    for a, b in zip(g1, g2):
        assert np.allclose(a, b, atol=1e-10)


def test_fused_affine_matches_finite_differences():
    rng = np.random.default_rng(12)
    p = ModelParams(mlp_arch([3, 4]), {"w0": rng.normal(size=(3, 4)), "b0": rng.normal(size=4)})
    x = rng.normal(size=(7, 3))
    y = rng.normal(size=(7, 4))
    assert _fd_check(lambda: dc.tmean(dc.square(dc.affine(x, p.tensors["w0"], p.tensors["b0"]) - y)), p) <= 1e-4
