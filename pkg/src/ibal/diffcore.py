"""Dense reverse-mode autodiff on numpy arrays, plus the layers and optimizer
every learned model in the package is built from.

Graphs are recorded on the fly while any input requires a gradient and are
released by :func:`grad` once the backward sweep is done. Everything is
float64.
"""
from __future__ import annotations

import contextlib
import copy
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    """Raised by :func:`rmsprop_step` when a gradient contains inf/nan.

    ``names`` lists the offending parameters; the parameters and optimizer
    state are left untouched.
    """

    def __init__(self, names):
        self.names = list(names)
        super().__init__(f"non-finite gradient for: {', '.join(self.names)}")


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> list:
        return self.data.ravel().tolist()

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# elementwise ----------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _node(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def elu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    neg = np.exp(np.minimum(a.data, 0.0))
    out = np.where(pos, a.data, neg - 1.0)
    return _node(out, (a,), lambda g: (np.where(pos, g, g * neg),))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    sgn = np.sign(a.data)
    return _node(np.abs(a.data), (a,), lambda g: (g * sgn,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp; the gradient is zero wherever the clamp is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


ACTIVATIONS = {"relu": relu, "elu": elu, "tanh": tanh, "sigmoid": sigmoid, None: None, "none": None}


# structural -----------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dimensions")

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(ad @ bd, (a, b), back)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    basic = all(isinstance(i, (slice, int, type(Ellipsis), type(None)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def back(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _node(a.data[idx], (a,), back)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), back)


def take_along(a, index: np.ndarray, axis: int = -1) -> Tensor:
    """Gather ``a`` along ``axis`` with an integer index of matching rank."""
    a = as_tensor(a)
    index = np.asarray(index)
    shape = a.shape

    def back(g):
        # put_along_axis does not accumulate: callers gather distinct positions
        out = np.zeros(shape)
        np.put_along_axis(out, index, g, axis=axis)
        return (out,)

    return _node(np.take_along_axis(a.data, index, axis=axis), (a,), back)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _node(out, (a,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def softmax(a, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis))


# graph traversal ------------------------------------------------------------
def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(loss: Tensor, wrt, retain_graph: bool = False):
    """Reverse-mode gradients of a scalar ``loss``.

    ``wrt`` may be a Tensor, a list of Tensors, a dict of Tensors or a
    :class:`ModelParams`; the result mirrors its structure with numpy arrays.
    Leaves the loss does not depend on get exact zeros.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topo_order(loss)):
            if node._backward is None:
                continue
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad or pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            if not retain_graph:
                node._parents = ()
                node._backward = None

    def pick(t: Tensor) -> np.ndarray:
        g = grads.get(id(t))
        return np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape)

    if isinstance(wrt, Tensor):
        return pick(wrt)
    if isinstance(wrt, ModelParams):
        return {k: pick(t) for k, t in wrt.tensors.items()}
    if isinstance(wrt, dict):
        return {k: pick(t) for k, t in wrt.items()}
    return [pick(t) for t in wrt]


# parameters -----------------------------------------------------------------
def mlp_shapes(arch: dict) -> dict:
    sizes = arch["sizes"]
    out = {}
    for k in range(len(sizes) - 1):
        out[f"w{k}"] = (sizes[k], sizes[k + 1])
        out[f"b{k}"] = (sizes[k + 1],)
    return out


def gru_shapes(arch: dict) -> dict:
    i, h = arch["input"], arch["hidden"]
    return {"w_x": (i, 3 * h), "w_h": (h, 3 * h), "b_x": (3 * h,), "b_h": (3 * h,)}


def expected_shapes(arch: dict) -> dict:
    kind = arch["kind"]
    if kind == "mlp":
        return mlp_shapes(arch)
    if kind == "gru":
        return gru_shapes(arch)
    if kind == "composite":
        out = {}
        for part, sub_arch in arch["parts"].items():
            for name, shape in expected_shapes(sub_arch).items():
                out[f"{part}.{name}"] = shape
        return out
    raise ValueError(f"unknown architecture kind {kind!r}")


@dataclass
class ModelParams:
    arch: dict
    tensors: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tensors = {k: t if isinstance(t, Tensor) else Tensor(t, requires_grad=True)
                        for k, t in self.tensors.items()}
        for t in self.tensors.values():
            t.requires_grad = True
        self.validate()

    def validate(self):
        want = expected_shapes(self.arch)
        missing = sorted(set(want) - set(self.tensors))
        if missing:
            raise ShapeError(f"missing parameters: {missing}")
        for name, shape in want.items():
            if tuple(self.tensors[name].shape) != tuple(shape):
                raise ShapeError(f"parameter {name}: expected {tuple(shape)}, got {self.tensors[name].shape}")
        extra = sorted(set(self.tensors) - set(want))
        if extra:
            raise ShapeError(f"unexpected parameters: {extra}")

    def part(self, name: str) -> "ModelParams":
        sub = ModelParams.__new__(ModelParams)
        sub.arch = self.arch["parts"][name]
        prefix = name + "."
        sub.tensors = {k[len(prefix):]: t for k, t in self.tensors.items() if k.startswith(prefix)}
        return sub

    def arrays(self) -> dict:
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(copy.deepcopy(self.arch), {k: t.data.copy() for k, t in self.tensors.items()})

    def load_arrays(self, arrays: dict) -> None:
        for k, t in self.tensors.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != t.shape:
                raise ShapeError(f"parameter {k}: expected {t.shape}, got {a.shape}")
            t.data = a.copy()


def init_params(arch: dict, rng: np.random.Generator) -> ModelParams:
    """PyTorch-style uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation."""
    tensors = {}

    def fill(a: dict, prefix: str):
        if a["kind"] == "composite":
            for part, sub_arch in a["parts"].items():
                fill(sub_arch, f"{prefix}{part}.")
            return
        if a["kind"] == "gru":
            bound = 1.0 / np.sqrt(a["hidden"])
            for name, shape in gru_shapes(a).items():
                tensors[prefix + name] = rng.uniform(-bound, bound, size=shape)
            return
        sizes = a["sizes"]
        for k in range(len(sizes) - 1):
            bound = 1.0 / np.sqrt(sizes[k])
            tensors[f"{prefix}w{k}"] = rng.uniform(-bound, bound, size=(sizes[k], sizes[k + 1]))
            tensors[f"{prefix}b{k}"] = rng.uniform(-bound, bound, size=(sizes[k + 1],))

    fill(arch, "")
    return ModelParams(arch, tensors)


def mlp_arch(sizes, activation="relu", out_activation=None) -> dict:
    return {"kind": "mlp", "sizes": [int(s) for s in sizes], "activation": activation,
            "out_activation": out_activation, "recurrent": False}


def gru_arch(input_size: int, hidden: int) -> dict:
    return {"kind": "gru", "input": int(input_size), "hidden": int(hidden), "recurrent": True}


def mlp_forward(params: ModelParams, x) -> Tensor:
    """Feedforward stack; hidden layers use the descriptor's activation."""
    x = as_tensor(x)
    sizes = params.arch["sizes"]
    act = ACTIVATIONS[params.arch.get("activation")]
    out_act = ACTIVATIONS[params.arch.get("out_activation")]
    n_layers = len(sizes) - 1
    for k in range(n_layers):
        w, b = params.tensors[f"w{k}"], params.tensors[f"b{k}"]
        if x.shape[-1] != w.shape[0]:
            raise ShapeError(f"layer w{k}: input has {x.shape[-1]} features, layer expects {w.shape[0]}")
        if x.ndim == 1:
            x = reshape(x, (1, -1))
            x = reshape(add(matmul(x, w), b), (-1,))
        elif x.ndim == 2:
            x = affine(x, w, b)
        else:
            x = add(matmul(x, w), b)
        f = act if k < n_layers - 1 else out_act
        if f is not None:
            x = f(x)
    return x


def affine(x, w, b) -> Tensor:
    """Fused ``x @ w + b`` for 2-D ``x``."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    xd, wd = x.data, w.data

    def back(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _node(xd @ wd + b.data, (x, w, b), back)


def gru_cell(x, hidden, w_x, w_h, b_x, b_h) -> Tensor:
    """Fused gated-recurrent-unit update on 2-D batches (gate order r, z, n)."""
    x, hidden = as_tensor(x), as_tensor(hidden)
    w_x, w_h, b_x, b_h = map(as_tensor, (w_x, w_h, b_x, b_h))
    xd, hd, wxd, whd = x.data, hidden.data, w_x.data, w_h.data
    H = hd.shape[-1]
    gx = xd @ wxd + b_x.data
    gh = hd @ whd + b_h.data
    r = 0.5 * (1.0 + np.tanh(0.5 * (gx[:, :H] + gh[:, :H])))
    z = 0.5 * (1.0 + np.tanh(0.5 * (gx[:, H:2 * H] + gh[:, H:2 * H])))
    ghn = gh[:, 2 * H:]
    n = np.tanh(gx[:, 2 * H:] + r * ghn)
    out = (1.0 - z) * n + z * hd

    def back(g):
        dn_pre = g * (1.0 - z) * (1.0 - n * n)
        dz_pre = g * (hd - n) * z * (1.0 - z)
        dr_pre = dn_pre * ghn * r * (1.0 - r)
        dgx = np.concatenate([dr_pre, dz_pre, dn_pre], axis=1)
        dgh = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=1)
        return (dgx @ wxd.T, g * z + dgh @ whd.T, xd.T @ dgx, hd.T @ dgh,
                dgx.sum(axis=0), dgh.sum(axis=0))

    return _node(out, (x, hidden, w_x, w_h, b_x, b_h), back)


def recurrent_step(params: ModelParams, x, hidden) -> tuple:
    """One gated-recurrent-unit update. Returns ``(output, hidden_next)``;
    the output is the new hidden state."""
    x, hidden = as_tensor(x), as_tensor(hidden)
    hsize = params.arch["hidden"]
    if hidden.shape[-1] != hsize:
        raise ShapeError(f"hidden size {hidden.shape[-1]} does not match cell size {hsize}")
    if x.shape[-1] != params.arch["input"]:
        raise ShapeError(f"gru: input has {x.shape[-1]} features, cell expects {params.arch['input']}")
    if not np.isfinite(hidden.data).all():
        raise FloatingPointError("non-finite hidden state")
    t = params.tensors
    if x.ndim == 2 and hidden.ndim == 2:
        h_next = gru_cell(x, hidden, t["w_x"], t["w_h"], t["b_x"], t["b_h"])
        return h_next, h_next
    gx = add(matmul(x, t["w_x"]), t["b_x"])
    gh = add(matmul(hidden, t["w_h"]), t["b_h"])
    r = sigmoid(add(gx[..., :hsize], gh[..., :hsize]))
    z = sigmoid(add(gx[..., hsize:2 * hsize], gh[..., hsize:2 * hsize]))
    n = tanh(add(gx[..., 2 * hsize:], mul(r, gh[..., 2 * hsize:])))
    h_next = add(mul(sub(1.0, z), n), mul(z, hidden))
    return h_next, h_next


# optimisation ---------------------------------------------------------------
@dataclass
class OptimizerState:
    sq: dict
    lr: float = 5e-4
    alpha: float = 0.99
    eps: float = 1e-5

    @classmethod
    def for_params(cls, params: ModelParams, lr=5e-4, alpha=0.99, eps=1e-5) -> "OptimizerState":
        return cls({k: np.zeros_like(t.data) for k, t in params.tensors.items()}, lr, alpha, eps)

    def copy(self) -> "OptimizerState":
        return OptimizerState({k: v.copy() for k, v in self.sq.items()}, self.lr, self.alpha, self.eps)


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if np.isfinite(total) and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


def rmsprop_step(params: ModelParams, grads: dict, state: OptimizerState):
    """In-place RMSProp update (PyTorch convention: eps added after sqrt)."""
    if set(grads) != set(params.tensors) or set(state.sq) != set(params.tensors):
        raise KeyError("parameter, gradient and optimizer key sets differ")
    bad = sorted(k for k, g in grads.items() if not np.isfinite(g).all())
    if bad:
        raise NonFiniteGradientError(bad)
    a = state.alpha
    for k, t in params.tensors.items():
        g = grads[k]
        sq = state.sq[k] = a * state.sq[k] + (1.0 - a) * g * g
        t.data = t.data - state.lr * g / (np.sqrt(sq) + state.eps)
    return params, state
