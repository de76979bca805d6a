"""A small reverse-mode autodiff engine over dense numpy arrays.

Only what the recursive tree VAE needs is provided: row-batched dense
layers, a few elementwise activations, row gather/scatter for depth-wise
batching, and fused loss primitives. Every op output is checked for
non-finite values.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """Array value plus the information needed to backpropagate into it."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        self.data = data
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable | None = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


class Parameter(Tensor):
    """Trainable leaf with a persistent gradient buffer."""

    __slots__ = ("name", "grad")

    def __init__(self, data: np.ndarray, name: str = ""):
        super().__init__(np.ascontiguousarray(data), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def constant(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


_grad_enabled = True


@contextmanager
def no_grad():
    """Evaluate ops without recording the graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _result(data, parents, backward, op) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward, op)
    return Tensor(data, op=op)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# -- linear algebra ---------------------------------------------------------


def dense(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` for a single row ``(n_in,)`` or a batch ``(k, n_in)``."""
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ValueError(f"shape mismatch in dense: x{x.shape} W{W.shape} b{b.shape}")
    xd = x.data

    def backward(g):
        gx = g @ W.data.T
        if xd.ndim == 1:
            gW = np.outer(xd, g)
            gb = g
        else:
            gW = xd.T @ g
            gb = g.sum(axis=0)
        return gx, gW, gb

    return _result(xd @ W.data + b.data, (x, W, b), backward, "dense")


def add(a: Tensor, b: Tensor) -> Tensor:
    b = _wrap(b, a)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch in add: {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    b = _wrap(b, a)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch in sub: {a.shape} vs {b.shape}")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    b = _wrap(b, a)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch in mul: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % data.ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(data, tensors, backward, "concat")


def take_rows(x: Tensor, idx) -> Tensor:
    """Gather rows ``x[idx]``; repeated indices accumulate gradient."""
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]

    def backward(g):
        gx = np.zeros((n,) + g.shape[1:], dtype=g.dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result(x.data[idx], (x,), backward, "take_rows")


def scatter_rows(x: Tensor, idx, n_rows: int) -> Tensor:
    """Place row ``i`` of ``x`` at ``idx[i]`` of an ``n_rows`` zero matrix."""
    idx = np.asarray(idx, dtype=np.int64)
    if len(np.unique(idx)) != len(idx):
        raise ValueError("scatter_rows needs unique indices")
    out = np.zeros((n_rows,) + x.shape[1:], dtype=x.dtype)
    out[idx] = x.data
    return _result(out, (x,), lambda g: (g[idx],), "scatter_rows")


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE))


# -- elementwise ------------------------------------------------------------


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    xd = x.data
    s = xd.dtype.type(slope)
    factor = np.where(xd > 0, xd.dtype.type(1), s)
    return _result(xd * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1 - y * y),), "tanh")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


# -- reductions and losses --------------------------------------------------


def total(x: Tensor) -> Tensor:
    """Sum of all entries as a 0-d tensor."""
    shape = x.shape
    return _result(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return scale(total(x), 1.0 / n)


def weighted_sum(x: Tensor, w) -> Tensor:
    """``sum(x * w)`` with ``w`` a constant array broadcastable to ``x``."""
    w = np.asarray(w, dtype=x.dtype)
    wb = np.broadcast_to(w, x.shape)
    return _result(np.sum(x.data * wb), (x,), lambda g: (g * wb,), "weighted_sum")


def squared_l2(a: Tensor, b) -> Tensor:
    """``||a - b||^2`` summed over all entries."""
    b = _wrap(b, a)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch in squared_l2: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    two = a.dtype.type(2)
    return _result(np.sum(diff * diff), (a, b), lambda g: (two * g * diff, -two * g * diff), "squared_l2")


def row_squared_error(a: Tensor, b) -> Tensor:
    """Per-row ``sum_j (a_ij - b_ij)^2`` for 2-D inputs."""
    b = _wrap(b, a)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch in row_squared_error: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    two = a.dtype.type(2)

    def backward(g):
        gd = two * g[:, None] * diff
        return gd, -gd

    return _result(np.sum(diff * diff, axis=1), (a, b), backward, "row_squared_error")


def cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """Per-row softmax cross-entropy (stable log-sum-exp)."""
    z = logits.data
    t = np.asarray(targets, dtype=np.int64)
    if z.ndim != 2 or len(t) != z.shape[0]:
        raise ValueError("cross_entropy_rows expects (k, c) logits and k targets")
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(t))
    loss = lse - shifted[rows, t]

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, t] -= 1
        return (g[:, None] * p,)

    return _result(loss, (logits,), backward, "cross_entropy")


def softmax_cross_entropy(logits: Tensor, target: int, weight: float = 1.0) -> Tensor:
    """Weighted cross-entropy of one logit vector against class ``target``."""
    if not 0 <= int(target) < logits.shape[-1]:
        raise ValueError(f"target {target} outside [0, {logits.shape[-1]})")
    rows = logits if logits.data.ndim == 2 else reshape(logits, (1, -1))
    return weighted_sum(cross_entropy_rows(rows, [int(target)]), [weight])


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def gaussian_kl_rows(mu: Tensor, logvar: Tensor) -> Tensor:
    """Per-row KL of ``N(mu, exp(logvar))`` to ``N(0, I)``."""
    m, lv = mu.data, logvar.data
    e = np.exp(lv)
    half = m.dtype.type(0.5)
    kl = -half * np.sum(1 + lv - m * m - e, axis=-1)

    def backward(g):
        g = np.asarray(g)[..., None]
        return g * m, g * half * (e - 1)

    return _result(kl, (mu, logvar), backward, "gaussian_kl")


# -- backward sweep ---------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad: float = 1.0) -> None:
    """Accumulate ``d loss / d param`` into every reachable ``Parameter.grad``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.full(loss.shape, grad, dtype=loss.dtype)}
    for t in reversed(_topological(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if isinstance(t, Parameter):
            t.grad += g
            continue
        if t._backward is None:
            continue
        for p, gp in zip(t._parents, t._backward(g)):
            if not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = gp


# -- parameters and optimizer -----------------------------------------------


class ParamStore:
    """Named parameters with gradient and Adam moment buffers.

    Iteration order is sorted by name so serialization and updates are
    deterministic.
    """

    def __init__(self, dtype=DEFAULT_DTYPE):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Parameter] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        p = Parameter(np.asarray(value, dtype=self.dtype), name)
        self._params[name] = p
        self.m[name] = np.zeros_like(p.data)
        self.v[name] = np.zeros_like(p.data)
        return p

    def __getitem__(self, name) -> Parameter:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(sorted(self._params))

    def __len__(self):
        return len(self._params)

    def items(self):
        return [(k, self._params[k]) for k in sorted(self._params)]

    def count(self, prefix: str = "") -> int:
        return int(sum(p.data.size for k, p in self._params.items() if k.startswith(prefix)))

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad.fill(0)

    def adam_step(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
        """Bias-corrected Adam update, then gradients are zeroed."""
        self.step += 1
        t = self.step
        c1 = 1.0 - beta1**t
        c2 = 1.0 - beta2**t
        dt = self.dtype.type
        b1, b2 = dt(beta1), dt(beta2)
        for name, p in self.items():
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            mhat = m / dt(c1)
            vhat = v / dt(c2)
            p.data -= dt(lr) * mhat / (np.sqrt(vhat) + dt(eps))
            g.fill(0)

    def state(self) -> dict:
        return {
            "params": {k: p.data for k, p in self.items()},
            "m": {k: self.m[k] for k in sorted(self.m)},
            "v": {k: self.v[k] for k in sorted(self.v)},
            "step": self.step,
        }

    def load_state(self, state: dict) -> None:
        for k, p in self._params.items():
            arr = np.asarray(state["params"][k])
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.data.shape}")
            p.data[...] = arr
            self.m[k][...] = state["m"][k]
            self.v[k][...] = state["v"][k]
            p.grad.fill(0)
        self.step = int(state["step"])


def glorot_uniform(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_in, n_out))
