"""Small reverse-mode autodiff engine on numpy arrays.

Sized for this lab: 2-D convolutions (dispatched to the kernel backend),
dense layers, the handful of pointwise ops the losses need, and AdamW.
Everything is deterministic given the numpy Generators passed in; there is
no implicit global RNG and no train/eval mode distinction.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import kernels

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self):
        return Tensor(self.data)

    def item(self):
        return float(self.data)

    # -- graph machinery ---------------------------------------------------

    def _accumulate(self, grad):
        if self.grad is None:
            self.grad = grad.astype(self.data.dtype, copy=True)
        else:
            self.grad += grad

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad requires a scalar")
            grad = np.ones_like(self.data)
        order, seen = [], set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            order.append(t)

        visit(self)
        grads = {id(self): grad}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.requires_grad:
                t._accumulate(g)
            if t._backward is None:
                continue
            for parent, pg in zip(t._parents, t._backward(g)):
                if pg is None or not (parent.requires_grad or parent._parents):
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __rsub__(self, other):
        return add(_wrap(other), -self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose2d(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


astensor = _wrap


def _wrap_pair(a, b):
    """Wrap operands; scalar constants adopt the tensor operand's dtype so
    float32 graphs are not silently promoted to float64."""
    at, bt = isinstance(a, Tensor), isinstance(b, Tensor)
    a, b = _wrap(a), _wrap(b)
    if at and not bt and b.data.ndim == 0 and b.data.dtype != a.data.dtype \
            and b.data.dtype.kind == "f":
        b = Tensor(b.data.astype(a.data.dtype))
    if bt and not at and a.data.ndim == 0 and a.data.dtype != b.data.dtype \
            and a.data.dtype.kind == "f":
        a = Tensor(a.data.astype(b.data.dtype))
    return a, b


def _make(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def add(a, b):
    a, b = _wrap_pair(a, b)
    data = a.data + b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                          _unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = _wrap_pair(a, b)
    data = a.data * b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                          _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _wrap_pair(a, b)
    data = a.data / b.data
    return _make(data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data @ b.data
    return _make(data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose2d(a):
    return _make(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tensors, backward)


def tsum(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else axis
            g = np.expand_dims(g, tuple(sorted(ax % a.data.ndim for ax in axes)))
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

    return _make(np.asarray(data), (a,), backward)


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def relu(a):
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a, slope=0.2):
    factor = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _make(a.data * factor, (a,), lambda g: (g * factor,))


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a):
    s = _sigmoid_np(a.data)
    return _make(a.data * s, (a,), lambda g: (g * (s * (1.0 + a.data * (1.0 - s))),))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def square(a):
    return _make(a.data * a.data, (a,), lambda g: (g * 2.0 * a.data,))


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def conv2d(x, w, stride=1, pad=0):
    x, w = _wrap(x), _wrap(w)
    data = kernels.conv2d_forward(x.data, w.data, stride, pad)

    def backward(g):
        g = np.ascontiguousarray(g, dtype=x.data.dtype)
        return (kernels.conv2d_backward_x(g, w.data, x.shape, stride, pad),
                kernels.conv2d_backward_w(g, x.data, w.shape, stride, pad))

    return _make(data, (x, w), backward)


def upsample2x(a):
    data = a.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        n, c, h, w = a.shape
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(data, (a,), backward)


def space_to_depth(a, r):
    """(N, C, H, W) -> (N, C*r*r, H/r, W/r), inverse of depth_to_space."""
    n, c, h, w = a.shape
    data = (a.data.reshape(n, c, h // r, r, w // r, r)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, c * r * r, h // r, w // r))

    def backward(g):
        return (g.reshape(n, c, r, r, h // r, w // r)
                .transpose(0, 1, 4, 2, 5, 3)
                .reshape(n, c, h, w),)

    return _make(np.ascontiguousarray(data), (a,), backward)


def depth_to_space(a, r):
    """(N, C*r*r, H, W) -> (N, C, H*r, W*r) sub-pixel rearrangement."""
    n, crr, h, w = a.shape
    c = crr // (r * r)
    data = (a.data.reshape(n, c, r, r, h, w)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, c, h * r, w * r))

    def backward(g):
        return (g.reshape(n, c, h, r, w, r)
                .transpose(0, 1, 3, 5, 2, 4)
                .reshape(n, crr, h, w),)

    return _make(np.ascontiguousarray(data), (a,), backward)


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy on raw logits (numerically stable)."""
    x = logits.data
    y = np.asarray(targets, dtype=x.dtype).reshape(x.shape)
    loss = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        return ((_sigmoid_np(x) - y) * (g / x.size),)

    return _make(np.asarray(loss.mean()), (logits,), backward)


def l2_normalize(a, eps=1e-12):
    """Row-wise unit-norm features, (B, D) -> (B, D)."""
    norm = sqrt(tsum(square(a), axis=1, keepdims=True) + eps)
    return div(a, norm)


def logsumexp_rows(a):
    """Row-wise log(sum(exp)), shape (B, K) -> (B, 1)."""
    shift = np.max(a.data, axis=1, keepdims=True)
    return add(log(tsum(exp(add(a, -shift)), axis=1, keepdims=True)), shift)


# -- modules -----------------------------------------------------------------


class Module:
    def named_params(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_params(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{name}.{i}.")

    def params(self):
        return [t for _, t in self.named_params()]

    def state_dict(self):
        return {name: t.data.copy() for name, t in self.named_params()}

    def load_state_dict(self, state):
        own = dict(self.named_params())
        missing = set(own) ^ set(state)
        if missing:
            raise KeyError(f"state mismatch on keys: {sorted(missing)}")
        for name, t in own.items():
            if t.data.shape != state[name].shape:
                raise ValueError(f"shape mismatch for {name}")
            t.data = state[name].astype(t.data.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, pad=None, dtype=DEFAULT_DTYPE):
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        std = np.sqrt(2.0 / (cin * k * k))
        self.w = Tensor(rng.normal(0.0, std, (cout, cin, k, k)).astype(dtype),
                        requires_grad=True)
        self.b = Tensor(np.zeros((1, cout, 1, 1), dtype=dtype), requires_grad=True)

    def forward(self, x):
        return add(conv2d(x, self.w, self.stride, self.pad), self.b)


class Linear(Module):
    def __init__(self, din, dout, rng, dtype=DEFAULT_DTYPE):
        std = np.sqrt(2.0 / din)
        self.w = Tensor(rng.normal(0.0, std, (din, dout)).astype(dtype),
                        requires_grad=True)
        self.b = Tensor(np.zeros(dout, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return add(matmul(x, self.w), self.b)


class ReLU(Module):
    def forward(self, x):
        return relu(x)


class LeakyReLU(Module):
    def __init__(self, slope=0.2):
        self.slope = slope

    def forward(self, x):
        return leaky_relu(x, self.slope)


class Tanh(Module):
    def forward(self, x):
        return tanh(x)


class SiLU(Module):
    def forward(self, x):
        return silu(x)


class Sigmoid(Module):
    def forward(self, x):
        return sigmoid(x)


class Upsample2x(Module):
    def forward(self, x):
        return upsample2x(x)


class DepthToSpace(Module):
    def __init__(self, r):
        self.r = r

    def forward(self, x):
        return depth_to_space(x, self.r)


class SpaceToDepth(Module):
    def __init__(self, r):
        self.r = r

    def forward(self, x):
        return space_to_depth(x, self.r)


class GlobalAvgPool(Module):
    def forward(self, x):
        return tmean(x, axis=(2, 3))


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


ACTIVATIONS = {
    "relu": ReLU,
    "leaky_relu": LeakyReLU,
    "tanh": Tanh,
    "silu": SiLU,
}


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= (self.lr * update).astype(p.data.dtype, copy=False)
