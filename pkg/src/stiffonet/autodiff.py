"""Reverse-mode automatic differentiation on numpy arrays.

A dynamic tape: every op builds a ``Var`` node holding the forward value and
a closure that routes the upstream gradient to its parents. The graph is
rebuilt per training step, so varying minibatch shapes cost nothing.

The differentiable op set is deliberately small: arithmetic with numpy
broadcasting, matmul/einsum contractions, tanh/sin/exp, softmax over the
trailing axis, reshape/stack/take, and sum/mean reductions. That closes over
everything the operator models and losses need.
"""

import numpy as np

from . import tensor_ops
from .errors import DimensionError


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` by summing the broadcast axes."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Var:
    """A node in the autodiff graph wrapping a float64 ndarray."""

    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(self, value, _parents=(), _backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    # -- graph construction helpers -------------------------------------

    @staticmethod
    def of(x) -> "Var":
        return x if isinstance(x, Var) else Var(x)

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        other = Var.of(other)
        out = Var(self.value + other.value, (self, other))

        def backward():
            self._accumulate(_unbroadcast(out.grad, self.value.shape))
            other._accumulate(_unbroadcast(out.grad, other.value.shape))

        out._backward = backward
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Var(-self.value, (self,))
        out._backward = lambda: self._accumulate(-out.grad)
        return out

    def __sub__(self, other):
        return self + (-Var.of(other))

    def __rsub__(self, other):
        return Var.of(other) + (-self)

    def __mul__(self, other):
        other = Var.of(other)
        out = Var(self.value * other.value, (self, other))

        def backward():
            self._accumulate(_unbroadcast(out.grad * other.value, self.value.shape))
            other._accumulate(_unbroadcast(out.grad * self.value, other.value.shape))

        out._backward = backward
        return out

    __rmul__ = __mul__

    def __pow__(self, n):
        if not isinstance(n, (int, float)):
            raise TypeError("only scalar powers are supported")
        out = Var(self.value ** n, (self,))
        out._backward = lambda: self._accumulate(out.grad * n * self.value ** (n - 1))
        return out

    def __matmul__(self, other):
        other = Var.of(other)
        if self.value.ndim != 2 or other.value.ndim != 2:
            raise DimensionError("matmul is defined for matrices only")
        return einsum("ij,jk->ik", self, other)

    # -- elementwise functions --------------------------------------------

    def tanh(self):
        t = np.tanh(self.value)
        out = Var(t, (self,))
        out._backward = lambda: self._accumulate(out.grad * (1.0 - t * t))
        return out

    def sin(self):
        out = Var(np.sin(self.value), (self,))
        out._backward = lambda: self._accumulate(out.grad * np.cos(self.value))
        return out

    def exp(self):
        e = np.exp(self.value)
        out = Var(e, (self,))
        out._backward = lambda: self._accumulate(out.grad * e)
        return out

    # -- shape ops ---------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Var(self.value.reshape(shape), (self,))
        out._backward = lambda: self._accumulate(out.grad.reshape(self.value.shape))
        return out

    def swap_last2(self):
        """Transpose the two trailing axes."""
        out = Var(self.value.swapaxes(-1, -2), (self,))
        out._backward = lambda: self._accumulate(out.grad.swapaxes(-1, -2))
        return out

    def take_last(self, indices):
        """Select ``indices`` along the trailing axis (fancy indexing)."""
        indices = np.asarray(indices, dtype=np.intp)
        out = Var(np.take(self.value, indices, axis=-1), (self,))

        def backward():
            g = np.zeros_like(self.value)
            np.add.at(g.swapaxes(-1, 0), indices, out.grad.swapaxes(-1, 0))
            self._accumulate(g)

        out._backward = backward
        return out

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Var(self.value.sum(axis=axis, keepdims=keepdims), (self,))

        def backward():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.value.shape).copy())

        out._backward = backward
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- structured ops -------------------------------------------------------

    def softmax_last(self):
        s = tensor_ops.softmax_last_axis(self.value)
        out = Var(s, (self,))

        def backward():
            inner = np.sum(out.grad * s, axis=-1, keepdims=True)
            self._accumulate(s * (out.grad - inner))

        out._backward = backward
        return out

    def backward(self):
        """Seed this (scalar) node with gradient 1 and sweep the tape."""
        if self.value.ndim != 0 and self.value.size != 1:
            raise DimensionError(f"backward() needs a scalar, got shape {self.value.shape}")
        topo, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        for node in topo:
            node.grad = None
        self.grad = np.ones_like(self.value)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()


def einsum(spec: str, a: Var, b: Var) -> Var:
    """Binary einsum with automatic gradients.

    Works for any contraction where each input index appears either in the
    output or in the other operand (true for every pattern used here).
    """
    a, b = Var.of(a), Var.of(b)
    in_specs, out_spec = spec.replace(" ", "").split("->")
    a_spec, b_spec = in_specs.split(",")
    out = Var(np.einsum(spec, a.value, b.value), (a, b))

    def backward():
        a._accumulate(np.einsum(f"{out_spec},{b_spec}->{a_spec}", out.grad, b.value))
        b._accumulate(np.einsum(f"{out_spec},{a_spec}->{b_spec}", out.grad, a.value))

    out._backward = backward
    return out


def stack_last(vars_: list) -> Var:
    """Stack equal-shape Vars along a new trailing axis."""
    vars_ = [Var.of(v) for v in vars_]
    out = Var(np.stack([v.value for v in vars_], axis=-1), tuple(vars_))

    def backward():
        for i, v in enumerate(vars_):
            v._accumulate(out.grad[..., i])

    out._backward = backward
    return out


def grad(loss: Var, params: list) -> list:
    """d(loss)/d(param) for each param; zeros if a param is unreachable."""
    if loss.value.ndim != 0 and loss.value.size != 1:
        raise DimensionError(f"loss must be scalar, got shape {loss.value.shape}")
    for p in params:
        p.grad = None
    loss.backward()
    return [p.grad if p.grad is not None else np.zeros_like(p.value) for p in params]


class AdamState:
    """Adam moments and step counter for a fixed list of parameters."""

    def __init__(self, params: list, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]


def adam_step(state: AdamState, params: list, grads: list, lr=None) -> None:
    """One Adam update with bias correction, in place on ``params``."""
    if lr is None:
        lr = state.lr
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.value.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.value.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / (1 - b1 ** t)
        v_hat = state.v[i] / (1 - b2 ** t)
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def exponential_halving_lr(base_lr: float, halve_every: int):
    """lr(epoch) = base * 0.5**(epoch // halve_every); the default schedule."""

    def schedule(epoch: int) -> float:
        return base_lr * 0.5 ** (epoch // halve_every)

    return schedule
