"""Dense N-d tensor with reverse-mode automatic differentiation.

A Tensor wraps a float32/float64 NumPy array plus an optional gradient.
Operations record their parents and a backward closure; ``backward`` on a
scalar walks the tape in reverse topological order and accumulates
gradients into every leaf that requires them. Repeated backward calls
accumulate additively (callers zero gradients between steps).
"""

import numpy as np

from .errors import NonScalarLoss, NumericalError

_FINITE_CHECKS = False


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-operation NaN/Inf detection; returns the previous state."""
    global _FINITE_CHECKS
    old, _FINITE_CHECKS = _FINITE_CHECKS, bool(enabled)
    return old


def _as_float_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = _as_float_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        self.name = name

    # -- introspection -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise NonScalarLoss(f"expected a scalar tensor, got shape {self.shape}")

    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    # -- gradient management -------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def assert_finite(self, what="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise NumericalError(f"{what} contains NaN/Inf")
        return self

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_const_like(other, self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_const_like(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or isinstance(shape[0], int) else shape[0])

    def backward(self):
        backward(self)


def _const_like(value, ref: Tensor) -> Tensor:
    return Tensor(np.asarray(value, dtype=ref.dtype))


def _coerce(value, ref: Tensor):
    """Non-Tensor operands become constants of the reference dtype."""
    if isinstance(value, Tensor):
        return value
    return _const_like(value, ref)


def make_node(data: np.ndarray, parents, backward_fn, name=None) -> Tensor:
    """Create a graph node; drops the tape when no parent needs gradients."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = name
    needs = any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = tuple(parents) if needs else ()
    out._backward_fn = backward_fn if needs else None
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NumericalError(f"operation {name or backward_fn} produced NaN/Inf")
    return out


def _sum_to(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- primitives --------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)

    def bwd(g):
        return _sum_to(g, a.shape), _sum_to(g, b.shape)

    return make_node(a.data + b.data, (a, b), bwd, "add")


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)

    def bwd(g):
        return _sum_to(g, a.shape), _sum_to(-g, b.shape)

    return make_node(a.data - b.data, (a, b), bwd, "sub")


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)

    def bwd(g):
        return _sum_to(g * b.data, a.shape), _sum_to(g * a.data, b.shape)

    return make_node(a.data * b.data, (a, b), bwd, "mul")


def div(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)

    def bwd(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _sum_to(ga, a.shape), _sum_to(gb, b.shape)

    return make_node(a.data / b.data, (a, b), bwd, "div")


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    if exponent == 2.0:
        def bwd2(g):
            return (g * (2.0 * a.data),)

        return make_node(np.square(a.data), (a,), bwd2, "pow")

    def bwd(g):
        return (g * exponent * np.power(a.data, exponent - 1.0),)

    return make_node(np.power(a.data, exponent), (a,), bwd, "pow")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        return (g * out_data,)

    return make_node(out_data, (a,), bwd, "exp")


def log(a: Tensor) -> Tensor:
    def bwd(g):
        return (g / a.data,)

    return make_node(np.log(a.data), (a,), bwd, "log")


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bwd(g):
        return (g / (2.0 * out_data),)

    return make_node(out_data, (a,), bwd, "sqrt")


def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

    return make_node(np.asarray(out_data), (a,), bwd, "sum")


def reduce_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.data.size if axis is None else np.prod(
        [a.shape[i] for i in np.atleast_1d(axis)])
    return mul(reduce_sum(a, axis, keepdims), 1.0 / float(count))


def reshape(a: Tensor, shape) -> Tensor:
    def bwd(g):
        return (g.reshape(a.shape),)

    return make_node(a.data.reshape(shape), (a,), bwd, "reshape")


def take(a: Tensor, index) -> Tensor:
    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return make_node(a.data[index].copy(), (a,), bwd, "take")


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis),
                     tensors, bwd, "concat")


# -- backward pass ------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf."""
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")

    topo, seen, stack = [], set(), [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf():
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
