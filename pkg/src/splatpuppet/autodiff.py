"""Reverse-mode automatic differentiation over numpy arrays.

The engine records a computation graph of `Var` nodes (each holding a float64
ndarray value and, after `backward`, the accumulated adjoint d loss / d value).
Every public op dispatches on its argument types: called with plain ndarrays
it computes in raw numpy and returns an ndarray, so the exact same model code
doubles as the fast tape-free path used by finite-difference oracles.

Hot-path kernels (rasterization, window convolutions, hash-table gathers) are
implemented elsewhere as fused custom ops via `custom_op`; everything here is
elementwise/linear algebra with hand-written vector-Jacobian products.

Concurrency: a graph under construction is confined to one thread.  Plain
values may be shared freely.
"""

from __future__ import annotations

import numpy as np

from .errors import StateError

_GRAD_ENABLED = True


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Var:
    """A node in the recorded computation.

    `value` is always a float64 ndarray (scalars have shape ()).  `grad` is
    None until a backward pass reaches the node.  After `backward(loss)` the
    grad of each participating Var equals d loss / d value; running backward
    twice from the same root without rebuilding the graph is a StateError.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjp", "_done")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjp = None
        self._done = False

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self):
        return self.value.shape

    def needs_grad(self) -> bool:
        return self.requires_grad or bool(self._parents)

    def zero_grad(self):
        self.grad = None
        self._done = False

    def detach(self) -> "Var":
        return Var(self.value)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)


def value_of(x):
    """Underlying ndarray of a Var or array-like."""
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _any_var(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def _record(value, inputs, vjp) -> Var:
    """Wrap `value`; attach the vjp if recording is on and any input needs grad."""
    out = Var(value)
    if _GRAD_ENABLED:
        parents = tuple(x for x in inputs if isinstance(x, Var) and x.needs_grad())
        if parents:
            out._parents = parents
            out._vjp = vjp
    return out


def custom_op(inputs, value, vjp) -> Var:
    """Register a fused op.

    `vjp(g)` receives the upstream gradient and must return one gradient array
    (or None) per entry of `inputs`, aligned positionally.  Entries that are
    not Vars are constants and may get None.
    """
    out = Var(value)
    if _GRAD_ENABLED and any(isinstance(x, Var) and x.needs_grad() for x in inputs):
        var_inputs = tuple(x for x in inputs if isinstance(x, Var) and x.needs_grad())

        def dispatch(g):
            grads = vjp(g)
            out_grads = []
            for x, gx in zip(inputs, grads):
                if isinstance(x, Var) and x.needs_grad():
                    out_grads.append(gx)
            return out_grads

        out._parents = var_inputs
        out._vjp = dispatch
    return out


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic --------------------------------------------------------------


def add(a, b):
    if not _any_var(a, b):
        return np.add(a, b)
    av, bv = value_of(a), value_of(b)
    out = av + bv

    def vjp(g):
        ga = _unbroadcast(g, av.shape) if isinstance(a, Var) else None
        gb = _unbroadcast(g, bv.shape) if isinstance(b, Var) else None
        return [x for x in (ga, gb) if x is not None]

    return _record(out, (a, b), vjp)


def sub(a, b):
    if not _any_var(a, b):
        return np.subtract(a, b)
    return add(a, mul(b, -1.0))


def mul(a, b):
    if not _any_var(a, b):
        return np.multiply(a, b)
    av, bv = value_of(a), value_of(b)
    out = av * bv

    def vjp(g):
        grads = []
        if isinstance(a, Var) and a.needs_grad():
            grads.append(_unbroadcast(g * bv, av.shape))
        if isinstance(b, Var) and b.needs_grad():
            grads.append(_unbroadcast(g * av, bv.shape))
        return grads

    out_var = Var(out)
    if _GRAD_ENABLED:
        parents = tuple(x for x in (a, b) if isinstance(x, Var) and x.needs_grad())
        if parents:
            out_var._parents = parents
            out_var._vjp = vjp
    return out_var


def div(a, b):
    if not _any_var(a, b):
        return np.divide(a, b)
    av, bv = value_of(a), value_of(b)
    out = av / bv

    def vjp(g):
        grads = []
        if isinstance(a, Var) and a.needs_grad():
            grads.append(_unbroadcast(g / bv, av.shape))
        if isinstance(b, Var) and b.needs_grad():
            grads.append(_unbroadcast(-g * av / (bv * bv), bv.shape))
        return grads

    out_var = Var(out)
    if _GRAD_ENABLED:
        parents = tuple(x for x in (a, b) if isinstance(x, Var) and x.needs_grad())
        if parents:
            out_var._parents = parents
            out_var._vjp = vjp
    return out_var


def power(a, p):
    """a ** p for constant real exponent p."""
    if not isinstance(a, Var):
        return np.power(a, p)
    av = a.value
    out = np.power(av, p)

    def vjp(g):
        return [g * p * np.power(av, p - 1)]

    return _record(out, (a,), vjp)


# -- elementwise nonlinearities ----------------------------------------------


def _elementwise(a, fwd, dfn):
    if not isinstance(a, Var):
        return fwd(np.asarray(a, dtype=np.float64))
    out = fwd(a.value)

    def vjp(g):
        return [g * dfn(a.value, out)]

    return _record(out, (a,), vjp)


def exp(a):
    return _elementwise(a, np.exp, lambda x, y: y)


def log(a):
    return _elementwise(a, np.log, lambda x, y: 1.0 / x)


def sqrt(a):
    return _elementwise(a, np.sqrt, lambda x, y: 0.5 / y)


def sin(a):
    return _elementwise(a, np.sin, lambda x, y: np.cos(x))


def cos(a):
    return _elementwise(a, np.cos, lambda x, y: -np.sin(x))


def tanh(a):
    return _elementwise(a, np.tanh, lambda x, y: 1.0 - y * y)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    return _elementwise(a, _sigmoid, lambda x, y: y * (1.0 - y))


def softplus(a):
    return _elementwise(a, lambda x: np.logaddexp(0.0, x), lambda x, y: _sigmoid(x))


def absolute(a):
    # subgradient 0 at x == 0
    return _elementwise(a, np.abs, lambda x, y: np.sign(x))


def maximum(a, c):
    """Elementwise max against a constant; subgradient 0 at ties."""
    if not isinstance(a, Var):
        return np.maximum(a, c)
    out = np.maximum(a.value, c)

    def vjp(g):
        return [g * (a.value > c)]

    return _record(out, (a,), vjp)


# -- reductions and shape ops ------------------------------------------------


def vsum(a, axis=None, keepdims=False):
    if not isinstance(a, Var):
        return np.sum(a, axis=axis, keepdims=keepdims)
    out = np.sum(a.value, axis=axis, keepdims=keepdims)
    shape = a.value.shape

    def vjp(g):
        if axis is None:
            return [np.broadcast_to(g, shape).copy()]
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return [np.broadcast_to(gg, shape).copy()]

    return _record(out, (a,), vjp)


def vmean(a, axis=None, keepdims=False):
    av = value_of(a)
    if axis is None:
        n = av.size
    else:
        n = av.shape[axis] if isinstance(axis, int) else int(np.prod([av.shape[i] for i in axis]))
    return div(vsum(a, axis=axis, keepdims=keepdims), float(n))


def reshape(a, shape):
    if not isinstance(a, Var):
        return np.reshape(a, shape)
    out = a.value.reshape(shape)
    orig = a.value.shape

    def vjp(g):
        return [g.reshape(orig)]

    return _record(out, (a,), vjp)


def transpose(a, axes=None):
    if not isinstance(a, Var):
        return np.transpose(a, axes)
    out = np.transpose(a.value, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def vjp(g):
        return [np.transpose(g, inv)]

    return _record(out, (a,), vjp)


def take(a, idx):
    """Indexing/gather; backward scatter-adds into the source."""
    if not isinstance(a, Var):
        return np.asarray(a)[idx]
    out = a.value[idx]
    shape = a.value.shape

    def vjp(g):
        ga = np.zeros(shape, dtype=np.float64)
        np.add.at(ga, idx, g)
        return [ga]

    return _record(out, (a,), vjp)


def concat(parts, axis=0):
    if not _any_var(*parts):
        return np.concatenate(parts, axis=axis)
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        pieces = np.split(g, splits, axis=axis)
        return [pieces[i] for i, p in enumerate(parts)
                if isinstance(p, Var) and p.needs_grad()]

    out_var = Var(out)
    if _GRAD_ENABLED:
        parents = tuple(p for p in parts if isinstance(p, Var) and p.needs_grad())
        if parents:
            out_var._parents = parents
            out_var._vjp = vjp
    return out_var


def stack(parts, axis=0):
    if not _any_var(*parts):
        return np.stack(parts, axis=axis)
    vals = [value_of(p) for p in parts]
    out = np.stack(vals, axis=axis)

    def vjp(g):
        pieces = np.moveaxis(g, axis, 0)
        return [pieces[i] for i, p in enumerate(parts)
                if isinstance(p, Var) and p.needs_grad()]

    out_var = Var(out)
    if _GRAD_ENABLED:
        parents = tuple(p for p in parts if isinstance(p, Var) and p.needs_grad())
        if parents:
            out_var._parents = parents
            out_var._vjp = vjp
    return out_var


def matmul(a, b):
    """Matrix product with numpy batch broadcasting on leading axes."""
    if not _any_var(a, b):
        return np.matmul(a, b)
    av, bv = value_of(a), value_of(b)
    if av.ndim == 1 or bv.ndim == 1:
        out_shape = np.matmul(av, bv).shape
        a2 = reshape(a, (1, av.shape[0])) if av.ndim == 1 else a
        b2 = reshape(b, (bv.shape[0], 1)) if bv.ndim == 1 else b
        return reshape(matmul(a2, b2), out_shape)
    out = np.matmul(av, bv)

    def vjp(g):
        grads = []
        if isinstance(a, Var) and a.needs_grad():
            ga = np.matmul(g, np.swapaxes(bv, -1, -2))
            grads.append(_unbroadcast(ga, av.shape))
        if isinstance(b, Var) and b.needs_grad():
            gb = np.matmul(np.swapaxes(av, -1, -2), g)
            grads.append(_unbroadcast(gb, bv.shape))
        return grads

    out_var = Var(out)
    if _GRAD_ENABLED:
        parents = tuple(x for x in (a, b) if isinstance(x, Var) and x.needs_grad())
        if parents:
            out_var._parents = parents
            out_var._vjp = vjp
    return out_var


def safe_norm(a, axis=-1, keepdims=False):
    """L2 norm along an axis with a zero subgradient at exactly zero."""
    if not isinstance(a, Var):
        return np.sqrt(np.sum(np.asarray(a) ** 2, axis=axis, keepdims=keepdims))
    av = a.value
    out = np.sqrt(np.sum(av * av, axis=axis, keepdims=keepdims))

    def vjp(g):
        n = out if keepdims else np.expand_dims(out, axis)
        gg = g if keepdims else np.expand_dims(g, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            scaled = np.where(n > 0.0, gg / np.where(n > 0.0, n, 1.0), 0.0)
        return [scaled * av]

    return _record(out, (a,), vjp)


# -- backward ----------------------------------------------------------------


def backward(loss: Var):
    """Populate adjoints of every Var reachable from the scalar `loss`.

    Raises StateError when called twice on the same root without rebuilding
    the graph; gradient reset between training steps is the caller's job.
    """
    if not isinstance(loss, Var):
        raise ValueError("backward expects a Var")
    if loss.value.shape != ():
        raise ValueError("backward expects a scalar loss")
    if loss._done:
        raise StateError("backward already ran from this root; rebuild the graph or reset")
    loss._done = True
    backward_multi([(loss, np.ones((), dtype=np.float64))])


def backward_multi(seeds):
    """Backward from several roots at once. `seeds` is [(Var, grad array)]."""
    grads: dict[int, np.ndarray] = {}
    for root, seed in seeds:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != root.value.shape:
            raise ValueError(
                f"seed gradient shape {seed.shape} != value shape {root.value.shape}")
        if id(root) in grads:
            grads[id(root)] = grads[id(root)] + seed
        else:
            grads[id(root)] = seed.copy()

    # Sequential DFS postorder with a shared seen-set is a topological order
    # of the union DAG, so one reverse sweep handles shared subgraphs.
    union_order = _toposort_multi([root for root, _ in seeds])
    for node in reversed(union_order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def _toposort_multi(roots):
    order = []
    seen = set()
    for root in roots:
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
    return order
