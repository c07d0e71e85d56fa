"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

Every differentiable operation registers a forward and an adjoint in one
table (`OP_TABLE`). Graphs are built define-by-run: calling an op on
`Tensor`s records a node holding the saved activations and the parent
links; `backward` then visits the recorded nodes exactly once in reverse
topological order.

Default dtype is float32. Ops preserve the promoted dtype of their inputs,
so a graph fed float64 leaves runs entirely in float64 — the
finite-difference checker relies on this.

Tensors are immutable once built and safe to share between threads; a
single graph instance is single-threaded.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .errors import ShapeError, ValidationError


class Tensor:
    """A dense array plus the tape bookkeeping needed for backward."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_bwd", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable | None = None
        self._op: str | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" op={self._op}" if self._op else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # Operator sugar; everything routes through the op table.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return _as_tensor(x)


def parameter(x, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(x), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# Op table
# ---------------------------------------------------------------------------
# forward(*arrays, **kw) -> (out_array, saved)
# backward(saved, grad_out) -> tuple of parent gradients (None for constants)

OP_TABLE: dict[str, tuple[Callable, Callable]] = {}


def register_op(name: str, forward: Callable, backward_fn: Callable) -> None:
    if name in OP_TABLE:
        raise ValidationError(f"op {name!r} already registered")
    OP_TABLE[name] = (forward, backward_fn)


def _apply(name: str, *tensors: Tensor, **kw) -> Tensor:
    fwd, _ = OP_TABLE[name]
    arrays = [t.data for t in tensors]
    try:
        out_data, saved = fwd(*arrays, **kw)
    except ValueError as exc:
        shapes = ", ".join(str(t.data.shape) for t in tensors)
        raise ShapeError(f"op {name!r} on shapes [{shapes}]: {exc}") from exc
    out = Tensor(out_data)
    if any(t.requires_grad for t in tensors):
        out.requires_grad = True
        out._parents = tensors
        out._op = name
        bwd = OP_TABLE[name][1]
        out._bwd = lambda grad, saved=saved: bwd(saved, grad)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- arithmetic --------------------------------------------------------------

register_op(
    "add",
    lambda a, b: (a + b, (a.shape, b.shape)),
    lambda s, g: (_unbroadcast(g, s[0]), _unbroadcast(g, s[1])),
)

register_op(
    "sub",
    lambda a, b: (a - b, (a.shape, b.shape)),
    lambda s, g: (_unbroadcast(g, s[0]), _unbroadcast(-g, s[1])),
)

register_op(
    "mul",
    lambda a, b: (a * b, (a, b)),
    lambda s, g: (_unbroadcast(g * s[1], s[0].shape), _unbroadcast(g * s[0], s[1].shape)),
)

register_op(
    "div",
    lambda a, b: (a / b, (a, b)),
    lambda s, g: (
        _unbroadcast(g / s[1], s[0].shape),
        _unbroadcast(-g * s[0] / (s[1] * s[1]), s[1].shape),
    ),
)


def _matmul_fwd(a, b):
    return np.matmul(a, b), (a, b)


def _matmul_bwd(saved, g):
    a, b = saved
    if b.ndim == 1:
        if a.ndim == 1:
            return g * b, g * a
        ga = np.expand_dims(g, -1) * b
        gb = np.tensordot(g, a, axes=(tuple(range(g.ndim)), tuple(range(a.ndim - 1))))
        return ga, gb
    if a.ndim == 1:
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        ga = _unbroadcast(ga, a.shape)
        gb = np.matmul(np.expand_dims(a, -1), np.expand_dims(g, -2))
        return ga, _unbroadcast(gb, b.shape)
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


register_op("matmul", _matmul_fwd, _matmul_bwd)

register_op(
    "broadcast",
    lambda a, shape: (np.broadcast_to(a, shape).copy(), a.shape),
    lambda s, g: (_unbroadcast(g, s),),
)

# -- reductions & structure ---------------------------------------------------

register_op(
    "sum",
    lambda a, axis=None, keepdims=False: (
        a.sum(axis=axis, keepdims=keepdims),
        (a.shape, axis, keepdims),
    ),
    lambda s, g: (_spread(g, *s),),
)


def _spread(grad, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(grad, shape).copy()
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            grad = np.expand_dims(grad, a)
    return np.broadcast_to(grad, shape).copy()


def _mean_fwd(a, axis=None, keepdims=False):
    out = a.mean(axis=axis, keepdims=keepdims)
    n = a.size if axis is None else np.prod(
        [a.shape[i % a.ndim] for i in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return out, (a.shape, axis, keepdims, n)


register_op(
    "mean",
    _mean_fwd,
    lambda s, g: (_spread(g, s[0], s[1], s[2]) / s[3],),
)

register_op(
    "transpose",
    lambda a, axes=None: (np.transpose(a, axes), (axes, a.ndim)),
    lambda s, g: (
        np.transpose(g, None if s[0] is None else np.argsort(s[0])),
    ),
)

register_op(
    "reshape",
    lambda a, shape: (a.reshape(shape), a.shape),
    lambda s, g: (g.reshape(s),),
)


def _concat_fwd(*arrays, axis=0):
    sizes = [a.shape[axis] for a in arrays]
    return np.concatenate(arrays, axis=axis), (axis, sizes)


def _concat_bwd(saved, g):
    axis, sizes = saved
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, splits, axis=axis))


register_op("concat", _concat_fwd, _concat_bwd)


def _slice_fwd(a, key):
    return a[key].copy(), (a.shape, key, a.dtype)


def _slice_bwd(saved, g):
    shape, key, dtype = saved
    out = np.zeros(shape, dtype=g.dtype)
    np.add.at(out, key, g)
    return (out,)


register_op("slice", _slice_fwd, _slice_bwd)


def _embedding_fwd(table, idx):
    idx = np.asarray(idx)
    return table[idx], (table.shape, idx)


def _embedding_bwd(saved, g):
    shape, idx = saved
    out = np.zeros(shape, dtype=g.dtype)
    np.add.at(out, idx, g)
    return (out, None)


register_op("embedding", _embedding_fwd, _embedding_bwd)

# -- nonlinearities -----------------------------------------------------------


def _silu_fwd(x):
    sig = 1.0 / (1.0 + np.exp(-x))
    return x * sig, (x, sig)


def _silu_bwd(saved, g):
    x, sig = saved
    return (g * sig * (1.0 + x * (1.0 - sig)),)


register_op("silu", _silu_fwd, _silu_bwd)

register_op(
    "relu",
    lambda x: (np.maximum(x, 0.0), (x > 0)),
    lambda s, g: (g * s,),
)

def _exp_fwd(x):
    out = np.exp(x)
    return out, out


register_op("exp", _exp_fwd, lambda s, g: (g * s,))

register_op("log", lambda x: (np.log(x), x), lambda s, g: (g / s,))


def _sqrt_fwd(x):
    out = np.sqrt(x)
    return out, out


register_op("sqrt", _sqrt_fwd, lambda s, g: (g / (2.0 * s),))

register_op(
    "power",
    lambda x, p: (np.power(x, p), (x, p)),
    lambda s, g: (g * s[1] * np.power(s[0], s[1] - 1),),
)


def _softmax_fwd(x, axis=-1):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return out, (out, axis)


def _softmax_bwd(saved, g):
    out, axis = saved
    dot = (g * out).sum(axis=axis, keepdims=True)
    return (out * (g - dot),)


register_op("softmax", _softmax_fwd, _softmax_bwd)


def _layer_norm_fwd(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def _layer_norm_bwd(saved, g):
    xhat, inv, gain = saved
    n = xhat.shape[-1]
    gy = g * gain
    m1 = gy.mean(axis=-1, keepdims=True)
    m2 = (gy * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (gy - m1 - xhat * m2)
    sum_axes = tuple(range(g.ndim - 1))
    dgain = (g * xhat).sum(axis=sum_axes)
    dbias = g.sum(axis=sum_axes)
    return dx, dgain, dbias


register_op("layer_norm", _layer_norm_fwd, _layer_norm_bwd)


def _squared_error_fwd(a, b):
    d = a - b
    return np.asarray((d * d).mean()), (d, a.size)


register_op(
    "squared_error",
    _squared_error_fwd,
    lambda s, g: (g * 2.0 * s[0] / s[1], g * -2.0 * s[0] / s[1]),
)


# ---------------------------------------------------------------------------
# Public op functions
# ---------------------------------------------------------------------------

def add(a, b):
    return _apply("add", _as_tensor(a), _as_tensor(b))


def sub(a, b):
    return _apply("sub", _as_tensor(a), _as_tensor(b))


def mul(a, b):
    return _apply("mul", _as_tensor(a), _as_tensor(b))


def div(a, b):
    return _apply("div", _as_tensor(a), _as_tensor(b))


def matmul(a, b):
    return _apply("matmul", _as_tensor(a), _as_tensor(b))


def broadcast_to(a, shape):
    return _apply("broadcast", _as_tensor(a), shape=tuple(shape))


def sum_(a, axis=None, keepdims=False):
    return _apply("sum", _as_tensor(a), axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    return _apply("mean", _as_tensor(a), axis=axis, keepdims=keepdims)


def transpose(a, axes=None):
    return _apply("transpose", _as_tensor(a), axes=axes)


def reshape(a, shape):
    return _apply("reshape", _as_tensor(a), shape=tuple(shape))


def concat(tensors: Iterable, axis=0):
    return _apply("concat", *[_as_tensor(t) for t in tensors], axis=axis)


def slice_(a, key):
    return _apply("slice", _as_tensor(a), key=key)


def embedding(table, idx):
    # idx carries no gradient; only the table is a graph parent
    table = _as_tensor(table)
    fwd, bwd = OP_TABLE["embedding"]
    out_data, saved = fwd(table.data, np.asarray(idx))
    out = Tensor(out_data)
    if table.requires_grad:
        out.requires_grad = True
        out._parents = (table,)
        out._op = "embedding"
        out._bwd = lambda grad, saved=saved: (bwd(saved, grad)[0],)
    return out


def silu(x):
    return _apply("silu", _as_tensor(x))


def relu(x):
    return _apply("relu", _as_tensor(x))


def exp(x):
    return _apply("exp", _as_tensor(x))


def log(x):
    return _apply("log", _as_tensor(x))


def sqrt(x):
    return _apply("sqrt", _as_tensor(x))


def power(x, p: float):
    return _apply("power", _as_tensor(x), p=p)


def softmax(x, axis=-1):
    return _apply("softmax", _as_tensor(x), axis=axis)


def layer_norm(x, gain, bias, eps=1e-5):
    return _apply("layer_norm", _as_tensor(x), _as_tensor(gain), _as_tensor(bias), eps=eps)


def squared_error(a, b):
    return _apply("squared_error", _as_tensor(a), _as_tensor(b))


def linear(x, w, b=None):
    """x @ w (+ b). Convenience composite, not a table op."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order


def backward(root: Tensor, grad: np.ndarray | None = None) -> None:
    """Populate `.grad` on every requires_grad leaf reachable from root.

    Non-leaf gradients are discarded after use. Visits each node exactly
    once, in reverse topological order.
    """
    if not root.requires_grad:
        raise ValidationError("backward on a tensor with requires_grad=False")
    if grad is None:
        if root.data.size != 1:
            raise ValidationError(
                f"backward without explicit gradient requires a scalar output, got shape {root.data.shape}"
            )
        grad = np.ones_like(root.data)
    grad = np.asarray(grad, dtype=root.data.dtype)
    if grad.shape != root.data.shape:
        raise ShapeError(
            f"output gradient shape {grad.shape} != output shape {root.data.shape}"
        )

    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): grad}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._bwd is None:
            # Leaf: accumulate into .grad
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g
            continue
        parent_grads = node._bwd(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=p.data.dtype)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    # Flush any leaves that were reached directly as parents
    for node in order:
        g = grads.pop(id(node), None)
        if g is not None and node._bwd is None:
            node.grad = g if node.grad is None else node.grad + g


def grad_dict(loss: Tensor, leaves: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Run backward and collect leaf gradients by name (zeros if unreached)."""
    for t in leaves.values():
        t.grad = None
    backward(loss)
    return {
        k: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for k, t in leaves.items()
    }


# ---------------------------------------------------------------------------
# Graph wrapper and finite-difference checker
# ---------------------------------------------------------------------------

class Graph:
    """A reusable computation defined by a builder over named leaf tensors.

    `forward` binds the named inputs, runs the builder, and caches
    activations; `backward` then returns gradients for every leaf that
    requires grad. Calling backward before forward is a state error.
    """

    def __init__(self, build: Callable[[dict[str, Tensor]], Tensor],
                 grad_inputs: set[str] | None = None):
        self._build = build
        self._grad_inputs = grad_inputs
        self._leaves: dict[str, Tensor] | None = None
        self._output: Tensor | None = None

    def forward(self, inputs: dict[str, np.ndarray]) -> np.ndarray:
        leaves = {}
        for name, value in inputs.items():
            requires = self._grad_inputs is None or name in self._grad_inputs
            leaves[name] = Tensor(np.asarray(value), requires_grad=requires, name=name)
        self._leaves = leaves
        self._output = self._build(leaves)
        return self._output.data

    def backward(self, output_grad: np.ndarray | None = None) -> dict[str, np.ndarray]:
        if self._output is None:
            raise ValidationError("Graph.backward called before forward")
        grads = grad_dict(self._output, {
            k: t for k, t in self._leaves.items() if t.requires_grad
        })
        if output_grad is not None:
            # re-run with explicit seed gradient
            for t in self._leaves.values():
                t.grad = None
            backward(self._output, np.asarray(output_grad))
            grads = {
                k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self._leaves.items() if t.requires_grad
            }
        return grads


def grad_check(graph: Graph, inputs: dict[str, np.ndarray], eps: float = 1e-5,
               sample: int | None = None, rng=None) -> float:
    """Max relative error between backward gradients and central differences.

    Runs the graph in float64 regardless of the inputs' dtype. The error at
    each coordinate is |g_ad - g_fd| / max(1, |g_ad|, |g_fd|). For large
    graphs, `sample` limits the number of coordinates checked per leaf
    (chosen deterministically from `rng`).
    """
    if eps <= 0:
        raise ValidationError("grad_check requires eps > 0")
    inputs64 = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    out = graph.forward(inputs64)
    if np.asarray(out).size != 1:
        raise ValidationError("grad_check requires a scalar graph output")
    grads = graph.backward()

    worst = 0.0
    for name, g_ad in grads.items():
        base = inputs64[name]
        flat = base.reshape(-1)
        n = flat.size
        if sample is not None and sample < n:
            if rng is None:
                idx = np.linspace(0, n - 1, sample).astype(int)
            else:
                idx = np.sort(rng.choice(n, size=sample, replace=False))
        else:
            idx = np.arange(n)
        for i in idx:
            saved = flat[i]
            flat[i] = saved + eps
            f_plus = float(graph.forward(inputs64))
            flat[i] = saved - eps
            f_minus = float(graph.forward(inputs64))
            flat[i] = saved
            g_fd = (f_plus - f_minus) / (2 * eps)
            g = float(g_ad.reshape(-1)[i])
            err = abs(g - g_fd) / max(1.0, abs(g), abs(g_fd))
            worst = max(worst, err)
    # restore cached forward state for the original inputs
    graph.forward(inputs64)
    return worst
