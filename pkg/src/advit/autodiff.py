"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Only the kernels needed by the transformer blocks and the attacks are
provided. Every op records its parents and a closure that maps the output
cotangent to the parents' cotangents. ``Tensor.backward`` walks the recorded
nodes in decreasing creation order, which is a valid reverse topological
order and makes gradient accumulation deterministic.
"""

from __future__ import annotations

import contextvars
import itertools
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

_ids = itertools.count()
_active_graph: contextvars.ContextVar["Graph | None"] = contextvars.ContextVar(
    "active_graph", default=None
)

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class GraphError(RuntimeError):
    """Base class for errors raised while building or differentiating a graph."""


class ShapeError(GraphError, ValueError):
    def __init__(self, op: str, node: int, detail: str):
        self.op = op
        self.node = node
        super().__init__(f"shape mismatch in {op} (node {node}): {detail}")


class NonFiniteError(GraphError, FloatingPointError):
    def __init__(self, op: str, node: int):
        self.op = op
        self.node = node
        super().__init__(f"non-finite value produced by {op} (node {node})")


class Tensor:
    """Dense float64 array that participates in reverse-mode differentiation."""

    __array_priority__ = 100.0
    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self._id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        graph = _active_graph.get()
        if graph is not None:
            graph._record(self)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self, seed: np.ndarray | None = None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if seed is None:
            if self.data.size != 1:
                raise GraphError("seed gradient required for non-scalar output")
            seed = np.ones_like(self.data)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != self.shape:
            raise ShapeError("backward", self._id, f"seed {seed.shape} vs output {self.shape}")
        if not self.requires_grad:
            return
        nodes = _reachable(self)
        grads: dict[int, np.ndarray] = {self._id: seed}
        for node in sorted(nodes, key=lambda t: t._id, reverse=True):
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else prev + pg


def _reachable(root: Tensor) -> list[Tensor]:
    seen = {root._id}
    stack = [root]
    out = []
    while stack:
        node = stack.pop()
        out.append(node)
        for p in node._parents:
            if p.requires_grad and p._id not in seen:
                seen.add(p._id)
                stack.append(p)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(op: str, forward: Callable[[], np.ndarray], parents: Sequence[Tensor], backward) -> Tensor:
    try:
        with np.errstate(all="ignore"):
            data = forward()
    except ValueError as exc:
        raise ShapeError(op, next(_ids), f"{[p.shape for p in parents]}: {exc}") from None
    out = Tensor(data)
    out.op = op
    if not np.isfinite(out.data).all():
        raise NonFiniteError(op, out._id)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        "add",
        lambda: a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _node("neg", lambda: -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        "mul",
        lambda: a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node("scale", lambda: a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out_data = []

    def fwd():
        out_data.append(np.exp(a.data))
        return out_data[0]

    return _node("exp", fwd, (a,), lambda g: (g * out_data[0],))


def log(a: Tensor) -> Tensor:
    return _node("log", lambda: np.log(a.data), (a,), lambda g: (g / a.data,))


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(a.data / _SQRT2))

    def bwd(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data**2)
        return (g * (cdf + a.data * pdf),)

    return _node("gelu", lambda: a.data * cdf, (a,), bwd)


# -------------------------------------------------------------------- shapes


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", next(_ids), f"operands must be at least 2-D, got {a.shape} @ {b.shape}")

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node("matmul", lambda: a.data @ b.data, (a, b), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    return _node("reshape", lambda: a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node("transpose", lambda: a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def getitem(a: Tensor, idx) -> Tensor:
    def bwd(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node("getitem", lambda: a.data[idx], (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node("concat", lambda: np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node("sum", lambda: a.data.sum(axis=axes, keepdims=keepdims), (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    return scale(tsum(a, axes, keepdims), 1.0 / count)


# ------------------------------------------------------------ normalizations


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node("softmax", lambda: y, (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bwd(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _node("log_softmax", lambda: y, (a,), bwd)


def layer_norm(a: Tensor, axes=-1, eps: float = 1e-12) -> Tensor:
    """Standardize over ``axes`` (zero mean, unit variance); no affine part."""
    axes = _norm_axis(axes, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    mu = a.data.mean(axis=axes, keepdims=True)
    xc = a.data - mu
    var = (xc**2).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bwd(g):
        gm = g.sum(axis=axes, keepdims=True) / count
        gy = (g * y).sum(axis=axes, keepdims=True) / count
        return (inv * (g - gm - y * gy),)

    return _node("layer_norm", lambda: y, (a,), bwd)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm; zero slices are an error."""
    n = np.sqrt((a.data**2).sum(axis=axis, keepdims=True))
    if np.any(n == 0.0):
        raise GraphError("l2_normalize: zero-norm slice, normalization undefined")
    y = a.data / n

    def bwd(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / n,)

    return _node("l2_normalize", lambda: y, (a,), bwd)


# ------------------------------------------------------------- convolutions


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    """NHWC convolution. ``w`` has shape (kh, kw, c_in, c_out)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError("conv2d", next(_ids), f"input {x.shape} vs kernel {w.shape}")
    kh, kw, cin, cout = w.shape
    B, H, W, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    # (B, Ho, Wo, cin, kh, kw) -> (B, Ho, Wo, kh, kw, cin)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)

    def bwd(g):
        g2 = g.reshape(B * Ho * Wo, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gcols = (g2 @ wmat.T).reshape(B, Ho, Wo, kh, kw, cin)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, padding : padding + H, padding : padding + W, :]
        return gx, gw

    return _node("conv2d", lambda: (cols @ wmat).reshape(B, Ho, Wo, cout), (x, w), bwd)


def depthwise_conv2d(x: Tensor, w: Tensor, padding: int = 1) -> Tensor:
    """Stride-1 NHWC depth-wise convolution. ``w`` has shape (kh, kw, channels)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 3 or x.shape[3] != w.shape[2]:
        raise ShapeError("depthwise_conv2d", next(_ids), f"input {x.shape} vs kernel {w.shape}")
    kh, kw, _ = w.shape
    B, H, W, C = x.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    Ho, Wo = H + 2 * padding - kh + 1, W + 2 * padding - kw + 1

    def fwd():
        out = np.zeros((B, Ho, Wo, C))
        for i in range(kh):
            for j in range(kw):
                out += xp[:, i : i + Ho, j : j + Wo, :] * w.data[i, j]
        return out

    def bwd(g):
        gw = np.empty_like(w.data)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gw[i, j] = (xp[:, i : i + Ho, j : j + Wo, :] * g).sum(axis=(0, 1, 2))
                gxp[:, i : i + Ho, j : j + Wo, :] += g * w.data[i, j]
        return gxp[:, padding : padding + H, padding : padding + W, :], gw

    return _node("depthwise_conv2d", fwd, (x, w), bwd)


# -------------------------------------------------------------------- losses


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-sample cross-entropy against integer labels or probability rows."""
    targets = as_probabilities(targets, logits.shape[-1])
    return neg(tsum(mul(log_softmax(logits, -1), targets), axis=-1))


def as_probabilities(targets, num_classes: int) -> np.ndarray:
    targets = np.asarray(targets)
    if targets.ndim == 1 or targets.dtype.kind in "iu":
        return np.eye(num_classes)[targets.astype(int)]
    return targets.astype(np.float64)


# ------------------------------------------------------------------- graphs


class Graph:
    """A recorded forward computation that can be re-evaluated and differentiated.

    ``fn`` receives the named inputs as keyword arguments (as Tensors) and
    returns either a Tensor or a dict of Tensors. ``nodes`` lists every tensor
    created during the last evaluation in creation (topological) order.
    """

    def __init__(self, fn: Callable[..., Tensor | dict[str, Tensor]]):
        self.fn = fn
        self.nodes: list[Tensor] = []
        self.inputs: dict[str, Tensor] = {}
        self.outputs: dict[str, Tensor] | None = None

    def _record(self, t: Tensor):
        self.nodes.append(t)

    def evaluate(self, **inputs) -> dict[str, Tensor]:
        self.nodes = []
        token = _active_graph.set(self)
        try:
            self.inputs = {
                k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=True, name=k)
                for k, v in inputs.items()
            }
            out = self.fn(**self.inputs)
        finally:
            _active_graph.reset(token)
        self.outputs = out if isinstance(out, dict) else {"out": out}
        return self.outputs

    def backward(self, seed: np.ndarray | None = None, output: str | None = None) -> dict[str, np.ndarray]:
        if self.outputs is None:
            raise GraphError("backward called before evaluate")
        if output is None:
            if len(self.outputs) != 1:
                raise GraphError("output name required for multi-output graphs")
            output = next(iter(self.outputs))
        for t in self.inputs.values():
            t.grad = None
        self.outputs[output].backward(seed)
        return {
            k: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in self.inputs.items()
            if t.requires_grad
        }


def evaluate(graph: Graph, **inputs) -> dict[str, Tensor]:
    return graph.evaluate(**inputs)


def backward(graph: Graph, seed: np.ndarray | None = None, output: str | None = None) -> dict[str, np.ndarray]:
    return graph.backward(seed, output)


def grad(f: Callable[[Tensor], Tensor], x: np.ndarray) -> tuple[float, np.ndarray]:
    """Value and gradient of a scalar function at ``x``."""
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    out = f(xt)
    out.backward()
    g = xt.grad if xt.grad is not None else np.zeros_like(xt.data)
    return float(out.data), g


def finite_diff_check(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between the autodiff gradient and central differences."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    _, g = grad(f, x)
    g_fd = np.empty_like(x)
    flat = x.reshape(-1)
    gf = g_fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(x)).data)
        flat[i] = orig - h
        fm = float(f(Tensor(x)).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("finite_diff_check", i)
        gf[i] = (fp - fm) / (2 * h)
    return float(np.max(np.abs(g - g_fd) / np.maximum(np.abs(g_fd), 1e-8)))
