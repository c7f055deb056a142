"""Small tape-based reverse-mode autodiff over numpy arrays.

Only the operations the descriptor network and the contrastive loss need are
provided. Images are laid out NHWC, convolution weights as (Cout, Cin, k, k).

A :class:`Graph` records nodes in creation order, which is a valid topological
order, so the backward sweep simply walks the tape in reverse and skips nodes
the loss does not depend on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import GraphError, NonFiniteError, ShapeError

GEM_FLOOR = 1e-6


class Tensor:
    __slots__ = ("graph", "data", "parents", "backward_fn", "op", "name", "index", "requires_grad")

    def __init__(self, graph, data, parents=(), backward_fn=None, op="leaf", name=None, requires_grad=None):
        self.graph = graph
        self.data = data
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.name = name
        self.index = -1
        if requires_grad is None:
            requires_grad = name is not None or any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, name={self.name})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, rows):
        return take(self, rows)


class Graph:
    """Tape of primitive operations.

    ``mac_count`` accumulates forward multiply-adds of convolutions; it is how
    inference cost is compared between network configurations.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Tensor] = []
        self.mac_count = 0
        self.check_finite = check_finite

    def _add(self, node: Tensor) -> Tensor:
        if self.check_finite and not np.all(np.isfinite(node.data)):
            raise NonFiniteError(f"non-finite output from {node.op}", node.name)
        node.index = len(self.nodes)
        self.nodes.append(node)
        return node

    def leaf(self, data, name: str | None = None, requires_grad: bool | None = None) -> Tensor:
        """Register an input. Named leaves receive gradients in :func:`backward`."""
        return self._add(Tensor(self, np.asarray(data), name=name, requires_grad=requires_grad))

    def constant(self, data) -> Tensor:
        return self.leaf(data, requires_grad=False)

    def record(self, data, parents, backward_fn, op) -> Tensor:
        for p in parents:
            if p.graph is not self:
                raise GraphError(f"{op}: operand belongs to a different graph")
        return self._add(Tensor(self, data, parents, backward_fn, op))


def _lift(graph: Graph, x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return graph.constant(np.asarray(x, dtype=np.float64))


def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Tensor):
            return x.graph
    raise GraphError("operation needs at least one Tensor operand")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)

    def back(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)

    return g.record(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)

    def back(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)

    return g.record(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)

    def back(grad):
        return _unbroadcast(grad * b.data, a.shape), _unbroadcast(grad * a.data, b.shape)

    return g.record(a.data * b.data, (a, b), back, "mul")


def square(x: Tensor) -> Tensor:
    def back(grad):
        return (2.0 * x.data * grad,)

    return x.graph.record(x.data * x.data, (x,), back, "square")


def sqrt(x: Tensor) -> Tensor:
    """Square root; the derivative at exactly zero is taken as zero."""
    if np.any(x.data < 0):
        raise ShapeError("sqrt of negative value")
    out = np.sqrt(x.data)

    def back(grad):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, grad / (2.0 * safe), 0.0),)

    return x.graph.record(out, (x,), back, "sqrt")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def back(grad):
        return (grad * mask,)

    return x.graph.record(x.data * mask, (x,), back, "relu")


def total(x: Tensor, axis: int | None = None) -> Tensor:
    out = x.data.sum(axis=axis)

    def back(grad):
        if axis is None:
            return (np.broadcast_to(grad, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(grad, axis), x.shape).copy(),)

    return x.graph.record(np.asarray(out), (x,), back, "sum")


# structural ------------------------------------------------------------------


def take(x: Tensor, rows) -> Tensor:
    """Select entries along the first axis (fancy indexing or a slice)."""

    def back(grad):
        full = np.zeros_like(x.data)
        np.add.at(full, rows, grad)
        return (full,)

    return x.graph.record(x.data[rows], (x,), back, "take")


def concat(xs: Sequence[Tensor]) -> Tensor:
    xs = list(xs)
    g = _graph_of(*xs)
    sizes = np.cumsum([t.shape[0] for t in xs])[:-1]

    def back(grad):
        return tuple(np.split(grad, sizes, axis=0))

    return g.record(np.concatenate([t.data for t in xs], axis=0), xs, back, "concat")


# network ops -----------------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : stride * (out_h - 1) + 1 : stride, : stride * (out_w - 1) + 1 : stride]
    # (B, Ho, Wo, C, k, k) -> (B*Ho*Wo, k*k*C), channel-fastest for a cheaper copy
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, k * k * win.shape[3])


def conv_block_forward(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Zero-padded 'same' convolution, bias, then ReLU.

    x is (B, H, W, Cin) or a single (H, W, Cin) image; the output spatial size
    is ceil(H / stride) x ceil(W / stride).
    """
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv input must be HWC or BHWC, got shape {x.shape}")
    cout, cin, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {k}x{k2}")
    if xd.shape[3] != cin:
        raise ShapeError(f"input has {xd.shape[3]} channels, weights expect {cin}")
    if b.shape != (cout,):
        raise ShapeError(f"bias shape {b.shape} does not match {cout} output channels")
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")

    bsz, h, wd, _ = xd.shape
    pad = (k - 1) // 2
    out_h, out_w = -(-h // stride), -(-wd // stride)
    xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = _im2col(xp, k, stride, out_h, out_w)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(cout, -1)
    pre = cols @ wmat.T + b.data
    mask = pre > 0
    out = (pre * mask).reshape(bsz, out_h, out_w, cout)
    x.graph.mac_count += cols.shape[0] * cols.shape[1] * cout

    def back(grad):
        g2 = grad.reshape(-1, cout) * mask
        dw = (g2.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
        db = g2.sum(axis=0)
        if not x.requires_grad:
            return None, dw, db
        dcols = (g2 @ wmat).reshape(bsz, out_h, out_w, k, k, cin)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += dcols[:, :, :, i, j]
        dx = dxp[:, pad : pad + h, pad : pad + wd]
        return (dx[0] if single else dx), dw, db

    return x.graph.record(out[0] if single else out, (x, w, b), back, "conv")


def gem(x: Tensor, p: float = 3.0) -> Tensor:
    """Generalized-mean pooling over the spatial axes.

    Accepts (H, W, K) or (B, H, W, K). Entries are floored at ``GEM_FLOOR``
    before the power; the floor receives no gradient.
    """
    if p < 1:
        raise ShapeError(f"GeM exponent must be >= 1, got {p}")
    if np.any(x.data < 0):
        raise ShapeError("GeM input must be non-negative")
    axes = (-3, -2)
    xc = np.maximum(x.data, GEM_FLOOR)
    n = x.shape[-3] * x.shape[-2]
    mean = (xc**p).sum(axis=axes) / n
    out = mean ** (1.0 / p)

    def back(grad):
        scale = (mean ** (1.0 / p - 1.0)) / n
        local = xc ** (p - 1.0) * np.expand_dims(scale * grad, axes)
        return (np.where(x.data > GEM_FLOOR, local, 0.0),)

    return x.graph.record(out, (x,), back, "gem")


def l2_normalize(x: Tensor, min_norm: float = 1e-12) -> Tensor:
    """Normalize the last axis to unit Euclidean length."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(norm <= min_norm):
        raise ShapeError("cannot normalize a (near-)zero vector")
    y = x.data / norm

    def back(grad):
        return ((grad - y * (grad * y).sum(axis=-1, keepdims=True)) / norm,)

    return x.graph.record(y, (x,), back, "l2_normalize")


# reverse sweep ---------------------------------------------------------------


def backward(graph: Graph, loss: Tensor) -> dict[str, np.ndarray]:
    """Propagate d(loss)/d(node) through the tape.

    Returns gradients keyed by leaf name; named leaves the loss does not depend
    on get zero arrays.
    """
    if loss is None or not graph.nodes or loss.graph is not graph or loss.index < 0:
        raise GraphError("backward called before a forward pass on this graph")
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.data)}
    for node in reversed(graph.nodes[: loss.index + 1]):
        if node.backward_fn is None or not node.requires_grad:
            continue
        grad = grads.pop(node.index, None)
        if grad is None:
            continue
        for parent, pgrad in zip(node.parents, node.backward_fn(grad)):
            if pgrad is None or not parent.requires_grad:
                continue
            if parent.index in grads:
                grads[parent.index] = grads[parent.index] + pgrad
            else:
                grads[parent.index] = pgrad

    out = {}
    for node in graph.nodes:
        if node.name is not None:
            out[node.name] = grads.get(node.index, np.zeros_like(node.data))
    return out


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = np.asarray(f(x))
        flat[i] = old - h
        fm = np.asarray(f(x))
        flat[i] = old
        if fp.size != 1 or fm.size != 1:
            raise ShapeError(f"finite differences need a scalar function, got shape {fp.shape}")
        gflat[i] = (float(fp) - float(fm)) / (2.0 * h)
    return grad


# optimizer -------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Adaptive-moment state. ``counts`` holds per-parameter update counts used
    for bias correction, so parameters updated rarely are corrected properly."""

    lr: float = 1e-3
    mode: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)


def optimizer_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One update of ``params``. Returns new arrays and a new state; inputs are untouched.

    ``mode="sgd"`` is plain gradient descent, ``mode="adam"`` the bias-corrected
    adaptive-moment update. Moments of parameters not passed in are carried over.
    """
    if state.lr <= 0:
        raise ValueError("learning rate must be positive")
    if state.mode not in ("adam", "sgd"):
        raise ValueError(f"unknown optimizer mode {state.mode!r}")
    for name, p in params.items():
        if name not in grads:
            raise ShapeError(f"no gradient for parameter {name}")
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}", name)

    new_params = {}
    new_m, new_v, counts = dict(state.m), dict(state.v), dict(state.counts)
    for name, p in params.items():
        g = grads[name]
        if state.mode == "sgd":
            new_params[name] = (p - state.lr * g).astype(p.dtype)
            continue
        t = counts.get(name, 0) + 1
        m = state.beta1 * state.m.get(name, np.zeros_like(p)) + (1 - state.beta1) * g
        v = state.beta2 * state.v.get(name, np.zeros_like(p)) + (1 - state.beta2) * g * g
        mhat = m / (1 - state.beta1**t)
        vhat = v / (1 - state.beta2**t)
        new_params[name] = (p - state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)
        new_m[name], new_v[name], counts[name] = m, v, t
    new_state = OptimizerState(
        lr=state.lr, mode=state.mode, beta1=state.beta1, beta2=state.beta2, eps=state.eps,
        step=state.step + 1, m=new_m, v=new_v, counts=counts,
    )
    return new_params, new_state
