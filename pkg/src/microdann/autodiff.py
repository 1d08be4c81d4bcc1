"""Minimal reverse-mode automatic differentiation on numpy arrays.

A :class:`Tape` records every operation of one forward pass (define-by-run).
Operations are plain functions taking and returning :class:`Tensor` objects;
each one appends a node holding a closure that maps the upstream gradient to
gradients for its inputs.  :func:`backward` walks the tape in reverse.

Only the operators the three-head classifier needs are provided, plus the
gradient-reversal primitive used for adversarial training.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidConfig, InvalidLabel, InvalidShape

DTYPE = np.float64


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    backward_fn: Callable[[np.ndarray], tuple] | None


class Tape:
    """Append-only record of operations; append order is a topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.tensors: list[Tensor] = []
        # named intermediate tensors (e.g. conv stage activations) and
        # parameter bindings, keyed by id of the bound parameter set
        self.marks: dict[str, Tensor] = {}
        self.bindings: dict[int, dict[str, Tensor]] = {}

    def __len__(self):
        return len(self.nodes)

    def _record(self, value, op, inputs=(), backward_fn=None) -> "Tensor":
        ids = tuple(t.node_id for t in inputs)
        for t in inputs:
            if t.tape is not self:
                raise ValueError("tensor belongs to a different tape")
        node_id = len(self.nodes)
        self.nodes.append(_Node(op, ids, backward_fn))
        t = Tensor(value, self, node_id)
        self.tensors.append(t)
        return t

    def leaf(self, value) -> "Tensor":
        """Register an input or parameter array on the tape."""
        value = np.asarray(value, dtype=DTYPE)
        if value.ndim == 0:
            value = value.reshape(())
        return self._record(value, "leaf")

    def leaves(self) -> list["Tensor"]:
        return [t for t, n in zip(self.tensors, self.nodes) if n.op == "leaf"]


class Tensor:
    """An array that participates in a tape."""

    __slots__ = ("values", "grad", "tape", "node_id")

    def __init__(self, values: np.ndarray, tape: Tape, node_id: int):
        self.values = values
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node_id={self.node_id})"


@dataclass(frozen=True)
class ReversalScale:
    """Strength of the gradient reversal: the backward multiplier is ``-(lam * tau)``."""

    lam: float
    tau: float

    def __post_init__(self):
        if not self.lam >= 0:
            raise InvalidConfig(f"reversal lambda must be nonnegative, got {self.lam}")
        if not 0.0 <= self.tau < 1.0:
            raise InvalidConfig(f"reversal tau must lie in [0, 1), got {self.tau}")

    @property
    def multiplier(self) -> float:
        return -(self.lam * self.tau)


# ---------------------------------------------------------------------------
# initialisation

def init_tensor(shape: Sequence[int], scheme="zeros", seed: int = 0, fan_in: int | None = None) -> np.ndarray:
    """Deterministic parameter initialisation.

    ``scheme`` is ``"zeros"``, ``"uniform-he"`` or ``("constant", c)``.  The
    He-uniform range is ``sqrt(6 / fan_in)``; ``fan_in`` defaults to the
    product of all extents but the first, or the single extent of a vector.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise InvalidShape(f"all extents must be >= 1, got {shape}")
    if scheme == "zeros":
        return np.zeros(shape, dtype=DTYPE)
    if isinstance(scheme, tuple) and scheme[0] == "constant":
        return np.full(shape, float(scheme[1]), dtype=DTYPE)
    if scheme == "uniform-he":
        if fan_in is None:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
        bound = np.sqrt(6.0 / fan_in)
        rng = np.random.default_rng(seed)
        return rng.uniform(-bound, bound, size=shape).astype(DTYPE)
    raise InvalidConfig(f"unknown init scheme {scheme!r}")


# ---------------------------------------------------------------------------
# elementwise

def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def elementwise(kind, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Elementwise ``add``, ``sub``, ``mul``, ``relu`` or ``("scale", c)``.

    For binary kinds ``b`` must match ``a``'s shape or be a scalar tensor.
    """
    tape = a.tape
    if isinstance(kind, tuple) and kind[0] == "scale":
        c = float(kind[1])
        return tape._record(a.values * c, "scale", (a,), lambda g: (g * c,))
    if kind == "relu":
        mask = a.values > 0
        return tape._record(np.where(mask, a.values, 0.0), "relu", (a,), lambda g: (g * mask,))
    if kind not in ("add", "sub", "mul"):
        raise InvalidConfig(f"unknown elementwise kind {kind!r}")
    if b is None:
        raise InvalidShape(f"{kind} needs two operands")
    if a.shape != b.shape and b.values.size != 1:
        raise InvalidShape(f"{kind}: shapes {a.shape} and {b.shape} differ")
    av, bv = a.values, b.values
    bshape = b.shape
    if kind == "add":
        return tape._record(av + bv, "add", (a, b), lambda g: (g, _unbroadcast(g, bshape)))
    if kind == "sub":
        return tape._record(av - bv, "sub", (a, b), lambda g: (g, _unbroadcast(-g, bshape)))
    return tape._record(av * bv, "mul", (a, b), lambda g: (g * bv, _unbroadcast(g * av, bshape)))


def add(a, b):
    return elementwise("add", a, b)


def relu(a):
    return elementwise("relu", a)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """``x[n, j] + bias[j]`` for a 2-D ``x``."""
    if x.values.ndim != 2 or bias.shape != (x.shape[1],):
        raise InvalidShape(f"bias {bias.shape} does not fit {x.shape}")
    return x.tape._record(x.values + bias.values, "add_bias", (x, bias), lambda g: (g, g.sum(axis=0)))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return a.tape._record(np.asarray(a.values.sum()), "sum", (a,), lambda g: (np.full(shape, g),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.values.size
    return a.tape._record(np.asarray(a.values.mean()), "mean", (a,), lambda g: (np.full(shape, g / n),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return a.tape._record(a.values.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def select_column(a: Tensor, j: int) -> Tensor:
    """``a[:, j]`` for a 2-D tensor."""
    shape = a.shape

    def back(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[:, j] = g
        return (out,)

    return a.tape._record(a.values[:, j].copy(), "select", (a,), back)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise InvalidShape(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a.tape._record(av @ bv, "matmul", (a, b), lambda g: (g @ bv.T, av.T @ g))


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW layout."""
    xv, kv = x.values, kernel.values
    if xv.ndim != 4 or kv.ndim != 4 or xv.shape[1] != kv.shape[1]:
        raise InvalidShape(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    if bias.shape != (kv.shape[0],):
        raise InvalidShape(f"conv2d: bias {bias.shape} does not match {kv.shape[0]} filters")
    if stride < 1 or padding < 0:
        raise InvalidConfig("conv2d: stride must be >= 1 and padding >= 0")
    B, C, H, W = xv.shape
    F, _, kh, kw = kv.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise InvalidShape(f"conv2d: kernel {kh}x{kw} exceeds padded input {Hp}x{Wp}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    xp = _pad(xv, padding)

    # cols[b, c, i, j, ho, wo] = xp[b, c, ho*s + i, wo*s + j]
    cols = np.empty((B, C, kh, kw, Ho, Wo), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    cols2 = cols.transpose(0, 4, 5, 1, 2, 3).reshape(B * Ho * Wo, C * kh * kw)
    kmat = kv.reshape(F, -1)
    out = (cols2 @ kmat.T + bias.values).reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, F)
        gk = (g2.T @ cols2).reshape(kv.shape)
        gb = g2.sum(axis=0)
        gcols = (g2 @ kmat).reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, i, j]
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return gx, gk, gb

    return x.tape._record(np.ascontiguousarray(out), "conv2d", (x, kernel, bias), back)


def pool2d(kind: str, x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Max or average pooling over square windows.

    Max pooling sends the gradient to the first maximal element of each window
    in row-major order.
    """
    stride = window if stride is None else stride
    xv = x.values
    if xv.ndim != 4:
        raise InvalidShape(f"pool2d expects NCHW input, got {x.shape}")
    B, C, H, W = xv.shape
    if window < 1 or stride < 1 or window > H or window > W:
        raise InvalidShape(f"pool2d: window {window} does not fit {H}x{W}")
    Ho = (H - window) // stride + 1
    Wo = (W - window) // stride + 1

    def view(i, j):
        return (slice(None), slice(None), slice(i, i + stride * Ho, stride), slice(j, j + stride * Wo, stride))

    offsets = [(i, j) for i in range(window) for j in range(window)]
    if kind == "avg":
        out = sum(xv[view(i, j)] for i, j in offsets) / (window * window)

        def back(g):
            gx = np.zeros_like(xv)
            share = g / (window * window)
            for i, j in offsets:
                gx[view(i, j)] += share
            return (gx,)

        return x.tape._record(out, "avgpool", (x,), back)
    if kind != "max":
        raise InvalidConfig(f"unknown pool kind {kind!r}")

    out = xv[view(0, 0)].copy()
    arg = np.zeros(out.shape, dtype=np.int64)
    for k, (i, j) in enumerate(offsets[1:], start=1):
        cand = xv[view(i, j)]
        better = cand > out
        out = np.where(better, cand, out)
        arg[better] = k

    def back(g):
        gx = np.zeros_like(xv)
        for k, (i, j) in enumerate(offsets):
            gx[view(i, j)] += np.where(arg == k, g, 0.0)
        return (gx,)

    return x.tape._record(out, "maxpool", (x,), back)


def global_avg_pool(x: Tensor) -> Tensor:
    xv = x.values
    if xv.ndim != 4:
        raise InvalidShape(f"global_avg_pool expects NCHW input, got {x.shape}")
    B, C, H, W = xv.shape
    n = H * W

    def back(g):
        return (np.broadcast_to((g / n)[:, :, None, None], xv.shape).copy(),)

    return x.tape._record(xv.mean(axis=(2, 3)), "gap", (x,), back)


# ---------------------------------------------------------------------------
# losses and reversal

def softmax_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean cross-entropy over the batch; returns ``(loss, probs)``."""
    z = logits.values
    if z.ndim != 2:
        raise InvalidShape(f"logits must be 2-D, got {logits.shape}")
    B, K = z.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (B,):
        raise InvalidShape(f"expected {B} labels, got {labels.shape}")
    if B and (labels.min() < 0 or labels.max() >= K):
        raise InvalidLabel(f"labels must lie in [0, {K}), got {labels.tolist()}")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    probs = np.exp(logp)
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()

    def back(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (d * (g / B),)

    return logits.tape._record(np.asarray(loss), "softmax_ce", (logits,), back), probs


def grad_reversal(x: Tensor, scale: ReversalScale) -> Tensor:
    """Identity forward; backward multiplies the gradient by ``-(lam * tau)``."""
    m = scale.multiplier
    return x.tape._record(x.values, "grad_reversal", (x,), lambda g: (g * m,))


# ---------------------------------------------------------------------------
# backward

def backward(loss: Tensor, tape: Tape | None = None) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(node) for every node on the tape.

    Returns a map from node id to gradient array.  Leaves the loss does not
    depend on get zero gradients.  Each leaf tensor's ``grad`` is set too.
    """
    tape = loss.tape if tape is None else tape
    if loss.tape is not tape:
        raise ValueError("loss was not produced on this tape")
    if loss.values.size != 1 or loss.values.ndim > 1:
        raise InvalidShape(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.values)}
    for nid in range(loss.node_id, -1, -1):
        g = grads.get(nid)
        node = tape.nodes[nid]
        if g is None or node.backward_fn is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if inp in grads:
                grads[inp] = grads[inp] + gi
            else:
                grads[inp] = gi
    for t, node in zip(tape.tensors, tape.nodes):
        if node.op == "leaf":
            if t.node_id not in grads:
                grads[t.node_id] = np.zeros_like(t.values)
            t.grad = grads[t.node_id]
    return grads


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    if not eps > 0:
        raise InvalidConfig("eps must be positive")
    x = np.array(x, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad
