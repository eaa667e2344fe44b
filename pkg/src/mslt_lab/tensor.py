"""Reverse-mode autodiff over dense float64 arrays.

Design notes:

* Everything is float64. Gradient checks and bit-identity freezing tests
  dominate the test surface, so precision wins over speed.
* The backward graph is pruned at construction time: an op records a graph
  node only if at least one input requires a gradient. A subgraph built
  entirely from frozen parameters and constants therefore produces plain
  constant tensors, and `backward()` never visits it. Frozen layers cost
  exactly zero backward work, the same as feeding precomputed activations.
* Gradients accumulate (`+=`) and are zeroed explicitly by the caller.
  This is required when one Parameter is applied at several graph sites
  (tied embeddings, grouped layer sharing).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericsError, ShapeError

_GRAD_ENABLED = True

# Test hook used by the gradcheck --mutate flag: flips the sign of the gelu
# backward rule so a deliberately broken gradient is detectable.
_GELU_BACKWARD_SIGN = 1.0


class no_grad:
    """Context manager that disables graph recording (forward-only evaluation)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class corrupt_gelu_backward:
    """Test hook: sign-flips the gelu gradient while active (gradcheck --mutate)."""

    def __enter__(self):
        global _GELU_BACKWARD_SIGN
        self._prev = _GELU_BACKWARD_SIGN
        _GELU_BACKWARD_SIGN = -1.0
        return self

    def __exit__(self, *exc):
        global _GELU_BACKWARD_SIGN
        _GELU_BACKWARD_SIGN = self._prev
        return False


class Node:
    """Backward-graph node: the op that produced a tensor plus its gradient rule."""

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op, inputs):
        self.op = op
        self.inputs = inputs
        self.backward_fn = None


class Tensor:
    """Dense float64 array with an optional gradient slot and producing node."""

    __slots__ = ("data", "grad", "node", "requires_grad")

    def __init__(self, data, requires_grad=False, node=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.node = node
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        op = self.node.op if self.node is not None else "leaf"
        return f"Tensor(shape={self.shape}, op={op}, requires_grad={self.requires_grad})"


class Parameter:
    """Named leaf tensor with a trainable flag.

    Freezing a parameter drops its gradient array and removes it from graph
    recording: no grad is ever allocated for a frozen parameter.
    """

    __slots__ = ("id", "tensor")

    def __init__(self, id, data, trainable=True):
        self.id = id
        self.tensor = Tensor(data, requires_grad=trainable)

    @property
    def trainable(self):
        return self.tensor.requires_grad

    @trainable.setter
    def trainable(self, value):
        self.tensor.requires_grad = bool(value)
        if not value:
            self.tensor.grad = None

    @property
    def data(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    def zero_grad(self):
        self.tensor.grad = None

    def __repr__(self):
        return f"Parameter({self.id!r}, shape={self.tensor.shape}, trainable={self.trainable})"


def constant(data):
    """Wrap an array as a non-differentiable tensor."""
    return Tensor(data, requires_grad=False)


def _record(data, op, inputs, make_backward):
    """Create the output tensor, recording a node only when gradients can flow.

    `make_backward(out)` must return a closure accumulating into the inputs'
    grads; it is invoked only for recorded nodes, so frozen subgraphs never
    pay for closure construction either.
    """
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        node = Node(op, inputs)
        out = Tensor(data, requires_grad=True, node=node)
        node.backward_fn = make_backward(out)
        return out
    return Tensor(data, requires_grad=False)


def _sum_to_shape(g, shape):
    """Reduce a broadcast gradient back to the shape of the broadcast input."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def add(a, b):
    """Elementwise broadcast addition."""
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def make_backward(out):
        def backward_fn(g):
            if a.requires_grad:
                a.accumulate_grad(_sum_to_shape(g, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_sum_to_shape(g, b.shape))
        return backward_fn

    return _record(data, "add", (a, b), make_backward)


def mul(a, b):
    """Elementwise broadcast multiplication."""
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def make_backward(out):
        def backward_fn(g):
            if a.requires_grad:
                a.accumulate_grad(_sum_to_shape(g * b.data, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_sum_to_shape(g * a.data, b.shape))
        return backward_fn

    return _record(data, "mul", (a, b), make_backward)


def scale(a, c):
    """Multiply by a python float."""
    c = float(c)

    def make_backward(out):
        def backward_fn(g):
            if a.requires_grad:
                a.accumulate_grad(g * c)
        return backward_fn

    return _record(a.data * c, "scale", (a,), make_backward)


def matmul(a, b):
    """Batched matrix product [.., m, k] x [.., k, n] -> [.., m, n].

    Leading batch dimensions broadcast with numpy semantics; a 2-D weight on
    the right acts as a shared projection.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} x {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions do not broadcast for {a.shape} x {b.shape}")

    def make_backward(out):
        def backward_fn(g):
            if a.requires_grad:
                ga = g @ np.swapaxes(b.data, -1, -2)
                a.accumulate_grad(_sum_to_shape(ga, a.shape))
            if b.requires_grad:
                gb = np.swapaxes(a.data, -1, -2) @ g
                b.accumulate_grad(_sum_to_shape(gb, b.shape))
        return backward_fn

    return _record(data, "matmul", (a, b), make_backward)


def transpose(a, axes):
    """Permute axes."""
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def make_backward(out):
        def backward_fn(g):
            if a.requires_grad:
                a.accumulate_grad(g.transpose(inv))
        return backward_fn

    return _record(a.data.transpose(axes), "transpose", (a,), make_backward)


def reshape(a, shape):
    shape = tuple(shape)
    old = a.shape

    def make_backward(out):
        def backward_fn(g):
            if a.requires_grad:
                a.accumulate_grad(g.reshape(old))
        return backward_fn

    return _record(np.ascontiguousarray(a.data).reshape(shape), "reshape", (a,), make_backward)


def select(a, axis, index):
    """Pick one slice along an axis (e.g. the CLS position), dropping that axis."""
    data = np.take(a.data, index, axis=axis)

    def make_backward(out):
        def backward_fn(g):
            if a.requires_grad:
                full = np.zeros_like(a.data)
                sl = [slice(None)] * a.data.ndim
                sl[axis] = index
                full[tuple(sl)] = g
                a.accumulate_grad(full)
        return backward_fn

    return _record(data, "select", (a,), make_backward)


def embedding(weight, ids):
    """Row lookup: out[..., :] = weight[ids[...], :]. Backward scatter-adds."""
    ids = np.asarray(ids)
    if weight.data.ndim != 2:
        raise ShapeError(f"embedding: weight must be 2-D, got {weight.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(
            f"embedding: id out of range [0, {weight.shape[0]}) "
            f"(min {ids.min()}, max {ids.max()})"
        )

    def make_backward(out):
        def backward_fn(g):
            if weight.requires_grad:
                if weight.grad is None:
                    weight.grad = np.zeros_like(weight.data)
                np.add.at(weight.grad, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return backward_fn

    return _record(weight.data[ids], "embedding", (weight,), make_backward)


def softmax(a, axis=-1):
    """Max-subtracted softmax; output sums to 1 along `axis` for finite input."""
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    data = e / e.sum(axis=axis, keepdims=True)

    def make_backward(out):
        p = out.data

        def backward_fn(g):
            if a.requires_grad:
                a.accumulate_grad(p * (g - (g * p).sum(axis=axis, keepdims=True)))
        return backward_fn

    return _record(data, "softmax", (a,), make_backward)


def layer_norm(x, gamma, beta, eps):
    """Normalize over the last axis, then apply the affine (gamma, beta)."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be > 0")
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} "
            f"do not match last dim of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gamma.data + beta.data

    def make_backward(out):
        def backward_fn(g):
            if gamma.requires_grad:
                gamma.accumulate_grad((g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
            if beta.requires_grad:
                beta.accumulate_grad(g.reshape(-1, x.shape[-1]).sum(axis=0))
            if x.requires_grad:
                gx = g * gamma.data
                m1 = gx.mean(axis=-1, keepdims=True)
                m2 = (gx * xhat).mean(axis=-1, keepdims=True)
                x.accumulate_grad((gx - m1 - xhat * m2) * inv)
        return backward_fn

    return _record(data, "layer_norm", (x, gamma, beta), make_backward)


# tanh-approximation constants: gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
_GELU_C0 = math.sqrt(2.0 / math.pi)
_GELU_C1 = 0.044715


def gelu(a):
    """GELU activation, tanh approximation (constants above)."""
    x = a.data
    u = _GELU_C0 * (x + _GELU_C1 * x**3)
    t = np.tanh(u)
    data = 0.5 * x * (1.0 + t)

    def make_backward(out):
        def backward_fn(g):
            if a.requires_grad:
                du = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * x**2)
                local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du
                a.accumulate_grad(_GELU_BACKWARD_SIGN * g * local)
        return backward_fn

    return _record(data, "gelu", (a,), make_backward)


def tanh(a):
    t = np.tanh(a.data)

    def make_backward(out):
        def backward_fn(g):
            if a.requires_grad:
                a.accumulate_grad(g * (1.0 - t**2))
        return backward_fn

    return _record(t, "tanh", (a,), make_backward)


def dropout(a, rate, rng):
    """Inverted dropout. Identity when rate == 0 (the default everywhere)."""
    if rate == 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)

    def make_backward(out):
        def backward_fn(g):
            if a.requires_grad:
                a.accumulate_grad(g * keep)
        return backward_fn

    return _record(a.data * keep, "dropout", (a,), make_backward)


def cross_entropy(logits, targets, ignore_index=-1):
    """Mean negative log-softmax over non-ignored target positions.

    `logits` is [n, V]; `targets` length n with entries in [0, V) or equal to
    `ignore_index`. Returns a scalar tensor; 0 if every position is ignored.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D [n, V], got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy: targets shape {targets.shape} does not match logits {logits.shape}"
        )
    valid = targets != ignore_index
    checked = targets[valid]
    if checked.size and (checked.min() < 0 or checked.max() >= logits.shape[1]):
        raise IndexError(
            f"cross_entropy: target out of range [0, {logits.shape[1]})"
        )

    x = logits.data
    m = x.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))
    logp = x - lse
    n_valid = int(valid.sum())
    if n_valid == 0:
        data = np.float64(0.0)
    else:
        rows = np.nonzero(valid)[0]
        data = -logp[rows, targets[rows]].mean()

    def make_backward(out):
        def backward_fn(g):
            if logits.requires_grad and n_valid:
                d = np.exp(logp)
                rows = np.nonzero(valid)[0]
                onehot_rows = np.zeros_like(d)
                onehot_rows[rows, targets[rows]] = 1.0
                d = (d - onehot_rows) / n_valid
                d[~valid] = 0.0
                logits.accumulate_grad(g * d)
        return backward_fn

    return _record(data, "cross_entropy", (logits,), make_backward)


# ---------------------------------------------------------------------------
# backward traversal
# ---------------------------------------------------------------------------


def backward(loss, trace=None):
    """Accumulate gradients of a scalar loss into every reachable grad slot.

    Only recorded nodes are visited; subgraphs with no trainable parameter
    were never recorded, so frozen layers contribute zero backward work.
    Calling twice without zeroing grads accumulates (by design).

    If `trace` is a list, the op kind of every visited node is appended, in
    visit order (used by the pruning tests and cost instrumentation).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad or loss.node is None:
        return

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        t, emitted = stack.pop()
        if emitted:
            topo.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

    loss.accumulate_grad(np.ones_like(loss.data))
    for t in reversed(topo):
        if t.node is not None:
            if trace is not None:
                trace.append(t.node.op)
            t.node.backward_fn(t.grad)


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Relative errors between analytic and central-difference gradients.

    Relative error: |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """

    per_parameter: dict = field(default_factory=dict)
    global_max: float = 0.0
    coords_checked: int = 0

    @property
    def worst_parameter(self):
        if not self.per_parameter:
            return ""
        return max(self.per_parameter, key=self.per_parameter.get)


def finite_diff_check(loss_fn, params, eps=2e-3, max_coords_per_param=None, seed=0,
                      richardson=True):
    """Compare analytic gradients of `loss_fn()` against central differences.

    `loss_fn` must rebuild the forward graph from the parameters' current
    data on every call. Frozen entries in `params` are skipped. Large
    tensors are subsampled with a seeded sampler when
    `max_coords_per_param` is given.

    By default each coordinate uses central differences at eps and eps/2
    combined by Richardson extrapolation: the eps^2 curvature term cancels,
    which keeps both near-zero gradients (roundoff-limited, want large eps)
    and strongly curved directions (truncation-limited, want small eps)
    inside one tolerance.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"finite_diff_check: eps must be in (0, 1e-2], got {eps}")

    for p in params:
        p.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data):
        raise NumericsError("finite_diff_check: loss is not finite")
    backward(loss)

    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    with no_grad():
        for p in params:
            if not p.trainable:
                continue
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            analytic = analytic.reshape(-1).copy()
            flat = p.data.reshape(-1)
            n = flat.size
            if max_coords_per_param is not None and n > max_coords_per_param:
                coords = rng.choice(n, size=max_coords_per_param, replace=False)
            else:
                coords = np.arange(n)
            def central(idx, e):
                orig = flat[idx]
                flat[idx] = orig + e
                f_plus = loss_fn().item()
                flat[idx] = orig - e
                f_minus = loss_fn().item()
                flat[idx] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise NumericsError("finite_diff_check: perturbed loss is not finite")
                return (f_plus - f_minus) / (2.0 * e)

            worst = 0.0
            for idx in coords:
                if richardson:
                    coarse = central(idx, eps)
                    fine = central(idx, eps / 2.0)
                    numeric = (4.0 * fine - coarse) / 3.0
                else:
                    numeric = central(idx, eps)
                a = analytic[idx]
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, rel)
            report.per_parameter[p.id] = worst
            report.coords_checked += len(coords)
    report.global_max = max(report.per_parameter.values(), default=0.0)
    return report
