"""Minimal reverse-mode automatic differentiation on numpy arrays.

A :class:`Tensor` wraps an ndarray and, when gradient tracking is on,
remembers the operation that produced it.  :func:`backward` walks the graph
once in reverse topological order and accumulates d(loss)/d(tensor) into
``.grad`` for every tracked tensor; repeated calls keep accumulating until
grads are reset.

The op set is exactly what the sleep scoring network needs: elementwise
arithmetic with broadcasting, 2-D matmul, reshape/slice/concat, reductions,
relu/tanh/sigmoid/softmax, dropout, 1-D cross-correlation and max pooling,
and embedding lookup.  A central-finite-difference checker verifies any
scalar function of the parameters against the autodiff gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NumericError(ArithmeticError):
    """Non-finite values or violated numeric invariants during evaluation."""


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, grad={'set' if self.grad is not None else 'none'})"

    def zero_grad(self):
        self.grad = None

    # Operator sugar; constants are wrapped as untracked tensors.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(np.asarray(-1.0, dtype=self.dtype)))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.values + b.values

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.values - b.values

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.values * b.values

    def backward(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _make(out, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    out = a.values @ b.values

    def backward(g):
        return g @ b.values.T, a.values.T @ g

    return _make(out, (a, b), backward)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    out = x.values.reshape(shape)

    def backward(g):
        return (g.reshape(old),)

    return _make(out, (x,), backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    index = [slice(None)] * x.values.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = x.values[index]

    def backward(g):
        gx = np.zeros_like(x.values)
        gx[index] = g
        return (gx,)

    return _make(out, (x,), backward)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.values.shape[axis] for t in tensors]

    def backward(g):
        splits = np.cumsum(sizes[:-1])
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), backward)


def tsum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = x.values.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=False),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, x.shape).astype(x.dtype, copy=False),)

    return _make(out, (x,), backward)


def tmean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.values.size if axis is None else x.values.shape[axis]
    return tsum(x, axis=axis, keepdims=keepdims) * _wrap(np.asarray(1.0 / n, dtype=x.dtype))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.values, 0)

    def backward(g):
        return (g * (x.values > 0),)

    return _make(out, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.values)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.values)
    pos = x.values >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.values[pos]))
    ez = np.exp(x.values[~pos])
    out[~pos] = ez / (1.0 + ez)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), backward)


def tlog(x: Tensor) -> Tensor:
    out = np.log(x.values)

    def backward(g):
        return (g / x.values,)

    return _make(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    # max-subtraction keeps exp finite for any finite logits
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (x,), backward)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Zero elements with probability ``rate`` and rescale survivors by
    1/(1-rate) in training mode; identity in inference mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    out = x.values * keep

    def backward(g):
        return (g * keep,)

    return _make(out, (x,), backward)


def conv1d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (batch, in_ch, length) with (out_ch, in_ch, width).

    out_length = floor((length + 2*padding - width) / stride) + 1.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    batch, in_ch, length = x.shape
    out_ch, k_in, width = kernels.shape
    if k_in != in_ch:
        raise ValueError(f"kernel expects {k_in} input channels, input has {in_ch}")
    padded_len = length + 2 * padding
    if width > padded_len:
        raise ValueError(f"kernel width {width} exceeds padded length {padded_len}")

    xp = np.pad(x.values, ((0, 0), (0, 0), (padding, padding))) if padding else x.values
    out_len = (padded_len - width) // stride + 1
    starts = np.arange(out_len) * stride
    windows = np.lib.stride_tricks.sliding_window_view(xp, width, axis=2)[:, :, starts, :]
    out = np.einsum("bilw,oiw->bol", windows, kernels.values)

    def backward(g):
        gk = np.einsum("bol,bilw->oiw", g, windows)
        gxp = np.zeros_like(xp)
        for off in range(width):
            # starts are strictly increasing, so indices are unique per offset
            gxp[:, :, starts + off] += np.einsum("bol,oi->bil", g, kernels.values[:, :, off])
        gx = gxp[:, :, padding : padding + length] if padding else gxp
        return gx, gk

    return _make(out, (x, kernels), backward)


def maxpool1d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Max over sliding windows along the last axis of (batch, ch, length)."""
    if stride is None:
        stride = window
    batch, ch, length = x.shape
    if window > length:
        raise ValueError(f"pool window {window} exceeds length {length}")
    out_len = (length - window) // stride + 1
    starts = np.arange(out_len) * stride
    windows = np.lib.stride_tricks.sliding_window_view(x.values, window, axis=2)[:, :, starts, :]
    arg = windows.argmax(axis=3)
    out = np.take_along_axis(windows, arg[..., None], axis=3)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.values)
        b_idx, c_idx, o_idx = np.indices(arg.shape)
        np.add.at(gx, (b_idx, c_idx, starts[o_idx] + arg), g)
        return (gx,)

    return _make(out, (x,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into (vocab, dim); gradients scatter-add back into rows."""
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise ValueError(f"symbol id out of range [0, {table.shape[0]})")
    out = table.values[ids]

    def backward(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(out, (table,), backward)


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, W: Tensor, U: Tensor, b: Tensor):
    """One LSTM step: sigmoid input/forget/output gates, tanh candidate.

    ``W`` is (in_dim, 4*hidden), ``U`` is (hidden, 4*hidden), ``b`` is
    (4*hidden,), gate order [input, forget, candidate, output].  Built from
    primitive ops, so gradients flow without a bespoke backward rule.
    """
    hidden = h_prev.shape[1]
    gates = add(add(matmul(x, W), matmul(h_prev, U)), b)
    i_gate = sigmoid(narrow(gates, 1, 0, hidden))
    f_gate = sigmoid(narrow(gates, 1, hidden, hidden))
    g_cand = tanh(narrow(gates, 1, 2 * hidden, hidden))
    o_gate = sigmoid(narrow(gates, 1, 3 * hidden, hidden))
    c_t = add(mul(f_gate, c_prev), mul(i_gate, g_cand))
    h_t = mul(o_gate, tanh(c_t))
    return h_t, c_t


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tracked tensor.

    The loss must be a scalar.  Tensors feeding multiple consumers receive
    the sum of all path contributions; calling backward again (on a fresh
    or the same graph) adds to existing ``.grad`` values.
    """
    if loss.values.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.values)):
        raise NumericError("loss is not finite")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and node._backward is None:
            # leaf: persist the accumulated gradient
            node.grad = g if node.grad is None else node.grad + g
            continue
        if node._backward is not None:
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def zero_grads(params) -> None:
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.zero_grad()


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_skipped: int
    worst: str = ""

    def __float__(self):
        return self.max_rel_error


def gradient_check(
    f,
    params: list[Tensor] | dict[str, Tensor],
    eps: float = 1e-5,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckResult:
    """Compare autodiff gradients of the scalar ``f()`` against central
    finite differences, coordinate by coordinate.

    Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
    Coordinates sitting on a kink (detected by a blown-up second
    difference, e.g. a ReLU input crossing zero within eps) are skipped
    and counted rather than failed.  ``max_coords_per_param`` limits the
    check to a random coordinate subset for large parameters.
    """
    named = list(params.items()) if isinstance(params, dict) else [
        (f"param{i}", p) for i, p in enumerate(params)
    ]
    tensors = [p for _, p in named]

    zero_grads(tensors)
    loss = f()
    f0 = loss.values.item()
    if not np.isfinite(f0):
        raise NumericError("gradient_check: f() is not finite")
    backward(loss)
    analytic = [None if p.grad is None else p.grad.copy() for _, p in named]

    result = GradCheckResult(max_rel_error=0.0, n_checked=0, n_skipped=0)
    kink_threshold = max(1.0, abs(f0)) * eps**1.5
    for (name, p), a_grad in zip(named, analytic):
        p.values = np.ascontiguousarray(p.values)
        flat = p.values.reshape(-1)  # view: perturbations hit p.values
        a_flat = np.zeros_like(flat) if a_grad is None else a_grad.reshape(-1)
        coords = range(flat.size)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(flat.size, size=max_coords_per_param, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f().values.item()
            flat[i] = orig - eps
            f_minus = f().values.item()
            flat[i] = orig
            if abs(f_plus - 2.0 * f0 + f_minus) > kink_threshold:
                result.n_skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(a_flat[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            result.n_checked += 1
            if rel > result.max_rel_error:
                result.max_rel_error = rel
                result.worst = f"{name}[{i}]: autodiff={a:.6g} numeric={numeric:.6g}"
    return result
