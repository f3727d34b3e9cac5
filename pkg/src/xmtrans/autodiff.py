"""Dense-tensor math with reverse-mode differentiation and Adam.

Everything is float64 numpy under the hood. Operations record backward
closures on an explicit :class:`Tape`; one backward pass per tape. This is
deliberately a dynamic tape (rebuilt per forward) because the multi-resolution
training loop drives three differently-shaped models through the same ops.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MASK_FILL = -1e9  # finite mask constant: keeps softmax gradients NaN-free


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class TapeError(RuntimeError):
    """Tape misuse: double backward, backward off-tape, etc."""


class UsageError(RuntimeError):
    """API misuse that is not a shape problem (e.g. missing gradient)."""


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of operations for one reverse sweep.

    Use as a context manager around a forward pass; ops executed inside
    record themselves when any input requires grad.
    """

    def __init__(self):
        self._entries = []  # (inputs, output, backward_fn), topological order
        self._consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False

    def _record(self, inputs, output, backward_fn):
        output.tape_id = len(self._entries)
        self._entries.append((inputs, output, backward_fn))

    def __len__(self):
        return len(self._entries)


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A dense n-d float64 value, optionally participating in a tape."""

    __slots__ = ("data", "requires_grad", "grad", "tape_id")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)  # keeps 0-d arrays 0-d
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.tape_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        if g.shape == t.data.shape:
            t.grad = g.copy()  # own the buffer; g may be a view of out.grad
        else:
            t.grad = np.zeros_like(t.data)
            t.grad += g
    else:
        t.grad += g


def _make(out_data, inputs, backward_fn):
    req = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req)
    tape = _active_tape()
    if tape is not None and req:
        tape._record(inputs, out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor, tape: Tape):
    """Reverse sweep: populate .grad on every requires_grad leaf of the tape."""
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape._consumed:
        raise TapeError("tape already consumed by a previous backward; build a new tape")
    tape._consumed = True
    loss.grad = np.ones_like(loss.data)
    for inputs, out, backward_fn in reversed(tape._entries):
        if out.grad is None:
            continue
        backward_fn(out.grad)
    # leaves recorded on the tape but off the loss path hold an exact zero
    for inputs, _out, _fn in tape._entries:
        for t in inputs:
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accumulate(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, _unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), bwd)


def _elementwise(a: Tensor, b: Tensor, fwd, bwd_a, bwd_b):
    out_data = fwd(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(bwd_a(g), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(bwd_b(g), b.shape))

    return _make(out_data, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _elementwise(a, b, np.add, lambda g: g, lambda g: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _elementwise(a, b, np.subtract, lambda g: g, lambda g: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _elementwise(a, b, np.multiply,
                        lambda g: g * b.data, lambda g: g * a.data)


def div(a: Tensor, b: Tensor) -> Tensor:
    return _elementwise(a, b, np.divide,
                        lambda g: g / b.data,
                        lambda g: -g * a.data / (b.data * b.data))


def scale(a: Tensor, s: float) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * s)
    return _make(a.data * s, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * 0.5 / out_data)

    return _make(out_data, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out_data = a.data.reshape(shape)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(a.shape))

    return _make(out_data, (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), bwd)


def stack(tensors, axis: int) -> Tensor:
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        parts = np.moveaxis(g, axis, 0)
        for t, gp in zip(tensors, parts):
            if t.requires_grad:
                _accumulate(t, np.ascontiguousarray(gp))

    return _make(out_data, tuple(tensors), bwd)


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if a.requires_grad:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _make(out_data, (a,), bwd)


def mean_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    n = a.data.shape[axis]
    out_data = a.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        if a.requires_grad:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(g / n, a.shape).copy())

    return _make(out_data, (a,), bwd)


def take_last_step(a: Tensor) -> Tensor:
    """Select the last entry along the second-to-last (time) axis."""
    if a.data.ndim < 2:
        raise ShapeError(f"take_last_step needs >= 2 dims, got {a.shape}")
    out_data = np.ascontiguousarray(a.data[..., -1, :])

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[..., -1, :] = g
            _accumulate(a, full)

    return _make(out_data, (a,), bwd)


def take_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    """Gather rows along the first axis."""
    rows = np.asarray(rows, dtype=np.int64)
    out_data = a.data[rows]

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, rows, g)
            _accumulate(a, full)

    return _make(out_data, (a,), bwd)


def softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            dot = (g * out_data).sum(axis=-1, keepdims=True)
            _accumulate(x, out_data * (g - dot))

    return _make(out_data, (x,), bwd)


def masked_fill_causal(x: Tensor, fill: float = MASK_FILL) -> Tensor:
    """Set score entries (i, j) with j > i to `fill`; gradient is zero there."""
    if x.data.ndim < 2 or x.data.shape[-1] != x.data.shape[-2]:
        raise ShapeError(f"masked_fill_causal needs square trailing dims, got {x.shape}")
    t = x.data.shape[-1]
    future = np.triu(np.ones((t, t), dtype=bool), k=1)
    out_data = np.where(future, fill, x.data)

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, np.where(future, 0.0, g))

    return _make(out_data, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta must be ({d},), got "
                         f"{gamma.shape}/{beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    std = np.sqrt(var + eps)
    xh = xc / std
    out_data = gamma.data * xh + beta.data

    def bwd(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xh).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxh = g * gamma.data
            m1 = dxh.mean(axis=-1, keepdims=True)
            m2 = (dxh * xh).mean(axis=-1, keepdims=True)
            _accumulate(x, (dxh - m1 - xh * m2) / std)

    return _make(out_data, (x, gamma, beta), bwd)


def conv1d_time(x: Tensor, kernel: Tensor, bias: Tensor,
                padding: str = "circular") -> Tensor:
    """Convolution along the time axis of x[..., T, c_in].

    kernel is [k, c_in, c_out], k odd. `circular` pads by wrap-around
    (centered taps); `causal` pads k-1 zeros on the left so output t sees
    only inputs <= t.
    """
    k, c_in, c_out = kernel.data.shape
    if k % 2 == 0:
        raise UsageError(f"conv1d_time kernel size must be odd, got {k}")
    if x.data.shape[-1] != c_in:
        raise ShapeError(f"conv1d_time: input channels {x.data.shape[-1]} != "
                         f"kernel c_in {c_in}")
    if bias.data.shape != (c_out,):
        raise ShapeError(f"conv1d_time: bias must be ({c_out},), got {bias.shape}")
    if padding not in ("circular", "causal"):
        raise UsageError(f"unknown conv padding {padding!r}")
    t = x.data.shape[-2]
    if padding == "circular":
        pad = k // 2
        xp = np.concatenate([x.data[..., -pad:, :], x.data, x.data[..., :pad, :]],
                            axis=-2)
    else:
        zeros = np.zeros(x.data.shape[:-2] + (k - 1, c_in))
        xp = np.concatenate([zeros, x.data], axis=-2)

    out_data = np.zeros(x.data.shape[:-1] + (c_out,))
    for j in range(k):
        out_data += np.matmul(xp[..., j:j + t, :], kernel.data[j])
    out_data += bias.data

    def bwd(g):
        if kernel.requires_grad:
            gflat = g.reshape(-1, c_out)
            gk = np.empty_like(kernel.data)
            for j in range(k):
                gk[j] = xp[..., j:j + t, :].reshape(-1, c_in).T @ gflat
            _accumulate(kernel, gk)
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, c_out).sum(axis=0))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[..., j:j + t, :] += np.matmul(g, kernel.data[j].T)
            if padding == "circular":
                pad = k // 2
                gx = gxp[..., pad:pad + t, :].copy()
                gx[..., -pad:, :] += gxp[..., :pad, :]
                gx[..., :pad, :] += gxp[..., pad + t:, :]
            else:
                gx = gxp[..., k - 1:, :].copy()
            _accumulate(x, gx)

    return _make(out_data, (x, kernel, bias), bwd)


def linear_affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b on the last axis."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(f"linear_affine: input dim {x.data.shape[-1]} != "
                         f"weight rows {w.data.shape[0]}")
    lead = x.data.shape[:-1]
    xt = x if x.data.ndim >= 2 else reshape(x, (1, x.data.shape[-1]))
    out = matmul(xt, w)
    out = add(out, b)
    if x.data.ndim < 2:
        out = reshape(out, lead + (w.data.shape[1],))
    return out


def embedding_lookup(table: Tensor, index: int, feature: str = "") -> Tensor:
    v = table.data.shape[0]
    if not 0 <= index < v:
        raise IndexError(f"embedding index {index} out of range [0, {v}) "
                         f"for feature {feature or 'unnamed'}")
    out_data = table.data[index].copy()

    def bwd(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            gt[index] = g
            _accumulate(table, gt)

    return _make(out_data, (table,), bwd)


def embedding_gather(table: Tensor, indices: np.ndarray, feature: str = "") -> Tensor:
    """Batched row lookup: indices of any shape -> [*indices.shape, d]."""
    indices = np.asarray(indices)
    v = table.data.shape[0]
    if indices.size and (indices.min() < 0 or indices.max() >= v):
        bad = int(indices.min()) if indices.min() < 0 else int(indices.max())
        raise IndexError(f"embedding index {bad} out of range [0, {v}) "
                         f"for feature {feature or 'unnamed'}")
    out_data = table.data[indices]

    def bwd(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, indices.reshape(-1), g.reshape(-1, table.data.shape[1]))
            _accumulate(table, gt)

    return _make(out_data, (table,), bwd)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out_data = np.array((diff * diff).mean())

    def bwd(g):
        gd = g * 2.0 * diff / n
        if pred.requires_grad:
            _accumulate(pred, gd)
        if target.requires_grad:
            _accumulate(target, -gd)

    return _make(out_data, (pred, target), bwd)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Per-parameter Adam moments and step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(param: Tensor, lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(m=np.zeros_like(param.data), v=np.zeros_like(param.data),
                     t=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(param: Tensor, state: AdamState):
    """Bias-corrected Adam update in place; clears the gradient."""
    if param.grad is None:
        raise UsageError("adam_step: parameter has no gradient")
    g = param.grad
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    mhat = state.m / (1.0 - state.beta1 ** state.t)
    vhat = state.v / (1.0 - state.beta2 ** state.t)
    param.data -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    param.grad = None


class Adam:
    """Convenience wrapper: one AdamState per parameter."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.states = [adam_init(p, lr, beta1, beta2, eps) for p in self.params]

    def step(self):
        for p, s in zip(self.params, self.states):
            if p.grad is None:
                continue  # parameter unused by this graph (e.g. wiring variant)
            adam_step(p, s)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
