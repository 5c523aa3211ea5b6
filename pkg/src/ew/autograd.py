"""Minimal reverse-mode autodiff over dense float64 numpy buffers.

Everything downstream (attention, generator, fusion, losses) is built from the
ops here. Design points:

- Tape-based reverse mode: ops append nodes to the active ``Tape``; appending
  order is a topological order, so one reverse scan is a reverse-topological
  replay that visits each node exactly once.
- ``detach`` is a hard gradient wall: it returns a tensor sharing the same
  value buffer with no tape edge back to its source.
- float64 everywhere; this library exists to verify gradients and cache
  equivalences, not to be fast at scale.
- Nonlinearity: SiLU (x * sigmoid(x)). Chosen over GELU for its cheaper exact
  derivative; used everywhere a nonlinearity is needed.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import DegenerateNormError, ShapeError

COSINE_NORM_FLOOR = 1e-12  # below this, cosine similarity is treated as degenerate
NEG_INF = -1e30  # additive mask value; exp() underflows to exactly 0 after max-shift


class Tensor:
    """Dense float64 array with optional gradient-tape participation.

    Attributes:
        data: contiguous float64 ndarray (any shape, () for scalars).
        requires_grad: participates in backward passes.
        detached: created by ``detach``; its grad stays all-zero forever.
        grad: accumulated gradient buffer, or None until first deposit.
    """

    __slots__ = ("data", "requires_grad", "detached", "grad", "retains_grad", "_leaf")

    def __init__(self, data, requires_grad: bool = False, detached: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps 0-d scalars 0-d, unlike calling it directly
        self.data = arr
        self.requires_grad = requires_grad
        self.detached = detached
        self.grad = np.zeros_like(self.data) if (requires_grad or detached) else None
        self.retains_grad = False
        self._leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def retain_grad(self):
        """Ask backward() to deposit this tensor's gradient even if it is not a leaf."""
        self.retains_grad = True
        return self

    def zero_grad(self):
        self.grad = None if not self.detached else np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return detach(self)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flags = []
        if self.requires_grad:
            flags.append("grad")
        if self.detached:
            flags.append("detached")
        return f"Tensor(shape={self.data.shape}{', ' + '+'.join(flags) if flags else ''})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def param(data) -> Tensor:
    """Leaf tensor registered for gradient accumulation (a trainable parameter)."""
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


class _Node:
    """One tape record: op id, input tensors, output tensor, backward closure.

    ``backward(out_grad)`` returns one gradient array (or None) per input.
    Saved intermediates live in the closure.
    """

    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of executed ops for one differentiation pass.

    Append order is topological (an op is recorded after the ops that produced
    its inputs), so iterating ``nodes`` in reverse is a reverse-topological
    replay that touches each node exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(x) into .grad for leaves and retain_grad tensors.

        A tensor's total gradient is complete once all its consumers have been
        replayed, i.e. exactly when its producing node is reached in the
        reverse scan; leaves (never produced on this tape) are complete at the
        end. Gradients accumulate (+=) into .grad across backward calls until
        zero_grad.
        """
        if loss.data.ndim != 0:
            raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        pending: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            out_grad = grads.pop(id(node.output), None)
            pending.pop(id(node.output), None)
            if out_grad is None:
                continue  # node does not feed the loss
            if node.output.retains_grad:
                self._deposit(node.output, out_grad)
            for inp, g in zip(node.inputs, node.backward(out_grad)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = grads[key] + g if key in grads else g
                pending[key] = inp
        for key, t in pending.items():
            self._deposit(t, grads[key])

    @staticmethod
    def _deposit(t: Tensor, g: np.ndarray):
        if not t.requires_grad:
            return
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad = t.grad + np.asarray(g).reshape(t.data.shape)


_ACTIVE: list[Tape] = []


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


@contextmanager
def record():
    """Activate a fresh tape for the duration of the block; yields the tape."""
    t = Tape()
    _ACTIVE.append(t)
    try:
        yield t
    finally:
        _ACTIVE.pop()


@contextmanager
def no_grad():
    """Disable tape recording: all outputs are detached by construction."""
    _ACTIVE.append(None)  # type: ignore[arg-type]
    try:
        yield
    finally:
        _ACTIVE.pop()


def _register(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        out._leaf = False
        tape.nodes.append(_Node(op, inputs, out, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b = constant(np.asarray(b, dtype=np.float64))
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add shape mismatch: {a.data.shape} + {b.data.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _register("add", (a, b), out, backward)


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float, np.floating)):
        s = float(b)

        def backward_scalar(g):
            return (g * s,)

        return _register("scalar_mul", (a,), a.data * s, backward_scalar)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul shape mismatch: {a.data.shape} * {b.data.shape}") from None
    a_data, b_data = a.data, b.data

    def backward(g):
        return _unbroadcast(g * b_data, a_data.shape), _unbroadcast(g * a_data, b_data.shape)

    return _register("mul", (a, b), out, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    a_data, b_data = a.data, b.data

    def backward(g):
        return g @ b_data.T, a_data.T @ g

    return _register("matmul", (a, b), a_data @ b_data, backward)


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    """[B, m, k] @ [B, k, n] -> [B, m, n]; one op per stack instead of a loop."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.data.shape[0] != b.data.shape[0] \
            or a.data.shape[2] != b.data.shape[1]:
        raise ShapeError(f"batched_matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    a_data, b_data = a.data, b.data

    def backward(g):
        return g @ b_data.transpose(0, 2, 1), a_data.transpose(0, 2, 1) @ g

    return _register("batched_matmul", (a, b), a_data @ b_data, backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.data.shape

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _register("sum", (x,), out, backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    shape = x.data.shape
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([shape[a] for a in axes]))

    def backward(g):
        g = np.asarray(g) / n
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _register("mean", (x,), out, backward)


# ---------------------------------------------------------------------------
# nonlinear ops


def softmax(x: Tensor, axis: int) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.data.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _register("softmax", (x,), y, backward)


def silu(x: Tensor) -> Tensor:
    """SiLU nonlinearity, x * sigmoid(x). The package's single nonlinearity."""
    s = 1.0 / (1.0 + np.exp(-x.data))
    x_data = x.data

    def backward(g):
        return (g * (s * (1.0 + x_data * (1.0 - s))),)

    return _register("silu", (x,), x_data * s, backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift per channel."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layer_norm affine shape {gain.data.shape}/{bias.data.shape} vs width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data
    gain_data = gain.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain_data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _register("layer_norm", (x, gain, bias), out, backward)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """<a,b> / (|a| |b|) over flattened inputs; scalar output in [-1, 1]."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"cosine_similarity shape mismatch: {a.data.shape} vs {b.data.shape}")
    af, bf = a.data.ravel(), b.data.ravel()
    na, nb = np.linalg.norm(af), np.linalg.norm(bf)
    if na < COSINE_NORM_FLOOR or nb < COSINE_NORM_FLOOR:
        raise DegenerateNormError(f"cosine_similarity norms {na:.3e}, {nb:.3e} below floor {COSINE_NORM_FLOOR}")
    # rounding can push the ratio an epsilon past +-1; clamp to the exact range
    c = min(1.0, max(-1.0, float(af @ bf) / (na * nb)))
    shape = a.data.shape

    def backward(g):
        g = float(g)
        da = g * (bf / (na * nb) - c * af / (na * na))
        db = g * (af / (na * nb) - c * bf / (nb * nb))
        return da.reshape(shape), db.reshape(shape)

    return _register("cosine_similarity", (a, b), np.float64(c), backward)


# ---------------------------------------------------------------------------
# structural ops


def detach(x: Tensor) -> Tensor:
    """Gradient wall: same values, no tape edge back to x."""
    return Tensor(x.data, requires_grad=False, detached=True)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape

    def backward(g):
        return (g.reshape(old),)

    return _register("reshape", (x,), x.data.reshape(shape), backward)


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def backward(g):
        return (g.transpose(inv),)

    return _register("transpose", (x,), x.data.transpose(axes), backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = x.data.shape

    def backward(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _register("slice", (x,), x.data[idx].copy(), backward)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty tensor list")
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(sizes)))

    return _register("concat", tuple(tensors), out, backward)


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate interleaved channel pairs (2j, 2j+1) of x by per-pair angles.

    cos/sin are constant arrays broadcastable to x[..., ::2]. The rotation is
    orthonormal, so the backward pass is the inverse rotation of the gradient.
    """
    if x.data.shape[-1] % 2 != 0:
        raise ShapeError(f"rotate_pairs needs an even last axis, got {x.data.shape}")
    xe, xo = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def backward(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        dx = np.empty_like(g)
        dx[..., 0::2] = ge * cos + go * sin
        dx[..., 1::2] = -ge * sin + go * cos
        return (dx,)

    return _register("rotate_pairs", (x,), out, backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padded 2-D convolution over channel-major grids.

    x: [c_in, h, w] or [c_in, h, w, d] (trailing axis treated as batch).
    w: [c_out, c_in, k, k] with k in {1, 3}; b: [c_out].
    """
    squeeze = x.data.ndim == 3
    xd = x.data[..., None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d input must be 3-D or 4-D, got {x.data.shape}")
    c_out, c_in, k, k2 = w.data.shape
    if k != k2 or k not in (1, 3):
        raise ShapeError(f"conv2d kernel must be 1x1 or 3x3, got {w.data.shape}")
    if xd.shape[0] != c_in:
        raise ShapeError(f"conv2d channels mismatch: input {x.data.shape} vs kernel {w.data.shape}")
    if b.data.shape != (c_out,):
        raise ShapeError(f"conv2d bias shape {b.data.shape} vs c_out {c_out}")
    pad = k // 2
    H, W = xd.shape[1], xd.shape[2]
    xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.zeros((c_out, H, W, xd.shape[3]))
    for di in range(k):
        for dj in range(k):
            out += np.einsum("oc,chwd->ohwd", w.data[:, :, di, dj], xp[:, di:di + H, dj:dj + W, :])
    out += b.data[:, None, None, None]
    w_data = w.data

    def backward(g):
        g4 = g[..., None] if squeeze else g
        db = g4.sum(axis=(1, 2, 3))
        dw = np.zeros_like(w_data)
        dxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                patch = xp[:, di:di + H, dj:dj + W, :]
                dw[:, :, di, dj] = np.einsum("ohwd,chwd->oc", g4, patch)
                dxp[:, di:di + H, dj:dj + W, :] += np.einsum("oc,ohwd->chwd", w_data[:, :, di, dj], g4)
        dx = dxp[:, pad:pad + H, pad:pad + W, :]
        if squeeze:
            dx = dx[..., 0]
        return dx, dw, db

    return _register("conv2d", (x, w, b), out[..., 0] if squeeze else out, backward)
