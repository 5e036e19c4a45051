"""Tape-based reverse-mode autodiff over numpy arrays.

Parameters and activations are float32 by default; tests may build float64
models for numerical headroom. Ops record onto the active ComputationTape in
execution order, which is already a valid topological order, so backward is a
single reversed sweep.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


_TAPE_STACK: list["ComputationTape"] = []


def active_tape() -> Optional["ComputationTape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        keep = isinstance(data, (np.ndarray, np.generic)) and \
            data.dtype in (np.float32, np.float64)
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not keep:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # operator sugar; scalars are coerced to this tensor's dtype
    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    def __radd__(self, other):
        return add(_coerce(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self.dtype))

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    def __rmul__(self, other):
        return mul(_coerce(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)


class _Node:
    __slots__ = ("out", "parents", "bwd")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...],
                 bwd: Callable[[np.ndarray], tuple]):
        self.out = out
        self.parents = parents
        self.bwd = bwd


class ComputationTape:
    """Ordered record of primitive ops for one forward pass.

    Use as a context manager around the forward; call backward(loss) once the
    scalar loss is built. Ops executed while no tape is active run untracked,
    which is the inference fast path.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "ComputationTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        if not _TAPE_STACK or _TAPE_STACK[-1] is not self:
            raise TapeError("tape stack corrupted: exiting a tape that is not active")
        _TAPE_STACK.pop()
        return False

    def record(self, node: _Node) -> None:
        self._nodes.append(node)

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate d(loss)/d(leaf) into .grad of requires_grad leaves.

        Returns {leaf tensor: gradient}. The tape is cleared afterwards, so a
        second forward on the same tape behaves like a fresh one.
        """
        if loss.data.size != 1:
            raise TapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        produced = {id(n.out) for n in self._nodes}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        result: dict[Tensor, np.ndarray] = {}
        for node in reversed(self._nodes):
            g_out = grads.pop(id(node.out), None)
            if g_out is None:
                continue  # not on any path to the loss
            parent_grads = node.bwd(g_out)
            for parent, g in zip(node.parents, parent_grads):
                if g is None:
                    continue
                if id(parent) in produced:
                    acc = grads.get(id(parent))
                    grads[id(parent)] = g if acc is None else acc + g
                elif parent.requires_grad:
                    if parent.grad is None:
                        parent.grad = np.zeros_like(parent.data)
                    parent.grad += g
                    prev = result.get(parent)
                    result[parent] = g if prev is None else prev + g
        self._nodes.clear()
        return result


def _coerce(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _record(data: np.ndarray, parents: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(_Node(out, parents, bwd))
    return out


def _check_same_dtype(*ts: Tensor) -> None:
    dtypes = {t.dtype for t in ts}
    if len(dtypes) > 1:
        raise ShapeError(f"mixed dtypes in op: {sorted(str(d) for d in dtypes)}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        return (-g,)

    return _record(-a.data, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy-style stacking over leading axes."""
    _check_same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _record(out, (a, b), bwd)


# ------------------------------------------------------------ shape plumbing

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return _record(out, (a,), bwd)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = a.data.transpose(axes)

    def bwd(g):
        return (g.transpose(inv),)

    return _record(out, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    _check_same_dtype(*tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), bwd)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _record(out, (a,), bwd)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).astype(a.dtype, copy=True),)
        g2 = g
        if not keepdims:
            g2 = np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.data.shape).astype(a.dtype, copy=True),)

    return _record(out, (a,), bwd)


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    s = sum_(a, axis=axis, keepdims=keepdims)
    return mul(s, Tensor(np.asarray(1.0 / n, dtype=a.dtype)))


# ------------------------------------------------------------- nonlinearity

def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def bwd(g):
        return (g * (a.data > 0),)

    return _record(out, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _record(out, (a,), bwd)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GeLU, built from primitives so backward comes free."""
    inner = mul(a, mul(a, a))
    inner = add(a, mul(inner, Tensor(np.asarray(0.044715, dtype=a.dtype))))
    t = tanh(mul(inner, Tensor(np.asarray(_GELU_C, dtype=a.dtype))))
    one = Tensor(np.asarray(1.0, dtype=a.dtype))
    half = Tensor(np.asarray(0.5, dtype=a.dtype))
    return mul(mul(a, add(t, one)), half)


def softmax_lastdim(a: Tensor) -> Tensor:
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _record(out, (a,), bwd)


def layernorm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis; gamma/beta have that axis's length."""
    _check_same_dtype(a, gamma, beta)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=a.dtype))
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def bwd(g):
        d = a.data.shape[-1]
        gg = g * gamma.data
        dx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        reduce_axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=reduce_axes)
        dbeta = g.sum(axis=reduce_axes)
        return dx.astype(a.dtype, copy=False), dgamma, dbeta

    return _record(out, (a, gamma, beta), bwd)


# ------------------------------------------------------------------ lookups

def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """out[..., :] = table[idx[...], :]; backward scatter-adds into the table."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for table with "
                         f"{table.data.shape[0]} rows")
    out = table.data[idx]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record(out, (table,), bwd)


def gather_cols(a: Tensor, idx: np.ndarray) -> Tensor:
    """For a of shape (N, M) and idx of shape (P, Q): out[n, p, q] = a[n, idx[p, q]].

    Used to express im2col-style patch extraction as a differentiable gather.
    """
    if a.ndim != 2:
        raise ShapeError(f"gather_cols expects a rank-2 input, got {a.shape}")
    idx = np.asarray(idx)
    out = a.data[:, idx]

    def bwd(g):
        ga = np.zeros_like(a.data)
        n = a.data.shape[0]
        np.add.at(ga, (np.arange(n)[:, None, None], idx[None]), g)
        return (ga,)

    return _record(out, (a,), bwd)


def dropout(a: Tensor, p: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout with a caller-owned RNG stream so masks are replayable."""
    if not train or p <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p).astype(a.dtype) / np.asarray(1.0 - p, dtype=a.dtype)
    out = a.data * keep

    def bwd(g):
        return (g * keep,)

    return _record(out, (a,), bwd)


# ------------------------------------------------------------------- losses

def cross_entropy_logits(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean cross-entropy over unmasked rows. logits (N, C), targets (N,) int."""
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=logits.dtype)
    denom = mask.sum()
    if denom == 0:
        raise ShapeError("cross_entropy_logits: every position is masked out")
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    se = e.sum(axis=-1, keepdims=True)
    lse = (m + np.log(se)).squeeze(-1)
    picked = z[np.arange(z.shape[0]), targets]
    out = np.asarray(((lse - picked) * mask).sum() / denom, dtype=logits.dtype)

    def bwd(g):
        p = e / se
        p[np.arange(z.shape[0]), targets] -= 1.0
        return (p * (mask / denom)[:, None] * g,)

    return _record(out, (logits,), bwd)


def mse_masked(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean squared error over unmasked (row, feature) entries.

    pred (N, D); target same shape; mask (N,) with 1 for rows that count.
    """
    target = np.asarray(target, dtype=pred.dtype)
    mask = np.asarray(mask, dtype=pred.dtype)
    denom = mask.sum() * pred.data.shape[-1]
    if denom == 0:
        raise ShapeError("mse_masked: every position is masked out")
    diff = pred.data - target
    out = np.asarray(((diff * diff) * mask[:, None]).sum() / denom, dtype=pred.dtype)

    def bwd(g):
        return (2.0 * diff * mask[:, None] / denom * g,)

    return _record(out, (pred,), bwd)


# ---------------------------------------------------------------- composite

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def conv2d_valid(x: Tensor, w: Tensor, b: Tensor, stride: int) -> Tensor:
    """Valid (unpadded) 2-D convolution via differentiable im2col.

    x (N, H, W, C), w (kh, kw, C, Cout), b (Cout,) -> (N, oh, ow, Cout).
    """
    n, h, wdt, c = x.shape
    kh, kw, cin, cout = w.shape
    if cin != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {cin}")
    oh = (h - kh) // stride + 1
    ow = (wdt - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} stride {stride} does not fit "
                         f"input {h}x{wdt}")
    # flat index of every (patch position, in-patch offset) pair
    ys = (np.arange(oh) * stride)[:, None] + np.arange(kh)[None, :]   # (oh, kh)
    xs = (np.arange(ow) * stride)[:, None] + np.arange(kw)[None, :]   # (ow, kw)
    flat = (ys[:, None, :, None] * wdt + xs[None, :, None, :])        # (oh, ow, kh, kw)
    flat = flat.reshape(oh * ow, kh * kw)[:, :, None] * c + np.arange(c)[None, None, :]
    flat = flat.reshape(oh * ow, kh * kw * c)
    cols = gather_cols(reshape(x, (n, h * wdt * c)), flat)            # (N, oh*ow, khkwc)
    out = linear(cols, reshape(w, (kh * kw * c, cout)), b)            # (N, oh*ow, Cout)
    return reshape(out, (n, oh, ow, cout))
