"""Dense tensors with a reverse-mode differentiation record.

Every array flowing through the perception networks is a :class:`Tensor`.
Operations build a graph of parent links; :func:`backward` linearises that
graph into a :class:`Tape` (topological order) and replays it in reverse.

Only the primitives the networks use are provided.  Broadcasting is limited
to what numpy does for elementwise ``+``, ``-`` and ``*``.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic protocol -------------------------------------------------
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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index: int):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as a graph node when any parent needs a gradient."""
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# Tape and reverse pass
# ---------------------------------------------------------------------------


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[int, ...]
    output: int


@dataclass
class Tape:
    """Topologically ordered record of the primitive applications behind a tensor.

    Every input id precedes its consumer.  ``nodes`` holds the tensors so the
    tape can be replayed; ``entries`` is the plain record.
    """

    nodes: list[Tensor] = field(default_factory=list)
    entries: list[TapeEntry] = field(default_factory=list)

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        entries = [
            TapeEntry(n.op, tuple(id(p) for p in n._parents), id(n)) for n in order if n._backward is not None
        ]
        return cls(order, entries)

    def __len__(self) -> int:
        return len(self.entries)


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Leaf gradients accumulate across calls; call ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape.record(loss)
    if not loss.requires_grad:
        return tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape


# ---------------------------------------------------------------------------
# Elementwise and structural primitives
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(a.data + b.data, (a, b), bw, "add")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), bw, "mul")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is 0."""
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def take(x: Tensor, index: int) -> Tensor:
    """Select one slice along the leading axis."""
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[index] = g
        return (out,)

    return _node(x.data[index], (x,), bw, "take")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("stack needs at least one tensor")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack needs equal shapes, got {sorted(shapes)}")

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _node(data, tensors, bw, "concat")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack two ``[..., C, H, W]`` maps along the channel axis."""
    if a.shape[-2:] != b.shape[-2:] or a.shape[:-3] != b.shape[:-3]:
        raise ShapeError(f"spatial shapes differ: {a.shape} vs {b.shape}")
    return concat([a, b], axis=-3)


def _ordered_sum(x: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    """Sum after sorting along ``axis`` so the result ignores operand order bit-for-bit."""
    if x.shape[axis] <= 2:
        return x.sum(axis=axis, keepdims=keepdims)
    return np.sort(x, axis=axis).sum(axis=axis, keepdims=keepdims)


def sum_over(inputs: Sequence[Tensor]) -> Tensor:
    """Elementwise sum of equally shaped tensors, independent of their order."""
    st = stack(list(inputs), axis=0)
    n = st.shape[0]
    return _node(_ordered_sum(st.data, 0), (st,), lambda g: (np.broadcast_to(g, (n,) + g.shape).copy(),), "sum_over")


def softmax(x: Tensor, axis: int) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / _ordered_sum(e, axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (x,), bw, "softmax")


def softmax_over_axis(inputs: Sequence[Tensor]) -> list[Tensor]:
    """Normalise M equally shaped tensors against each other at every coordinate."""
    if len(inputs) == 0:
        raise ValueError("softmax_over_axis needs at least one input")
    s = softmax(stack(list(inputs), axis=0), axis=0)
    return [take(s, i) for i in range(len(inputs))]


def max_over(inputs: Sequence[Tensor]) -> Tensor:
    """Elementwise maximum across equally shaped tensors (ties go to the first)."""
    st = stack(list(inputs), axis=0)
    idx = st.data.argmax(axis=0)
    out = np.take_along_axis(st.data, idx[None], axis=0)[0]

    def bw(g):
        full = np.zeros(st.shape, dtype=g.dtype)
        np.put_along_axis(full, idx[None], g[None], axis=0)
        return (full,)

    return _node(out, (st,), bw, "max")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour doubling of the two trailing spatial axes."""
    shape = x.shape
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def bw(g):
        h, w = shape[-2], shape[-1]
        return (g.reshape(*shape[:-2], h, 2, w, 2).sum(axis=(-3, -1)),)

    return _node(out, (x,), bw, "upsample2x")


def linear_resample(x: Tensor, matrix) -> Tensor:
    """Apply a fixed (sparse) linear map to the flattened spatial cells.

    ``matrix`` has shape (H*W, H*W): row = output cell, column = source cell.
    """
    shape = x.shape
    hw = shape[-2] * shape[-1]
    flat = x.data.reshape(-1, hw)
    out = np.asarray((matrix @ flat.T).T).reshape(shape)
    mt = matrix.T.tocsr()

    def bw(g):
        gf = g.reshape(-1, hw)
        return (np.asarray((mt @ gf.T).T).reshape(shape),)

    return _node(out, (x,), bw, "resample")


def float32_roundtrip(x: Tensor) -> Tensor:
    """Round values to float32 (the wire precision); gradient passes straight through."""
    return _node(x.data.astype(np.float32).astype(x.data.dtype), (x,), lambda g: (g,), "f32")


# ---------------------------------------------------------------------------
# Convolution and normalisation
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (N, C, Ho, Wo, k, k) -> (N, C*k*k, Ho*Wo)
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation of ``[N,]C_in,H,W`` input with a ``C_out,C_in,k,k`` kernel."""
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d expects a 3D or 4D input, got {x.shape}")
    cout, cin, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {kernel.shape}")
    if xd.shape[1] != cin:
        raise ShapeError(f"kernel expects {cin} input channels, input has {xd.shape[1]}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    n, _, h, w = xd.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    w2 = kernel.data.reshape(cout, -1)

    if k == 1 and padding == 0 and stride == 1:
        cols = xd.reshape(n, cin, h * w)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        cols = _im2col(xp, k, stride, ho, wo)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, cout, ho, wo)
    if squeeze:
        out = out[0]

    def bw(g):
        g = g.reshape(n, cout, ho * wo)
        gk = gb = gx = None
        if kernel.requires_grad:
            gk = np.einsum("nop,nqp->oq", g, cols, optimize=True).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g)
            if k == 1 and padding == 0 and stride == 1:
                gx = dcols.reshape(n, cin, h, w)
            else:
                dcols = dcols.reshape(n, cin, k, k, ho, wo)
                dxp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
                gx = dxp[:, :, padding : padding + h, padding : padding + w]
            if squeeze:
                gx = gx[0]
        return (gx, gk, gb) if bias is not None else (gx, gk)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return _node(out, parents, bw, "conv2d")


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: RunningStats | None = None,
    training: bool = True,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation of ``[N,]C,H,W`` input.

    Training mode normalises with the batch statistics (over N, H, W) and
    updates ``running`` in place; eval mode uses ``running``.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    c = xd.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm over {c} channels got gamma {gamma.shape}, beta {beta.shape}")
    bshape = (1, c, 1, 1)
    if training:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        if running is not None:
            m = xd.size // c
            unbiased = var * m / max(m - 1, 1)
            running.mean *= 1 - running.momentum
            running.mean += running.momentum * mu
            running.var *= 1 - running.momentum
            running.var += running.momentum * unbiased
    else:
        if running is None:
            raise ValueError("eval-mode batchnorm needs running statistics")
        mu, var = running.mean, running.var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    if squeeze:
        out = out[0]

    def bw(g):
        g4 = g[None] if squeeze else g
        ggamma = (g4 * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g4.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g4 * gamma.data.reshape(bshape)
            if training:
                m = xd.size // c
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = inv_std.reshape(bshape) * (dxhat - s1 / m - xhat * s2 / m)
            else:
                gx = dxhat * inv_std.reshape(bshape)
            if squeeze:
                gx = gx[0]
        return gx, ggamma, gbeta

    return _node(out, (x, gamma, beta), bw, "batchnorm2d")


# ---------------------------------------------------------------------------
# Fused losses
# ---------------------------------------------------------------------------


def bce_with_logits(logits: Tensor, targets: np.ndarray, pos_weight: float = 1.0) -> Tensor:
    """Mean binary cross-entropy over all elements, computed from logits."""
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    # log(1 + exp(-|z|)) form keeps both branches finite
    log_sig = -np.logaddexp(0.0, -z)
    log_one_minus = -np.logaddexp(0.0, z)
    per = -(pos_weight * y * log_sig + (1.0 - y) * log_one_minus)
    n = z.size
    sig = 1.0 / (1.0 + np.exp(-z))

    def bw(g):
        d = pos_weight * y * (sig - 1.0) + (1.0 - y) * sig
        return (g * d / n,)

    return _node(np.asarray(per.sum() / n), (logits,), bw, "bce")


def smooth_l1(pred: Tensor, target: np.ndarray, weight: np.ndarray, beta: float = 1.0) -> Tensor:
    """Weighted sum of smooth-L1 residuals; zero weight masks an element out."""
    wgt = np.broadcast_to(np.asarray(weight, dtype=pred.data.dtype), pred.shape)
    r = pred.data - target
    a = np.abs(r)
    per = np.where(a < beta, 0.5 * r * r / beta, a - 0.5 * beta)

    def bw(g):
        return (g * wgt * np.where(a < beta, r / beta, np.sign(r)),)

    return _node(np.asarray((wgt * per).sum()), (pred,), bw, "smooth_l1")


def _log_softmax(z: np.ndarray, axis: int) -> np.ndarray:
    zmax = z.max(axis=axis, keepdims=True)
    return z - zmax - np.log(np.exp(z - zmax).sum(axis=axis, keepdims=True))


def kl_cells(student: Tensor, teacher: np.ndarray, axis: int = -3, reduce: str = "sum") -> Tensor:
    """Sum (or mean) over cells of KL(softmax(student) || softmax(teacher)) along ``axis``."""
    log_p = _log_softmax(student.data, axis)
    log_q = _log_softmax(np.asarray(teacher, dtype=student.data.dtype), axis)
    p = np.exp(log_p)
    per_cell = (p * (log_p - log_q)).sum(axis=axis, keepdims=True)
    per_cell = np.maximum(per_cell, 0.0)
    ncells = per_cell.size
    scale = 1.0 if reduce == "sum" else 1.0 / ncells
    value = per_cell.sum() * scale

    def bw(g):
        return (g * scale * p * ((log_p - log_q) - per_cell),)

    return _node(np.asarray(value), (student,), bw, "kl_cells")


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]


def straight_through(x: Tensor, data: np.ndarray) -> Tensor:
    """Replace the values of ``x`` by ``data`` (same shape); gradient passes unchanged."""
    arr = np.asarray(data, dtype=x.data.dtype).reshape(x.shape)
    return _node(arr, (x,), lambda g: (g,), "straight_through")
