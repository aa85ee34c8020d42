"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every differentiable op appends a node to the :class:`Tape` shared by its
inputs. Leaves (parameters, inputs) carry no tape; ops on leaves join the
calling thread's active tape, opening a fresh one when the previous tape
has been consumed. A tape is consumed by a single call to :func:`backward`.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_state = threading.local()


class TapeError(RuntimeError):
    """Raised for misuse of the gradient tape."""


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@dataclass
class _Node:
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    nodes: list[_Node] = field(default_factory=list)
    consumed: bool = False
    owner: int = field(default_factory=threading.get_ident)

    def record(self, inputs, output, backward_fn) -> int:
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        if threading.get_ident() != self.owner:
            raise TapeError("a tape must be driven from the thread that created it")
        self.nodes.append(_Node(tuple(inputs), output, backward_fn))
        return len(self.nodes) - 1


def _active_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None or tape.consumed:
        tape = _state.tape = Tape()
    return tape


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, copy=True)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None
        self.node_id: int | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=DTYPE)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.tape = None
        t.node_id = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=DTYPE))


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _record(inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    out = Tensor._wrap(out_data)
    if not _grad_enabled():
        return out
    tracked = [t for t in inputs if t.requires_grad]
    if not tracked:
        return out
    tapes = {id(t.tape): t.tape for t in tracked if t.tape is not None}
    if len(tapes) > 1:
        raise TapeError("inputs belong to different tapes")
    tape = next(iter(tapes.values())) if tapes else _active_tape()
    out.requires_grad = True
    out.tape = tape
    out.node_id = tape.record(inputs, out, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor reachable from a scalar ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tensor requiring grad")
    tape = loss.tape
    if tape is None:
        loss.grad = np.ones_like(loss.data)
        return
    if tape.consumed:
        raise TapeError("backward() already ran on this tape")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes[: loss.node_id + 1]):
        g = node.output.grad
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = np.array(gi, dtype=DTYPE, copy=True)
            else:
                inp.grad += gi
        if node.output is not loss and node.output.tape is tape:
            node.output.grad = None
    # drop closures (and the saved activations they hold) now; the tape is single-use
    tape.nodes.clear()


# ---------------------------------------------------------------------------
# elementwise and reductions


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "add")
    return _record((a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "sub")
    return _record((a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record((a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record((x,), x.data * c, lambda g: (g * c,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record((x,), np.array(x.data.sum()), lambda g: (np.full(shape, g.item()),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _record((x,), np.array(x.data.mean()), lambda g: (np.full(shape, g.item() / n),))


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log; inputs below ``floor`` are clamped and pass no gradient."""
    xd = x.data
    clamped = np.maximum(xd, floor) if floor > 0 else xd
    live = xd > floor if floor > 0 else None

    def bw(g):
        gx = g / clamped
        if live is not None:
            gx = np.where(live, gx, 0.0)
        return (gx,)

    with np.errstate(divide="ignore"):
        return _record((x,), np.log(clamped), bw)


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=DTYPE)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = stable_sigmoid(x.data)
    return _record((x,), y, lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record((x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record((x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# spatial ops on NCHW tensors


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects NCHW tensors")
    for axis, label in ((0, "N"), (2, "H"), (3, "W")):
        if a.shape[axis] != b.shape[axis]:
            raise ShapeError(
                f"concat_channels: {label} mismatch {a.shape[axis]} vs {b.shape[axis]}"
            )
    ca = a.shape[1]
    return _record(
        (a, b),
        np.concatenate([a.data, b.data], axis=1),
        lambda g: (g[:, :ca], g[:, ca:]),
    )


def avgpool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2 needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _record((x,), out, bw)


def bilinear_matrix(n_in: int, factor: int) -> np.ndarray:
    """(n_in*factor, n_in) interpolation matrix, half-pixel centres, edge clamp."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def upsample_bilinear(x: Tensor, factor: int = 2) -> Tensor:
    if factor < 1:
        raise ValueError("factor must be a positive integer")
    _, _, h, w = x.shape
    ah, aw = bilinear_matrix(h, factor), bilinear_matrix(w, factor)
    out = ah @ x.data @ aw.T

    def bw(g):
        return (ah.T @ g @ aw,)

    return _record((x,), out, bw)


def conv_output_size(size: int, k: int, stride: int, padding: int, dim: str = "H") -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"conv2d: {dim}={size} with kernel {k}, stride {stride}, padding {padding} "
            "does not give an integer output size"
        )
    return span // stride + 1


def _check_conv(x: Tensor, w: Tensor, b: Tensor | None, stride: int, padding: int):
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be NCHW, got shape {x.shape}")
    if w.ndim != 4:
        raise ShapeError(f"conv2d: weight must be [Cout,Cin,kH,kW], got shape {w.shape}")
    cout, cin, kh, kw = w.shape
    if kh != kw:
        raise ShapeError(f"conv2d: kernel must be square, got kH={kh} kW={kw}")
    if x.shape[1] != cin:
        raise ShapeError(f"conv2d: Cin mismatch, input has {x.shape[1]}, weight expects {cin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias must have shape ({cout},), got {b.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    ho = conv_output_size(x.shape[2], kh, stride, padding, "H")
    wo = conv_output_size(x.shape[3], kw, stride, padding, "W")
    return ho, wo


def _pad(a: np.ndarray, p: int) -> np.ndarray:
    if not p:
        return a
    n, c, h, w = a.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p))
    out[:, :, p : p + h, p : p + w] = a
    return out


def conv2d_naive(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int, padding: int):
    """Direct-loop reference convolution (forward only)."""
    n, _, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    xp = _pad(x, padding)
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for r in range(ho):
                for c in range(wo):
                    win = xp[i, :, r * stride : r * stride + k, c * stride : c * stride + k]
                    out[i, o, r, c] = np.sum(win * w[o]) + (b[o] if b is not None else 0.0)
    return out


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cin = xp.shape[1]
    # (Cin*k*k, N*Ho*Wo); spatial axes innermost keeps the gather copy contiguous
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(cin * k * k, -1)


def _conv_forward(xp: np.ndarray, wmat: np.ndarray, k: int, stride: int, ho: int, wo: int):
    cols = _im2col(xp, k, stride, ho, wo)
    out = wmat @ cols
    return cols, out.reshape(-1, xp.shape[0], ho, wo).transpose(1, 0, 2, 3)


def _conv_input_grad(g: np.ndarray, w: np.ndarray, stride: int, padding: int, h: int, wd: int):
    """Gradient w.r.t. the conv input as a full convolution with the flipped kernel."""
    n, cout, ho, wo = g.shape
    k = w.shape[-1]
    if stride > 1:
        dil = np.zeros((n, cout, (ho - 1) * stride + 1, (wo - 1) * stride + 1))
        dil[:, :, ::stride, ::stride] = g
        g = dil
    p = k - 1 - padding
    if p >= 0:
        gp = _pad(g, p)
    else:
        gp = g[:, :, -p:p, -p:p]
    wflip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(w.shape[1], -1)
    _, gx = _conv_forward(gp, wflip, k, 1, h, wd)
    return gx


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    ho, wo = _check_conv(x, w, b, stride, padding)
    h, wd = x.shape[2:]
    cout, _, k, _ = w.shape
    wmat = w.data.reshape(cout, -1)
    cols, out = _conv_forward(_pad(x.data, padding), wmat, k, stride, ho, wo)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=1) if b is not None and b.requires_grad else None
        gx = _conv_input_grad(g, w.data, stride, padding, h, wd) if x.requires_grad else None
        return (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _record(inputs, out, bw)


# ---------------------------------------------------------------------------
# RoI sampling


def bilinear_weights(coords: np.ndarray, size: int):
    """Clamped linear-interpolation indices/weights along one axis."""
    c = np.clip(coords, 0.0, size - 1)
    lo = np.floor(c).astype(int)
    hi = np.minimum(lo + 1, size - 1)
    frac = c - lo
    return lo, hi, frac


def interpolation_matrix(coords: np.ndarray, size: int) -> np.ndarray:
    """(len(coords), size) linear-interpolation weights along one axis."""
    lo, hi, frac = bilinear_weights(coords, size)
    m = np.zeros((len(coords), size))
    rows = np.arange(len(coords))
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def roi_sample(
    levels: Sequence[Tensor],
    level_index: np.ndarray,
    batch_index: np.ndarray,
    ys: np.ndarray,
    xs: np.ndarray,
) -> Tensor:
    """Bilinearly sample ``R`` RoI grids from a list of NCHW feature maps.

    ``ys`` and ``xs`` are (R, S) coordinates in index space of the RoI's own
    level (cell ``j`` centred at ``j``; clamped at the borders). Output is
    (R, C, S, S). Sampling is separable: ``My @ F @ Mx^T`` per channel.
    """
    level_index = np.asarray(level_index, dtype=int)
    batch_index = np.asarray(batch_index, dtype=int)
    r, s = ys.shape
    c = levels[0].shape[1]
    if any(lv.shape[1] != c for lv in levels):
        raise ShapeError("roi_sample: all levels must share the channel count")
    out = np.empty((r, c, s, s))
    mats = []
    for i in range(r):
        lv = levels[level_index[i]].data
        h, w = lv.shape[2:]
        my, mx = interpolation_matrix(ys[i], h), interpolation_matrix(xs[i], w)
        mats.append((my, mx))
        out[i] = my @ lv[batch_index[i]] @ mx.T

    def bw(g):
        grads = [np.zeros(lv.shape) if lv.requires_grad else None for lv in levels]
        for i, (my, mx) in enumerate(mats):
            gl = grads[level_index[i]]
            if gl is not None:
                gl[batch_index[i]] += my.T @ g[i] @ mx
        return grads

    return _record(tuple(levels), out, bw)


# ---------------------------------------------------------------------------
# optimisation


class SGD:
    """Momentum SGD: ``v <- m*v + g``; ``p <- p - lr*v``; grads cleared after."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[int, np.ndarray] = {}

    def step(self, lr: float | None = None) -> None:
        sgd_step(self.params, self.lr if lr is None else lr, self.momentum, self.velocity)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale grads in place so their global L2 norm is at most ``max_norm``; return the norm."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm


def sgd_step(params: Sequence[Tensor], lr: float, momentum: float, state: dict | None = None) -> None:
    state = {} if state is None else state
    for p in params:
        if p.grad is None:
            continue
        v = state.get(id(p))
        v = p.grad.copy() if v is None else momentum * v + p.grad
        state[id(p)] = v
        new = p.data - lr * v
        new.setflags(write=False)
        p.data = new
        p.grad = None
