"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded on the innermost active :class:`Tape` whenever one of
their inputs requires a gradient. Outside a tape, operations run as plain
numpy computations and nothing is recorded, which is what evaluation uses.

Broadcasting is deliberately narrow: :func:`linear` broadcasts its weights over
leading dimensions and :func:`expand` tiles explicitly. Every other shape
mismatch raises :class:`~sasrnet.errors.ShapeError`.
"""

from __future__ import annotations

import itertools
import os
import struct
import threading
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, CorruptionError, ShapeError

DEBUG = os.environ.get("SASR_DEBUG", "") not in ("", "0")

_tape_ids = itertools.count(1)
_local = threading.local()


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "tape_id", "name", "_tape")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape_id: int | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.shape)
        else:
            self.grad += g

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar for the common cases
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def parameter(values, name: str | None = None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def constant(values) -> Tensor:
    return Tensor(values)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside are appended in
    execution order, so the list is topologically sorted by construction.
    """

    def __init__(self):
        self.id = next(_tape_ids)
        self.nodes: list[_Node] = []
        self.consumed = False
        self._owner = threading.get_ident()

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        if threading.get_ident() != self._owner:
            raise ContractError("a tape may only be used by the thread that created it")
        if self.consumed:
            raise ContractError("tape already consumed by a backward pass")
        out.requires_grad = True
        out.tape_id = self.id
        out._tape = self
        self.nodes.append(_Node(out, tuple(inputs), backward))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")
        if self.consumed:
            raise ContractError("tape already consumed by a backward pass")
        self.consumed = True
        loss.grad = np.ones(loss.shape)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is not None and inp.requires_grad:
                    inp._accumulate(gi)


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every tensor on the loss's tape that needs it."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("loss is not attached to a live tape")
    loss._tape.backward(loss)


def _result(values: np.ndarray, inputs: Sequence[Tensor], bw: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.requires_grad = False
    out.tape_id = None
    out.name = None
    out._tape = None
    if DEBUG and not np.all(np.isfinite(values)):
        if all(np.all(np.isfinite(t.values)) for t in inputs):
            raise FloatingPointError("non-finite values produced from finite inputs")
    if any(t.requires_grad for t in inputs):
        tape = active_tape()
        if tape is not None:
            tape.record(out, inputs, bw)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


# --- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    if a.values.ndim < 2 or b.values.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.values, b.values
    out = av @ bv

    def bw(g):
        return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    return _result(out, (a, b), bw)


def transpose(x: Tensor) -> Tensor:
    if x.values.ndim < 2:
        raise ShapeError(f"transpose: need rank >= 2, got {x.shape}")
    return _result(np.swapaxes(x.values, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ W + b`` broadcast over the leading axes of ``x``."""
    if W.values.ndim != 2 or x.shape[-1:] != W.shape[:1] or (b is not None and b.shape != W.shape[1:]):
        bshape = None if b is None else b.shape
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {W.shape} / bias {bshape}")
    xv, Wv = x.values, W.values
    out = xv @ Wv
    if b is not None:
        out = out + b.values
    d_in, d_out = W.shape

    def bw(g):
        g2 = g.reshape(-1, d_out)
        gx = g @ Wv.T
        gW = xv.reshape(-1, d_in).T @ g2
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    inputs = (x, W) if b is None else (x, W, b)
    return _result(out, inputs, bw)


# --- elementwise ----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.values + b.values, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result(a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    av, bv = a.values, b.values
    return _result(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.values * c, (x,), lambda g: (g * c,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.values)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.values)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def select(mask, a: Tensor, b: Tensor) -> Tensor:
    """Pick ``a`` where ``mask`` is true and ``b`` elsewhere (mask is a constant)."""
    _same_shape("select", a, b)
    m = np.broadcast_to(np.asarray(mask, dtype=bool).reshape(np.shape(mask) + (1,) * (a.values.ndim - np.ndim(mask))), a.shape)
    out = np.where(m, a.values, b.values)
    return _result(out, (a, b), lambda g: (np.where(m, g, 0.0), np.where(m, 0.0, g)))


# --- shape manipulation ---------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no inputs")
    ndim = tensors[0].values.ndim
    ax = _axis(axis, ndim)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.values.ndim != ndim or t.shape[:ax] + t.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError(f"concat: shapes {ref} and {t.shape} disagree off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.values for t in tensors], axis=ax)
    return _result(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=ax)))


def concat_last_axis(a: Tensor, b: Tensor) -> Tensor:
    return concat([a, b], axis=-1)


def split(x: Tensor, index: int, axis: int = -1) -> tuple[Tensor, Tensor]:
    """Split ``x`` into ``x[..., :index]`` and ``x[..., index:]`` along ``axis``."""
    ax = _axis(axis, x.values.ndim)
    n = x.shape[ax]
    if not 0 <= index <= n:
        raise ShapeError(f"split: boundary {index} outside axis of length {n} in {x.shape}")
    return slice_axis(x, 0, index, ax), slice_axis(x, index, n, ax)


def split_last_axis(x: Tensor, index: int) -> tuple[Tensor, Tensor]:
    return split(x, index, axis=-1)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    ax = _axis(axis, x.values.ndim)
    idx = [slice(None)] * x.values.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _result(x.values[idx], (x,), bw)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; an integer index drops the axis."""
    ax = _axis(axis, x.values.ndim)
    ind = np.asarray(indices)
    if ind.dtype.kind not in "iu":
        raise ContractError(f"take: indices must be integers, got {ind.dtype}")
    if ind.size and (ind.min() < -x.shape[ax] or ind.max() >= x.shape[ax]):
        raise ShapeError(f"take: index out of range for axis of length {x.shape[ax]}")
    out = np.take(x.values, ind, axis=ax)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        if ind.ndim == 0:
            idx = [slice(None)] * len(shape)
            idx[ax] = int(ind)
            full[tuple(idx)] += g
        else:
            moved = np.moveaxis(full, ax, 0)
            gm = np.moveaxis(g, tuple(range(ax, ax + ind.ndim)), tuple(range(ind.ndim)))
            np.add.at(moved, ind, gm)
        return (full,)

    return _result(out, (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    old = x.shape
    return _result(out, (x,), lambda g: (g.reshape(old),))


def expand(x: Tensor, leading: Sequence[int]) -> Tensor:
    """Tile ``x`` over new leading axes: shape ``S`` becomes ``leading + S``."""
    leading = tuple(int(n) for n in leading)
    out = np.broadcast_to(x.values, leading + x.shape).copy()
    k = len(leading)
    return _result(out, (x,), lambda g: (g.sum(axis=tuple(range(k))) if k else g,))


def mean_axis(x: Tensor, axis: int) -> Tensor:
    ax = _axis(axis, x.values.ndim)
    n = x.shape[ax]
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax) / n, shape).copy(),)

    return _result(x.values.mean(axis=ax), (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.values.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


def weighted_sum(terms: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """``sum_i w_i * t_i`` over same-shape tensors, accumulated left to right."""
    if len(terms) != len(weights) or not terms:
        raise ContractError("weighted_sum: need matching non-empty terms and weights")
    for t in terms[1:]:
        _same_shape("weighted_sum", terms[0], t)
    ws = [float(w) for w in weights]
    out = terms[0].values * ws[0]
    for t, w in zip(terms[1:], ws[1:]):
        out = out + t.values * w
    return _result(out, tuple(terms), lambda g: tuple(g * w for w in ws))


# --- normalization and losses ---------------------------------------------


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    z = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), bw)


def softmax_rows(x: Tensor) -> Tensor:
    if x.values.ndim != 2:
        raise ShapeError(f"softmax_rows: expected a matrix, got {x.shape}")
    return softmax(x)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv
    n = x.shape[-1]

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _result(y, (x,), bw)


def _log_softmax(v: np.ndarray) -> np.ndarray:
    m = v.max(axis=-1, keepdims=True)
    return v - m - np.log(np.exp(v - m).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over all leading positions of ``-log softmax(logits)[target]``."""
    t = np.asarray(targets)
    if t.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {t.shape} do not match logits {logits.shape}")
    k = logits.shape[-1]
    if t.size and (t.min() < 0 or t.max() >= k):
        raise ContractError(f"cross_entropy: target outside [0, {k})")
    logp = _log_softmax(logits.values)
    picked = np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    n = max(t.size, 1)
    loss = -picked.sum() / n

    def bw(g):
        p = np.exp(logp)
        np.put_along_axis(p, t[..., None], np.take_along_axis(p, t[..., None], axis=-1) - 1.0, axis=-1)
        return (p * (float(g) / n),)

    return _result(np.asarray(loss), (logits,), bw)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 targets."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: targets {t.shape} do not match logits {logits.shape}")
    z = logits.values
    # log(1 + exp(-|z|)) form keeps large logits finite
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = max(t.size, 1)

    def bw(g):
        return ((_sigmoid(z) - t) * (float(g) / n),)

    return _result(np.asarray(per.sum() / n), (logits,), bw)


# --- verification ---------------------------------------------------------


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-5,
               samples: int = 100, seed: int = 0, names: Sequence[str] | None = None,
               report: dict | None = None, extended: bool = True) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f`` is called without arguments and must read ``params`` by reference.
    Coordinates are drawn uniformly (seeded) over all parameter entries; when
    ``samples`` covers every entry each one is checked exactly once.

    With ``extended`` the perturbed evaluations run in ``np.longdouble``. In
    float64 the rounding noise of a central difference is about
    ``eps * |f| / step``, roughly 1e-11 for an O(1) loss, which the 1e-8 floor
    of the error measure cannot absorb on coordinates whose true gradient is
    zero. The autodiff side always runs in float64.

    When ``report`` is given it receives the name and index of the worst entry.
    """
    if step <= 0:
        raise ContractError("grad_check: step must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    with Tape():
        loss = f()
        backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat = np.arange(total) if samples >= total else np.sort(rng.choice(total, size=samples, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    originals = [p.values for p in params]
    wide = np.longdouble if extended else np.float64
    worst = 0.0
    try:
        for p in params:
            p.values = p.values.astype(wide)
        for k in flat:
            which = int(np.searchsorted(offsets, k, side="right") - 1)
            idx = int(k - offsets[which])
            view = params[which].values.reshape(-1)
            orig = view[idx]
            view[idx] = orig + wide(step)
            up = f().values.reshape(-1)[0]
            view[idx] = orig - wide(step)
            down = f().values.reshape(-1)[0]
            view[idx] = orig
            g_fd = float((wide(up) - wide(down)) / (2 * wide(step)))
            g_ad = float(analytic[which].reshape(-1)[idx])
            err = abs(g_ad - g_fd) / max(1e-8, abs(g_ad) + abs(g_fd))
            if report is not None and (err > worst or "name" not in report):
                report.update(name=names[which] if names else str(which), index=idx,
                              autodiff=g_ad, numeric=g_fd, error=err)
            worst = max(worst, err)
    finally:
        for p, v in zip(params, originals):
            p.values = v
            p.grad = None
    return worst


# --- checkpoint records ---------------------------------------------------


def write_record(fh: BinaryIO, name: str, values: np.ndarray) -> None:
    """One tensor: u16 name length, UTF-8 name, u8 rank, u32 dims, f64 LE values."""
    raw = name.encode("utf-8")
    arr = np.asarray(values, dtype="<f8")
    if len(raw) > 0xFFFF or arr.ndim > 0xFF:
        raise ContractError(f"record {name!r} exceeds format limits")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def read_record(fh: BinaryIO) -> tuple[str, np.ndarray]:
    def need(n):
        buf = fh.read(n)
        if len(buf) != n:
            raise CorruptionError("truncated tensor record")
        return buf

    (nlen,) = struct.unpack("<H", need(2))
    name = need(nlen).decode("utf-8")
    (rank,) = struct.unpack("<B", need(1))
    dims = struct.unpack(f"<{rank}I", need(4 * rank))
    count = int(np.prod(dims)) if rank else 1
    values = np.frombuffer(need(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
    return name, values
