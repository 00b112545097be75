"""Reverse-mode automatic differentiation over dense float64 arrays.

Operations record themselves on the active :class:`Tape` when any input
requires a gradient. Each record holds the outputs, the inputs and a backward
rule mapping output gradients to input gradients. ``Tape.backward`` walks the
records in reverse, so every node is visited once, and writes gradients into
the leaves.

Multi-output records are allowed, which is how the fused layer kernels in
:mod:`icegraph.layers` hook in with hand-written backward passes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

__all__ = [
    "Tensor", "Tape", "ShapeError", "SegmentIndex", "ParameterSet", "Adam", "adam_step", "AdamState",
    "matmul", "rowwise_matmul", "add", "sub", "mul", "scale", "concat", "leaky_relu", "exp", "tanh", "softmax_segmented",
    "sum_segmented", "gather_rows", "scatter_add_rows", "mse_loss", "sum_all", "conv2d", "reshape",
    "split_columns", "glorot_uniform", "save_checkpoint", "load_checkpoint", "numerical_gradient",
    "gradient_check", "leaky_relu_grad", "leaky_relu_value", "leaky_relu_backward", "emit_multi",
]

LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    pass


class Tensor:
    """A float64 array with an optional gradient accumulator."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- tape ---------------------------------------------------------------------

@dataclass
class _Record:
    outputs: tuple[Tensor, ...]
    inputs: tuple[Tensor, ...]
    backward: Callable


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered operation log. Use as a context manager to make it active.

    With ``check_finite`` every recorded output is checked for NaN/Inf as soon
    as it is produced, which pins down the op that first went non-finite.
    """

    def __init__(self, check_finite: bool = False):
        self.records: list[_Record] = []
        self.check_finite = check_finite
        self._produced: set[int] = set()
        self._used = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def record(self, outputs: tuple[Tensor, ...], inputs: tuple[Tensor, ...], backward: Callable, op: str) -> None:
        if self._used:
            raise RuntimeError("tape already consumed by backward(); call reset() before recording")
        if self.check_finite:
            for o in outputs:
                if not np.all(np.isfinite(o.value)):
                    raise FloatingPointError(f"{op} produced non-finite values")
        for o in outputs:
            self._produced.add(id(o))
        self.records.append(_Record(outputs, inputs, backward))

    def reset(self) -> None:
        self.records.clear()
        self._produced.clear()
        self._used = False

    def backward(self, loss: Tensor) -> None:
        """Accumulate d loss / d leaf into ``leaf.grad`` for every leaf requiring a gradient."""
        if self._used:
            raise RuntimeError("backward() already ran on this tape; call reset() first")
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise ValueError("loss was not produced on this tape")
        self._used = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            gouts = tuple(grads.pop(id(o), None) for o in rec.outputs)
            if all(g is None for g in gouts):
                continue
            gins = rec.backward(gouts if len(gouts) > 1 else gouts[0])
            if len(rec.inputs) == 1:
                gins = (gins,)
            for t, g in zip(rec.inputs, gins):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if key not in self._produced:
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads[key]
            if t.grad is None:
                t.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                t.grad += g


def _active_tape(inputs: Iterable[Tensor]) -> Tape | None:
    if not _ACTIVE:
        return None
    return _ACTIVE[-1] if any(t.requires_grad for t in inputs) else None


def _emit(value: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    tape = _active_tape(inputs)
    out = Tensor(value, requires_grad=tape is not None)
    if tape is not None:
        tape.record((out,), inputs, backward, op)
    return out


def emit_multi(values: Sequence[np.ndarray], inputs: tuple[Tensor, ...], backward: Callable, op: str) -> tuple[Tensor, ...]:
    """Record an op with several outputs; ``backward`` gets a tuple of output gradients (``None`` where unused)."""
    tape = _active_tape(inputs)
    outs = tuple(Tensor(v, requires_grad=tape is not None) for v in values)
    if tape is not None:
        tape.record(outs, inputs, backward, op)
    return outs


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible") from None


# -- elementary ops -----------------------------------------------------------

NARROW_COLUMNS = 8


def rowwise_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` in which row ``i`` of the result depends on ``a[i]`` alone.

    BLAS rounds narrow products (gemv, few-column gemm) differently for rows that
    land in a kernel's tail block, so relabelling graph nodes would change outputs
    in the last bit. einsum's plain loop reduces every row the same way.
    """
    if b.ndim == 2 and b.shape[1] <= NARROW_COLUMNS:
        return np.einsum("nk,kf->nf", a, b)
    return a @ b


def matmul(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not compatible")
    av, bv = a.value, b.value

    def back(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)
    return _emit(rowwise_matmul(av, bv), (a, b), back, "matmul")


def add(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    _broadcast_shape("add", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _emit(a.value + b.value, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    _broadcast_shape("sub", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)
    return _emit(a.value - b.value, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value

    def back(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)
    return _emit(av * bv, (a, b), back, "mul")


def scale(a, c: float) -> Tensor:
    a = _tensor(a)
    return _emit(a.value * c, (a,), lambda g: g * c, "scale")


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _tensor(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _emit(out, (a,), lambda g: g.reshape(a.shape), "reshape")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in ts]} do not line up on axis {axis}") from None
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))
    return _emit(out, ts, back, "concat")


def split_columns(a, widths: Sequence[int]) -> tuple[Tensor, ...]:
    a = _tensor(a)
    if sum(widths) != a.shape[-1]:
        raise ShapeError(f"split_columns: widths {list(widths)} do not sum to {a.shape[-1]}")
    cuts = np.cumsum(widths)[:-1]
    parts = np.split(a.value, cuts, axis=-1)

    def back(gs):
        gs = gs if isinstance(gs, tuple) else (gs,)
        return np.concatenate([np.zeros_like(p) if g is None else g for g, p in zip(gs, parts)], axis=-1)
    return emit_multi(parts, (a,), back, "split_columns")


def leaky_relu_grad(z: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    # mask arithmetic is several times faster than np.where with scalar branches
    d = (z > 0).astype(np.float64)
    d *= 1.0 - slope
    d += slope
    return d


def leaky_relu_backward(g: np.ndarray, z: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    d = leaky_relu_grad(z, slope)
    d *= g
    return d


def leaky_relu_value(z: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    if not 0.0 <= slope <= 1.0:
        return np.where(z > 0, z, slope * z)
    out = np.multiply(z, slope)
    return np.maximum(z, out, out=out)


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = _tensor(a)
    z = a.value
    return _emit(leaky_relu_value(z, slope), (a,), lambda g: leaky_relu_backward(g, z, slope), "leaky_relu")


def exp(a) -> Tensor:
    a = _tensor(a)
    out = np.exp(a.value)
    return _emit(out, (a,), lambda g: g * out, "exp")


def tanh(a) -> Tensor:
    a = _tensor(a)
    out = np.tanh(a.value)
    return _emit(out, (a,), lambda g: g * (1.0 - out * out), "tanh")


def sum_all(a) -> Tensor:
    a = _tensor(a)
    return _emit(np.array(a.value.sum()), (a,), lambda g: np.full(a.shape, float(g)), "sum_all")


def mse_loss(pred, target) -> Tensor:
    pred, target = _tensor(pred), _tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shapes {pred.shape} and {target.shape} differ")
    diff = pred.value - target.value
    n = diff.size

    def back(g):
        gp = (2.0 * float(g) / n) * diff
        return gp, -gp
    return _emit(np.array(np.mean(diff * diff)), (pred, target), back, "mse_loss")


# -- segment and gather/scatter ops -------------------------------------------

@dataclass(frozen=True, eq=False)
class SegmentIndex:
    """Assignment of rows to segments (for example, edges to destination nodes)."""

    ids: np.ndarray
    num_segments: int

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        if ids.ndim != 1 or (ids.size and (ids.min() < 0 or ids.max() >= self.num_segments)):
            raise ShapeError(f"segment ids must be 1-D in [0, {self.num_segments})")
        object.__setattr__(self, "ids", ids)

    @cached_property
    def matrix(self) -> sparse.csr_matrix:
        """``num_segments x len(ids)`` 0/1 matrix; ``matrix @ values`` sums each segment."""
        n = len(self.ids)
        return sparse.csr_matrix((np.ones(n), (self.ids, np.arange(n))), shape=(self.num_segments, n))

    @cached_property
    def counts(self) -> np.ndarray:
        return np.bincount(self.ids, minlength=self.num_segments)

    def sum(self, values: np.ndarray) -> np.ndarray:
        flat = values.reshape(len(values), -1)
        return np.asarray(self.matrix @ flat).reshape((self.num_segments,) + values.shape[1:])

    def max(self, values: np.ndarray) -> np.ndarray:
        out = np.full((self.num_segments,) + values.shape[1:], -np.inf)
        np.maximum.at(out, self.ids, values)
        return out


def _check_rows(op: str, a: Tensor, seg: SegmentIndex) -> None:
    if a.value.ndim < 1 or a.shape[0] != len(seg.ids):
        raise ShapeError(f"{op}: values of shape {a.shape} do not match {len(seg.ids)} segment ids")


def sum_segmented(a, seg: SegmentIndex) -> Tensor:
    a = _tensor(a)
    _check_rows("sum_segmented", a, seg)
    return _emit(seg.sum(a.value), (a,), lambda g: g[seg.ids], "sum_segmented")


def softmax_segmented(a, seg: SegmentIndex) -> Tensor:
    """Softmax of the rows of ``a`` within each segment, column by column."""
    a = _tensor(a)
    _check_rows("softmax_segmented", a, seg)
    z = a.value - seg.max(a.value)[seg.ids]
    ez = np.exp(z)
    out = ez / seg.sum(ez)[seg.ids]

    def back(g):
        return out * (g - seg.sum(out * g)[seg.ids])
    return _emit(out, (a,), back, "softmax_segmented")


def gather_rows(a, index: np.ndarray) -> Tensor:
    a = _tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < -a.shape[0] or index.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for shape {a.shape}")
    seg = SegmentIndex(index % max(a.shape[0], 1), a.shape[0])
    return _emit(a.value[index], (a,), lambda g: seg.sum(g), "gather_rows")


def scatter_add_rows(a, index: np.ndarray, num_rows: int) -> Tensor:
    a = _tensor(a)
    seg = SegmentIndex(index, num_rows)
    _check_rows("scatter_add_rows", a, seg)
    return _emit(seg.sum(a.value), (a,), lambda g: g[seg.ids], "scatter_add_rows")


# -- convolution --------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(C, H, W) -> (H*W, C*k*k) patches with zero 'same' padding, stride 1."""
    c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))  # C, H, W, k, k
    return win.transpose(1, 2, 0, 3, 4).reshape(h * w, c * k * k)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int], k: int) -> np.ndarray:
    c, h, w = shape
    p = k // 2
    out = np.zeros((c, h + 2 * p, w + 2 * p))
    cols = cols.reshape(h, w, c, k, k)
    for di in range(k):
        for dj in range(k):
            out[:, di:di + h, dj:dj + w] += cols[:, :, :, di, dj].transpose(2, 0, 1)
    return out[:, p:p + h, p:p + w]


def conv2d(x, weight, bias=None) -> Tensor:
    """Stride-1 'same' convolution of one (C_in, H, W) image with a (C_out, C_in, k, k) kernel."""
    x, weight = _tensor(x), _tensor(weight)
    if x.value.ndim != 3 or weight.value.ndim != 4 or weight.shape[1] != x.shape[0] \
            or weight.shape[2] != weight.shape[3] or weight.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {weight.shape} are not compatible")
    cout, _, k, _ = weight.shape
    _, h, w = x.shape
    cols = _im2col(x.value, k)
    wmat = weight.value.reshape(cout, -1)
    out = cols @ wmat.T  # (H*W, C_out)
    inputs: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = _tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias {bias.shape} does not match {cout} output channels")
        out = out + bias.value
        inputs = inputs + (bias,)

    def back(g):
        gm = g.reshape(cout, h * w).T
        gx = _col2im(gm @ wmat, x.shape, k) if x.requires_grad else None
        gw = (gm.T @ cols).reshape(weight.shape)
        res = (gx, gw)
        return res + (gm.sum(axis=0),) if bias is not None else res
    return _emit(out.T.reshape(cout, h, w), inputs, back, "conv2d")


# -- parameters and optimisation ----------------------------------------------

def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int | None = None,
                   fan_out: int | None = None) -> np.ndarray:
    """Uniform Glorot draw; fans default to the first and last axes (times receptive field for 4-D kernels)."""
    if fan_in is None or fan_out is None:
        if len(shape) == 4:
            rf = shape[2] * shape[3]
            fan_in, fan_out = shape[1] * rf, shape[0] * rf
        else:
            fan_in, fan_out = shape[0], shape[-1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class ParameterSet:
    """Named parameter tensors viewing one contiguous buffer, so optimiser updates are single array ops.

    Gradients likewise live in one flat buffer: each tensor's ``grad`` is a
    view into :attr:`flat_grad` and backward passes accumulate into it.
    """

    def __init__(self, arrays: dict[str, np.ndarray]):
        self.names = list(arrays)
        self.shapes = {k: np.shape(v) for k, v in arrays.items()}
        sizes = [int(np.prod(s)) for s in self.shapes.values()]
        self.offsets = dict(zip(self.names, np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(int)))
        self.flat = np.concatenate([np.ravel(arrays[k]).astype(np.float64) for k in self.names]) \
            if self.names else np.zeros(0)
        self.flat_grad = np.zeros_like(self.flat)
        self.tensors = {k: Tensor(self._view(self.flat, k), requires_grad=True, name=k) for k in self.names}
        self.zero_grad()

    def _view(self, buf: np.ndarray, name: str) -> np.ndarray:
        o = self.offsets[name]
        return buf[o:o + int(np.prod(self.shapes[name]))].reshape(self.shapes[name])

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __len__(self) -> int:
        return len(self.names)

    @property
    def size(self) -> int:
        return self.flat.size

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: self.tensors[k].value.copy() for k in self.names}

    def zero_grad(self) -> None:
        self.flat_grad.fill(0.0)
        for k, t in self.tensors.items():
            t.grad = self._view(self.flat_grad, k)

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.names) ^ set(arrays)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for k in self.names:
            if np.shape(arrays[k]) != self.shapes[k]:
                raise ShapeError(f"parameter {k}: checkpoint shape {np.shape(arrays[k])} != {self.shapes[k]}")
            self.tensors[k].value[...] = arrays[k]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    scratch: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.scratch is None or self.scratch.shape != self.m.shape:
            self.scratch = np.empty_like(self.m)

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if params.shape != grads.shape or state.m.shape != params.shape or state.v.shape != params.shape:
        raise ShapeError(f"adam_step: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    tmp = state.scratch
    # m <- b1 m + (1 - b1) g ; v <- b2 v + (1 - b2) g^2
    np.multiply(grads, 1.0 - beta1, out=tmp)
    state.m *= beta1
    state.m += tmp
    np.multiply(grads, grads, out=tmp)
    tmp *= 1.0 - beta2
    state.v *= beta2
    state.v += tmp
    # p <- p - lr m_hat / (sqrt(v_hat) + eps)
    np.sqrt(state.v, out=tmp)
    tmp *= 1.0 / np.sqrt(c2)
    tmp += eps
    np.divide(state.m, tmp, out=tmp)
    tmp *= lr / c1
    params -= tmp


@dataclass
class Adam:
    params: ParameterSet
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.state = AdamState.zeros(self.params.size)

    def step(self) -> None:
        adam_step(self.params.flat, self.params.flat_grad, self.state, self.lr, self.beta1, self.beta2, self.eps)


# -- checkpoints --------------------------------------------------------------

_MAGIC = b"ICEGRAPH-PARAMS\x00"


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Named tensors: name, shape header, then row-major little-endian float64 values."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(arrays)))
        for name, a in arrays.items():
            a = np.asarray(a, dtype="<f8")  # tobytes() is row-major; ascontiguousarray would promote 0-d to 1-d
            key = name.encode("utf-8")
            f.write(struct.pack("<I", len(key)) + key)
            f.write(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
            f.write(a.tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path}: not a parameter checkpoint")
    pos = len(_MAGIC)

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise ValueError(f"{path}: truncated checkpoint")
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    (count,) = take("<I")
    arrays = {}
    for _ in range(count):
        (klen,) = take("<I")
        name = data[pos:pos + klen].decode("utf-8")
        pos += klen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(shape))
        if pos + 8 * n > len(data):
            raise ValueError(f"{path}: truncated checkpoint")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes after {count} tensors")
    return arrays


# -- gradient checking --------------------------------------------------------

def numerical_gradient(f: Callable[[], float], array: np.ndarray, h: float = 1e-5,
                       entries: np.ndarray | None = None) -> np.ndarray:
    """Central differences of ``f`` with respect to ``array`` (perturbed in place), optionally on a subset."""
    flat = array.reshape(-1)
    idx = np.arange(flat.size) if entries is None else entries
    out = np.zeros(len(idx))
    for n, k in enumerate(idx):
        old = flat[k]
        flat[k] = old + h
        fp = f()
        flat[k] = old - h
        fm = f()
        flat[k] = old
        out[n] = (fp - fm) / (2 * h)
    return out


def gradient_check(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5,
                   max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Largest relative error between tape gradients and central differences over ``tensors``.

    The error of one tensor is ``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-12)``.
    """
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        entries = None
        if max_entries is not None and t.value.size > max_entries:
            entries = (rng or np.random.default_rng(0)).choice(t.value.size, max_entries, replace=False)
        numeric = numerical_gradient(lambda: float(loss_fn().value), t.value, h, entries)
        a = analytic.reshape(-1) if entries is None else analytic.reshape(-1)[entries]
        scale_ = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
        worst = max(worst, float(np.abs(a - numeric).max(initial=0.0) / scale_))
    return worst
