"""
Dense tensors with a reverse-mode gradient tape.

Only the op set the classifier, the patch renderer and the penalty need is
provided. Every op checks operand shapes, refuses to emit NaN/Inf and, when
any operand lives on a tape, records a backward rule on that tape.

    tape = Tape(Precision.VERIFY)
    x = tape.leaf(values)
    loss = sum_all(mul(x, x))
    tape.backward(loss)        # x.grad == 2 * values
"""

import enum
import itertools
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import LabelError, NumericError, ShapeError, TapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Sequence, float, int]
BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Precision(enum.Enum):
    """32-bit for attacks and training, 64-bit for gradient verification."""

    COMPUTE = "float32"
    VERIFY = "float64"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.value)


def _float_array(data: ArrayLike, dtype=None) -> np.ndarray:
    if dtype is None:
        dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else np.float32
    arr = np.array(data, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


class Tensor:
    """Immutable n-dimensional array, optionally tracked by a Tape."""

    __slots__ = ("data", "requires_grad", "grad", "tape", "node_id")

    def __init__(self, data: ArrayLike, dtype=None, *, requires_grad: bool = False,
                 _tape: Optional["Tape"] = None, _node_id: Optional[int] = None):
        self.data = _float_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape = _tape
        self.node_id = _node_id

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


@dataclass(frozen=True)
class _Record:
    op: str
    inputs: Tuple[Optional[int], ...]
    output: int
    backward: BackwardRule


class Tape:
    """Ordered record of ops; single owner, one backward pass per recording."""

    def __init__(self, precision: Precision = Precision.COMPUTE):
        self.precision = precision
        self._records: list = []
        self._leaves: dict = {}
        self._ids = itertools.count()
        self._consumed = False

    def __len__(self) -> int:
        return len(self._records)

    @property
    def ops(self) -> Tuple[str, ...]:
        return tuple(r.op for r in self._records)

    def leaf(self, data: ArrayLike, requires_grad: bool = True) -> Tensor:
        if not requires_grad:
            return self.constant(data)
        self._check_open()
        node = next(self._ids)
        t = Tensor(data, self.precision.dtype, requires_grad=True, _tape=self, _node_id=node)
        self._leaves[node] = t
        return t

    def constant(self, data: ArrayLike) -> Tensor:
        return Tensor(data, self.precision.dtype)

    def record(self, op: str, inputs: Sequence[Tensor], out: np.ndarray,
               backward: BackwardRule) -> Tensor:
        self._check_open()
        node = next(self._ids)
        ids = tuple(t.node_id if t.tape is self else None for t in inputs)
        self._records.append(_Record(op, ids, node, backward))
        return Tensor(out, out.dtype, requires_grad=True, _tape=self, _node_id=node)

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every leaf with dLoss/dLeaf."""
        if loss.tape is not self:
            raise TapeError("backward: loss was not recorded on this tape")
        if loss.ndim != 0:
            raise TapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
        if self._consumed:
            raise TapeError("backward: this tape was already differentiated; call reset() first")
        self._consumed = True

        grads = {loss.node_id: np.ones_like(loss.data)}
        for rec in reversed(self._records):
            g = grads.pop(rec.output, None)
            if g is None:
                continue
            for node, ig in zip(rec.inputs, rec.backward(g)):
                if node is None or ig is None:
                    continue
                grads[node] = grads[node] + ig if node in grads else ig

        for node, leaf in self._leaves.items():
            g = grads.get(node)
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=leaf.dtype)

    def reset(self) -> None:
        """Forget every record and leaf so the tape can be reused."""
        self._records.clear()
        self._leaves.clear()
        self._consumed = False

    def _check_open(self) -> None:
        if self._consumed:
            raise TapeError("tape already differentiated; call reset() before recording")


def _shared_tape(op: str, inputs: Sequence[Tensor]) -> Optional[Tape]:
    tapes = {id(t.tape): t.tape for t in inputs if t.tape is not None}
    if len(tapes) > 1:
        raise TapeError(f"{op}: operands are recorded on different tapes")
    return next(iter(tapes.values()), None)


def apply(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward: BackwardRule) -> Tensor:
    """Wrap a forward result, recording ``backward`` when any input is tracked.

    ``backward`` receives dLoss/dOut and returns one gradient (or None) per input.
    """
    out = np.asarray(out)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op}: produced NaN or Inf")
    tape = _shared_tape(op, inputs)
    if tape is None:
        return Tensor(out, out.dtype)
    return tape.record(op, inputs, out, backward)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


# -- elementwise suite -----------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return apply("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return apply("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    x, y = a.data, b.data
    return apply("mul", (a, b), x * y, lambda g: (g * y, g * x))


def scale(a: Tensor, factor: float) -> Tensor:
    f = a.dtype.type(factor)
    return apply("scale", (a,), a.data * f, lambda g: (g * f,))


def relu(a: Tensor) -> Tensor:
    x = a.data
    return apply("relu", (a,), np.maximum(x, 0), lambda g: (g * (x > 0),))


def clamp01(a: Tensor) -> Tensor:
    # zero subgradient on and outside the boundary
    x = a.data
    inside = (x > 0) & (x < 1)
    return apply("clamp01", (a,), np.clip(x, 0, 1), lambda g: (g * inside,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return apply("sum", (a,), a.data.sum(), lambda g: (np.broadcast_to(g, shape),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return apply("reshape", (a,), out, lambda g: (g.reshape(src),))


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shaped tensors along a new leading axis."""
    if not tensors:
        raise ShapeError("stack: no tensors given")
    for t in tensors[1:]:
        _same_shape("stack", tensors[0], t)
    out = np.stack([t.data for t in tensors])
    return apply("stack", tuple(tensors), out, lambda g: tuple(g[i] for i in range(len(tensors))))


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x[..., c] + bias[c]."""
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_channel_bias: bias {bias.shape} does not match channels of {x.shape}")
    axes = tuple(range(x.ndim - 1))
    return apply("add_channel_bias", (x, bias), x.data + bias.data,
                 lambda g: (g, g.sum(axis=axes)))


# -- layers ----------------------------------------------------------------

def _conv_padding(h: int, w: int, kh: int, kw: int, stride: int, padding: str):
    if padding == "valid":
        return (0, 0), (0, 0)
    if padding != "same":
        raise ShapeError(f"conv2d: unknown padding {padding!r} (expected 'same' or 'valid')")
    pads = []
    for size, k in ((h, kh), (w, kw)):
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        pads.append((total // 2, total - total // 2))
    return pads[0], pads[1]


def conv2d(input: Tensor, kernel: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation of [H,W,Cin] (or [N,H,W,Cin]) with [kh,kw,Cin,Cout]."""
    x = input.data
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d: input must be [H,W,C] or [N,H,W,C], got {x.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be [kh,kw,Cin,Cout], got {kernel.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be positive, got {stride}")
    batched = x.ndim == 4
    xb = x if batched else x[None]
    _, h, w, cin = xb.shape
    kh, kw, kc, _ = kernel.shape
    if kc != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but kernel expects {kc}")

    (pt, pb), (pl, pr) = _conv_padding(h, w, kh, kw, stride, padding)
    if kh > h + pt + pb or kw > w + pl + pr:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds padded input {h + pt + pb}x{w + pl + pr}")
    xp = np.pad(xb, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    k = kernel.data
    out = np.tensordot(windows, k, axes=([3, 4, 5], [2, 0, 1]))
    ho, wo = out.shape[1:3]

    def backward(g):
        gb = g if batched else g[None]
        dk = np.tensordot(windows, gb, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
        dxp = np.zeros_like(xp)
        for a in range(kh):
            for b in range(kw):
                dxp[:, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride] += gb @ k[a, b].T
        dx = dxp[:, pt:pt + h, pl:pl + w]
        return (dx if batched else dx[0]), dk

    return apply("conv2d", (input, kernel), out if batched else out[0], backward)


def maxpool2(input: Tensor) -> Tensor:
    """2x2 non-overlapping max; ties go to the first window position (row-major)."""
    x = input.data
    if x.ndim not in (3, 4):
        raise ShapeError(f"maxpool2: input must be [H,W,C] or [N,H,W,C], got {x.shape}")
    batched = x.ndim == 4
    xb = x if batched else x[None]
    n, h, w, c = xb.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial extents must be even, got {h}x{w}")
    blocks = xb.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def backward(g):
        gb = g if batched else g[None]
        gblocks = np.zeros(blocks.shape, dtype=gb.dtype)
        np.put_along_axis(gblocks, idx, gb[..., None], axis=-1)
        dx = gblocks.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        return (dx if batched else dx[0],)

    return apply("maxpool2", (input,), out if batched else out[0], backward)


def dense(input: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """input @ weights + bias for [n] or [B,n] inputs."""
    x, wt, b = input.data, weights.data, bias.data
    if x.ndim not in (1, 2) or wt.ndim != 2 or b.ndim != 1:
        raise ShapeError(f"dense: bad ranks input={x.shape} weights={wt.shape} bias={b.shape}")
    if x.shape[-1] != wt.shape[0] or wt.shape[1] != b.shape[0]:
        raise ShapeError(f"dense: input {x.shape} / weights {wt.shape} / bias {b.shape} do not agree")

    def backward(g):
        dw = np.outer(x, g) if x.ndim == 1 else x.T @ g
        db = g if g.ndim == 1 else g.sum(axis=0)
        return g @ wt.T, dw, db

    return apply("dense", (input, weights, bias), x @ wt + b, backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax over the last axis (plain arrays, no tape)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, label) -> Tensor:
    """-log softmax(logits)[label]; mean over the batch for [B,k] logits."""
    z = logits.data
    if z.ndim not in (1, 2):
        raise ShapeError(f"softmax_cross_entropy: logits must be [k] or [B,k], got {z.shape}")
    batched = z.ndim == 2
    zb = z if batched else z[None]
    labels = np.atleast_1d(np.asarray(label)).astype(np.int64)
    count, k = zb.shape
    if labels.shape != (count,):
        raise ShapeError(f"softmax_cross_entropy: {labels.size} labels for {count} rows")
    bad = labels[(labels < 0) | (labels >= k)]
    if bad.size:
        raise LabelError(f"softmax_cross_entropy: label {int(bad[0])} out of range for {k} classes")

    shifted = zb - zb.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(count)
    loss = np.asarray(-log_probs[rows, labels].mean(), dtype=z.dtype)
    probs = np.exp(log_probs)

    def backward(g):
        d = probs.copy()
        d[rows, labels] -= 1
        d *= g / count
        return (d if batched else d[0],)

    return apply("softmax_cross_entropy", (logits,), loss, backward)


# -- indexing (patch rendering and compositing) ----------------------------

def gather_grid(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """out[i, j] = x[rows[i], cols[j]]; repeated indices accumulate gradient."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if x.ndim < 2:
        raise ShapeError(f"gather_grid: need at least 2 dims, got {x.shape}")
    if rows.size and (rows.min() < 0 or rows.max() >= x.shape[0]):
        raise ShapeError(f"gather_grid: row index outside 0..{x.shape[0] - 1}")
    if cols.size and (cols.min() < 0 or cols.max() >= x.shape[1]):
        raise ShapeError(f"gather_grid: column index outside 0..{x.shape[1] - 1}")
    src = x.shape
    index = (rows[:, None], cols[None, :])

    def backward(g):
        full = np.zeros(src, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return apply("gather_grid", (x,), x.data[index], backward)


def crop(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """x[top:bottom, left:right]."""
    if not (0 <= top < bottom <= x.shape[0] and 0 <= left < right <= x.shape[1]):
        raise ShapeError(f"crop: window [{top}:{bottom}, {left}:{right}] outside {x.shape[:2]}")
    src = x.shape

    def backward(g):
        full = np.zeros(src, dtype=g.dtype)
        full[top:bottom, left:right] = g
        return (full,)

    return apply("crop", (x,), x.data[top:bottom, left:right], backward)


def paste(base: Tensor, window: Tensor, top: int, left: int) -> Tensor:
    """Replace base[top:top+h, left:left+w] with window (opaque, no blending)."""
    h, w = window.shape[:2]
    if base.shape[2:] != window.shape[2:]:
        raise ShapeError(f"paste: trailing dims {base.shape[2:]} and {window.shape[2:]} differ")
    if not (0 <= top and top + h <= base.shape[0] and 0 <= left and left + w <= base.shape[1]):
        raise ShapeError(f"paste: {h}x{w} window at ({top},{left}) leaves base {base.shape[:2]}")
    out = np.array(base.data)
    out[top:top + h, left:left + w] = window.data

    def backward(g):
        gb = np.array(g)
        gb[top:top + h, left:left + w] = 0
        return gb, g[top:top + h, left:left + w]

    return apply("paste", (base, window), out, backward)


# -- verification harness --------------------------------------------------

@dataclass(frozen=True)
class GradientCheck:
    max_rel_error: float
    worst_index: Tuple[int, ...]
    analytic: np.ndarray
    numeric: np.ndarray


def finite_diff_check(f: Callable[[Tensor], Tensor], at: ArrayLike, step: float = 1e-5,
                      floor: float = 1e-5) -> GradientCheck:
    """Compare the tape gradient of scalar ``f`` with central differences in 64-bit.

    Per-coordinate error is |a - n| / max(|a|, |n|, floor); the worst one is reported.
    """
    point = np.array(at.data if isinstance(at, Tensor) else at, dtype=np.float64)
    tape = Tape(Precision.VERIFY)
    x = tape.leaf(point)
    tape.backward(f(x))
    analytic = x.grad

    numeric = np.empty_like(point)
    shifted = point.copy()
    for idx in np.ndindex(point.shape):
        original = shifted[idx]
        shifted[idx] = original + step
        up = f(Tensor(shifted, np.float64)).item()
        shifted[idx] = original - step
        down = f(Tensor(shifted, np.float64)).item()
        shifted[idx] = original
        numeric[idx] = (up - down) / (2 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    errors = np.abs(analytic - numeric) / denom
    worst = np.unravel_index(int(np.argmax(errors)), errors.shape) if errors.size else ()
    report = GradientCheck(float(errors.max(initial=0.0)), tuple(int(i) for i in worst), analytic, numeric)
    logger.debug("finite_diff_check: max relative error %.3e at %s", report.max_rel_error, report.worst_index)
    return report
