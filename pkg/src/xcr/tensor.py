"""Dense-tensor primitives with reverse-mode differentiation.

Tensors are plain ``numpy`` arrays (float64 by default, float32 as a speed
option). Differentiation is tape-based: ops applied to :class:`Node` handles
append a record to their :class:`Tape`, and :func:`backward` walks the records
in reverse, accumulating gradients over fan-out.

The same op functions work in two modes:

* pure: ndarray inputs, ndarray output, nothing recorded;
* taped: at least one :class:`Node` input, output is a new :class:`Node`
  (ndarray inputs are lifted to constants on the same tape).

Supported broadcasting is deliberately narrow: a scalar against anything, a
vector against the last axis (bias), and a size-1 channel axis against a 4-d
batch of images (weight maps).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractViolationError, DomainError

PRIMITIVES = (
    "add",
    "sub",
    "mul",
    "matmul",
    "conv2d",
    "relu",
    "avgpool2d",
    "reshape",
    "exp",
    "log",
    "maximum",
    "reduce_sum",
    "reduce_mean",
    "log_softmax",
    "upsample",
)


@dataclass(frozen=True)
class TapeRecord:
    """One recorded primitive application."""

    op: str
    input_ids: tuple[int, ...]
    output_id: int
    saved: dict


class Tape:
    """Single-writer record of primitive ops; one training step owns one tape."""

    def __init__(self):
        self.records: list[TapeRecord] = []
        self.values: list[np.ndarray] = []

    def __len__(self):
        return len(self.values)

    def _new_node(self, value: np.ndarray) -> "Node":
        self.values.append(value)
        return Node(self, len(self.values) - 1)

    def watch(self, value) -> "Node":
        """Register an input (leaf) tensor and return its node handle."""
        return self._new_node(np.asarray(value))

    def value(self, nid: int) -> np.ndarray:
        return self.values[nid]

    def replay(self) -> list[np.ndarray]:
        """Recompute every recorded value from the leaves; values are not mutated."""
        out = [v for v in self.values]
        for rec in self.records:
            inputs = [out[i] for i in rec.input_ids]
            result, _ = _FORWARD[rec.op](inputs, rec.saved.get("attrs", {}))
            out[rec.output_id] = result
        return out


@dataclass(frozen=True)
class Node:
    """Handle to one tensor on a tape."""

    tape: Tape
    nid: int

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.nid]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


def _broadcast_ok(sa: tuple, sb: tuple) -> bool:
    if sa == sb:
        return True
    for small, big in ((sa, sb), (sb, sa)):
        if np.prod(small, dtype=int) == 1:  # scalar against anything
            return True
        if len(small) == 1 and len(big) >= 1 and big[-1] == small[0]:  # bias over last axis
            return True
        # weight map [B,1,H,W] against images [B,C,H,W]
        if (
            len(small) == 4
            and len(big) == 4
            and small[1] == 1
            and small[0] == big[0]
            and small[2:] == big[2:]
        ):
            return True
    return False


def _reduce_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _check_elementwise(op: str, a: np.ndarray, b: np.ndarray):
    if not _broadcast_ok(a.shape, b.shape):
        raise ContractViolationError(f"{op}: incompatible shapes {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# forward rules: (input values, attrs) -> (output value, saved dict)

def _fw_add(vals, attrs):
    a, b = vals
    _check_elementwise("add", a, b)
    return a + b, {}


def _fw_sub(vals, attrs):
    a, b = vals
    _check_elementwise("sub", a, b)
    return a - b, {}


def _fw_mul(vals, attrs):
    a, b = vals
    _check_elementwise("mul", a, b)
    return a * b, {"a": a, "b": b}


def _fw_matmul(vals, attrs):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolationError(f"matmul: incompatible shapes {a.shape} vs {b.shape}")
    return a @ b, {"a": a, "b": b}


def _im2col3x3(x: np.ndarray) -> np.ndarray:
    """[B,C,H,W] -> [B, C*9, H*W] patches of the zero-padded input."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((b, c, 9, h, w), dtype=x.dtype)
    k = 0
    for di in range(3):
        for dj in range(3):
            cols[:, :, k] = xp[:, :, di : di + h, dj : dj + w]
            k += 1
    return cols.reshape(b, c * 9, h * w)


def _col2im3x3(cols: np.ndarray, shape: tuple) -> np.ndarray:
    """Adjoint of :func:`_im2col3x3`: scatter-add columns back to image layout."""
    b, c, h, w = shape
    cols = cols.reshape(b, c, 9, h, w)
    xp = np.zeros((b, c, h + 2, w + 2), dtype=cols.dtype)
    k = 0
    for di in range(3):
        for dj in range(3):
            xp[:, :, di : di + h, dj : dj + w] += cols[:, :, k]
            k += 1
    return xp[:, :, 1 : 1 + h, 1 : 1 + w]


def _fw_conv2d(vals, attrs):
    x, w = vals[0], vals[1]
    bias = vals[2] if len(vals) == 3 else None
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[1]:
        raise ContractViolationError(f"conv2d: incompatible shapes {x.shape} vs {w.shape}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise ContractViolationError(f"conv2d: bias shape {bias.shape} vs filters {w.shape[0]}")
    b, c, h, width = x.shape
    f = w.shape[0]
    cols = _im2col3x3(x)  # [B, C*9, H*W]
    wmat = w.reshape(f, c * 9)
    out = np.matmul(wmat, cols)  # [B, F, H*W]
    if bias is not None:
        out = out + bias[None, :, None]
    return out.reshape(b, f, h, width), {"cols": cols, "w": w, "xshape": x.shape}


def _fw_relu(vals, attrs):
    (x,) = vals
    return np.maximum(x, 0.0), {"mask": x > 0}


def _fw_avgpool2d(vals, attrs):
    (x,) = vals
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ContractViolationError(f"avgpool2d: shape {x.shape} not 4-d with even H,W")
    b, c, h, w = x.shape
    out = x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    return out, {"xshape": x.shape}


def _fw_reshape(vals, attrs):
    (x,) = vals
    shape = tuple(attrs["shape"])
    if np.prod(shape, dtype=int) != x.size:
        raise ContractViolationError(f"reshape: cannot view {x.shape} as {shape}")
    return x.reshape(shape), {"xshape": x.shape}


def _fw_exp(vals, attrs):
    (x,) = vals
    out = np.exp(x)
    return out, {"out": out}


def _fw_log(vals, attrs):
    (x,) = vals
    if np.any(x <= 0):
        raise DomainError("log: non-positive input")
    return np.log(x), {"x": x}


def _fw_maximum(vals, attrs):
    a, b = vals
    _check_elementwise("maximum", a, b)
    return np.maximum(a, b), {"a": a, "b": b}


def _fw_reduce_sum(vals, attrs):
    (x,) = vals
    axis = attrs.get("axis")
    return x.sum(axis=axis), {"xshape": x.shape}


def _fw_reduce_mean(vals, attrs):
    (x,) = vals
    axis = attrs.get("axis")
    return x.mean(axis=axis), {"xshape": x.shape}


def _fw_log_softmax(vals, attrs):
    (x,) = vals
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return out, {"out": out}


def _fw_upsample(vals, attrs):
    (x,) = vals
    f = int(attrs["factor"])
    if f < 1 or x.ndim < 2:
        raise ContractViolationError(f"upsample: factor {f} on shape {x.shape}")
    out = np.repeat(np.repeat(x, f, axis=-2), f, axis=-1)
    return out, {"factor": f}


_FORWARD: dict[str, Callable] = {
    "add": _fw_add,
    "sub": _fw_sub,
    "mul": _fw_mul,
    "matmul": _fw_matmul,
    "conv2d": _fw_conv2d,
    "relu": _fw_relu,
    "avgpool2d": _fw_avgpool2d,
    "reshape": _fw_reshape,
    "exp": _fw_exp,
    "log": _fw_log,
    "maximum": _fw_maximum,
    "reduce_sum": _fw_reduce_sum,
    "reduce_mean": _fw_reduce_mean,
    "log_softmax": _fw_log_softmax,
    "upsample": _fw_upsample,
}


# ---------------------------------------------------------------------------
# backward rules: (grad_out, input values, saved, attrs) -> per-input gradients

def _bw_add(g, vals, saved, attrs):
    a, b = vals
    return _reduce_to_shape(g, a.shape), _reduce_to_shape(g, b.shape)


def _bw_sub(g, vals, saved, attrs):
    a, b = vals
    return _reduce_to_shape(g, a.shape), _reduce_to_shape(-g, b.shape)


def _bw_mul(g, vals, saved, attrs):
    a, b = saved["a"], saved["b"]
    return _reduce_to_shape(g * b, a.shape), _reduce_to_shape(g * a, b.shape)


def _bw_matmul(g, vals, saved, attrs):
    a, b = saved["a"], saved["b"]
    return g @ b.T, a.T @ g


def _bw_conv2d(g, vals, saved, attrs):
    cols, w, xshape = saved["cols"], saved["w"], saved["xshape"]
    b, c, h, width = xshape
    f = w.shape[0]
    gmat = g.reshape(b, f, h * width)
    wmat = w.reshape(f, c * 9)
    gcols = np.matmul(wmat.T, gmat)  # [B, C*9, H*W]
    gx = _col2im3x3(gcols, xshape)
    gw = np.tensordot(gmat, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
    if len(vals) == 3:
        return gx, gw, g.sum(axis=(0, 2, 3))
    return gx, gw


def _bw_relu(g, vals, saved, attrs):
    return (g * saved["mask"],)


def _bw_avgpool2d(g, vals, saved, attrs):
    b, c, h, w = saved["xshape"]
    gx = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25
    return (gx,)


def _bw_reshape(g, vals, saved, attrs):
    return (g.reshape(saved["xshape"]),)


def _bw_exp(g, vals, saved, attrs):
    return (g * saved["out"],)


def _bw_log(g, vals, saved, attrs):
    return (g / saved["x"],)


def _bw_maximum(g, vals, saved, attrs):
    a, b = saved["a"], saved["b"]
    ga = g * (a >= b)  # ties route to the first operand
    gb = g * (a < b)
    return _reduce_to_shape(ga, a.shape), _reduce_to_shape(gb, b.shape)


def _expand_reduced(g, xshape, axis):
    if axis is None:
        return np.broadcast_to(np.asarray(g), xshape).copy()
    g = np.expand_dims(g, axis)
    return np.broadcast_to(g, xshape).copy()


def _bw_reduce_sum(g, vals, saved, attrs):
    return (_expand_reduced(g, saved["xshape"], attrs.get("axis")),)


def _bw_reduce_mean(g, vals, saved, attrs):
    xshape = saved["xshape"]
    axis = attrs.get("axis")
    n = np.prod(xshape, dtype=int) if axis is None else xshape[axis]
    return (_expand_reduced(g, xshape, axis) / n,)


def _bw_log_softmax(g, vals, saved, attrs):
    out = saved["out"]
    return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


def _bw_upsample(g, vals, saved, attrs):
    f = saved["factor"]
    lead = g.shape[:-2]
    h, w = g.shape[-2] // f, g.shape[-1] // f
    return (g.reshape(*lead, h, f, w, f).sum(axis=(-3, -1)),)


_BACKWARD: dict[str, Callable] = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "matmul": _bw_matmul,
    "conv2d": _bw_conv2d,
    "relu": _bw_relu,
    "avgpool2d": _bw_avgpool2d,
    "reshape": _bw_reshape,
    "exp": _bw_exp,
    "log": _bw_log,
    "maximum": _bw_maximum,
    "reduce_sum": _bw_reduce_sum,
    "reduce_mean": _bw_reduce_mean,
    "log_softmax": _bw_log_softmax,
    "upsample": _bw_upsample,
}


# ---------------------------------------------------------------------------
# dispatch

def forward_eval(op: str, inputs, tape: Tape | None = None, **attrs):
    """Apply one primitive.

    With ``tape=None`` all inputs must be ndarrays and the result is an
    ndarray. With a tape, inputs may mix :class:`Node` and ndarray (lifted to
    constants); the application is recorded and a :class:`Node` is returned.
    """
    if op not in _FORWARD:
        raise ContractViolationError(f"unknown primitive {op!r}")
    if tape is None:
        tape = next((x.tape for x in inputs if isinstance(x, Node)), None)
    if tape is None:
        vals = [np.asarray(x) for x in inputs]
        out, _ = _FORWARD[op](vals, attrs)
        return out
    nodes = [x if isinstance(x, Node) else tape.watch(x) for x in inputs]
    vals = [n.value for n in nodes]
    out, saved = _FORWARD[op](vals, attrs)
    out_node = tape._new_node(out)
    saved["attrs"] = attrs
    tape.records.append(
        TapeRecord(op, tuple(n.nid for n in nodes), out_node.nid, saved)
    )
    return out_node


def backward(tape: Tape, loss) -> dict[int, np.ndarray]:
    """Gradients of a scalar loss node with respect to every recorded node."""
    loss_id = loss.nid if isinstance(loss, Node) else int(loss)
    loss_val = tape.values[loss_id]
    if np.asarray(loss_val).size != 1:
        raise ContractViolationError(f"backward: loss must be scalar, got shape {np.shape(loss_val)}")
    grads: dict[int, np.ndarray] = {loss_id: np.ones_like(np.asarray(loss_val, dtype=np.float64))}
    for rec in reversed(tape.records):
        g = grads.get(rec.output_id)
        if g is None:
            continue
        vals = [tape.values[i] for i in rec.input_ids]
        input_grads = _BACKWARD[rec.op](g, vals, rec.saved, rec.saved.get("attrs", {}))
        for nid, gi in zip(rec.input_ids, input_grads):
            if nid in grads:
                grads[nid] = grads[nid] + gi
            else:
                grads[nid] = gi
    for nid in range(len(tape.values)):
        if nid not in grads:
            grads[nid] = np.zeros_like(tape.values[nid])
    return grads


# ---------------------------------------------------------------------------
# op helpers (dual mode: pure on ndarrays, recorded on Nodes)

def add(a, b):
    return forward_eval("add", [a, b])


def sub(a, b):
    return forward_eval("sub", [a, b])


def mul(a, b):
    return forward_eval("mul", [a, b])


def matmul(a, b):
    return forward_eval("matmul", [a, b])


def conv2d(x, w, bias=None):
    inputs = [x, w] if bias is None else [x, w, bias]
    return forward_eval("conv2d", inputs)


def relu(x):
    return forward_eval("relu", [x])


def avgpool2d(x):
    return forward_eval("avgpool2d", [x])


def reshape(x, shape):
    return forward_eval("reshape", [x], shape=tuple(shape))


def exp(x):
    return forward_eval("exp", [x])


def log(x):
    return forward_eval("log", [x])


def maximum(a, b):
    return forward_eval("maximum", [a, b])


def reduce_sum(x, axis=None):
    return forward_eval("reduce_sum", [x], axis=axis)


def reduce_mean(x, axis=None):
    return forward_eval("reduce_mean", [x], axis=axis)


def log_softmax(x):
    return forward_eval("log_softmax", [x])


def upsample(x, factor: int):
    return forward_eval("upsample", [x], factor=int(factor))


def softmax(x):
    """Stable softmax over the last axis (composite of exp and log_softmax)."""
    return exp(log_softmax(x))


def grad_check(f, point, step: float = 1e-6) -> float:
    """Compare the tape gradient of ``f`` at ``point`` with central differences.

    ``f`` maps one tensor to a scalar and must be written against the dual-mode
    ops above, so it can run both taped (for the analytic gradient) and pure
    (for the numeric one). Returns ``max_i |analytic_i - numeric_i| /
    max(1, |numeric_i|)``.
    """
    point = np.asarray(point, dtype=np.float64)
    tape = Tape()
    x = tape.watch(point.copy())
    out = f(x)
    analytic = backward(tape, out)[x.nid]

    numeric = np.empty_like(point)
    flat = point.ravel()
    num_flat = numeric.ravel()
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = step
        hi = float(np.asarray(f((flat + bump).reshape(point.shape))))
        lo = float(np.asarray(f((flat - bump).reshape(point.shape))))
        num_flat[i] = (hi - lo) / (2.0 * step)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
