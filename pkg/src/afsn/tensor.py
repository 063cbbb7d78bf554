"""Dense float64 tensors with a tape-based reverse-mode differentiator.

Operations only record onto a :class:`Graph` while one is active::

    with Graph() as graph:
        loss = tsum(relu(conv2d(x, w, b)))
    graph.backward(loss)

Outside a graph every op is a plain numpy forward pass, which is what the
tracker uses at inference time.
"""

from __future__ import annotations

import contextvars
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Graph",
    "GraphError",
    "ShapeError",
    "conv2d",
    "xcorr_depthwise",
    "maxpool2d",
    "relu",
    "sigmoid",
    "add",
    "scale",
    "tsum",
    "backward",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GraphError(RuntimeError):
    pass


class Tensor:
    """Immutable float64 array plus a mutable gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        arr.setflags(write=False)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # Internal constructor: takes ownership of a freshly computed array.
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if not arr.flags.c_contiguous:  # ascontiguousarray would promote 0-d to 1-d
            arr = arr.copy(order="C")
        arr.setflags(write=False)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return NotImplemented
        return scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_ACTIVE: contextvars.ContextVar["Graph | None"] = contextvars.ContextVar("afsn_graph", default=None)


class Graph:
    """Operation tape. Nodes are appended in execution order, which is topological."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._consumed = False
        self._token = None

    def __enter__(self) -> "Graph":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def reset(self) -> None:
        self.nodes.clear()
        self._consumed = False

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``grad`` of every leaf that requires it."""
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise GraphError("backward already ran on this graph; call reset() first")
        self._consumed = True
        if not loss.requires_grad:
            return
        produced = {id(n.output) for n in self.nodes}
        if id(loss) not in produced:
            raise GraphError("loss was not produced by this graph")

        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if id(inp) in produced:
                    key = id(inp)
                    grads[key] = grads[key] + gi if key in grads else gi
                else:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
        # intermediates are released with the tape
        self.nodes.clear()


def backward(graph: Graph, loss: Tensor) -> None:
    graph.backward(loss)


def _emit(arr: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    graph = _ACTIVE.get()
    tracked = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, tracked)
    if tracked:
        graph.nodes.append(_Node(inputs, out, rule))
    return out


# ---------------------------------------------------------------- convolution


def _check_conv(x: Tensor, w: Tensor, b: Tensor | None, stride: int, groups: int) -> None:
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d input must be [C,H,W], got {x.shape}")
    if w.data.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d weights must be [C_out,C_in/groups,k,k], got {w.shape}")
    if stride < 1 or groups < 1:
        raise ShapeError(f"stride and groups must be positive (stride={stride}, groups={groups})")
    c_in, h, wd = x.shape
    c_out, c_per, k, _ = w.shape
    if c_in % groups or c_out % groups:
        raise ShapeError(f"groups={groups} must divide C_in={c_in} and C_out={c_out}")
    if c_per * groups != c_in:
        raise ShapeError(
            f"weights expect {c_per * groups} input channels ({c_per} x {groups} groups), input has {c_in}"
        )
    if h < k or wd < k:
        raise ShapeError(f"input {h}x{wd} smaller than kernel {k}x{k}")
    if b is not None and b.shape != (c_out,):
        raise ShapeError(f"bias must be [{c_out}], got {b.shape}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, groups: int = 1) -> Tensor:
    """Valid (unpadded) grouped 2-D cross-correlation.

    ``x`` is [C_in,H,W], ``w`` is [C_out,C_in/groups,k,k]; output is
    [C_out, (H-k)//stride+1, (W-k)//stride+1].
    """
    _check_conv(x, w, b, stride, groups)
    c_in, h, wd = x.shape
    c_out, c_per, k, _ = w.shape
    ho = (h - k) // stride + 1
    wo = (wd - k) // stride + 1
    o_per = c_out // groups
    kk = c_per * k * k

    win = sliding_window_view(x.data, (k, k), axis=(1, 2))[:, : (ho - 1) * stride + 1 : stride,
                                                           : (wo - 1) * stride + 1 : stride]
    # [g, Ho*Wo, c_per*k*k] im2col buffer, also kept for the weight gradient
    cols = win.reshape(groups, c_per, ho, wo, k, k).transpose(0, 2, 3, 1, 4, 5).reshape(groups, ho * wo, kk)
    wmat = w.data.reshape(groups, o_per, kk)
    out = np.matmul(cols, wmat.transpose(0, 2, 1))  # [g, HoWo, o_per]
    out = out.transpose(0, 2, 1).reshape(c_out, ho, wo)
    if b is not None:
        out = out + b.data[:, None, None]

    def rule(g: np.ndarray):
        gm = g.reshape(groups, o_per, ho * wo)
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.matmul(gm, cols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(1, 2))
        if x.requires_grad:
            dcols = np.matmul(gm.transpose(0, 2, 1), wmat)  # [g, HoWo, kk]
            dcols = dcols.reshape(groups, ho, wo, c_per, k, k).transpose(0, 3, 4, 5, 1, 2)
            dcols = dcols.reshape(c_in, k, k, ho, wo)
            gx = np.zeros(x.shape)
            span_h = (ho - 1) * stride + 1
            span_w = (wo - 1) * stride + 1
            for i in range(k):
                for j in range(k):
                    gx[:, i : i + span_h : stride, j : j + span_w : stride] += dcols[:, i, j]
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _emit(out, inputs, rule)


def xcorr_depthwise(instance: Tensor, exemplar: Tensor) -> Tensor:
    """Per-channel sliding dot product of ``exemplar`` over ``instance`` (no flip)."""
    if instance.data.ndim != 3 or exemplar.data.ndim != 3:
        raise ShapeError(f"xcorr needs [C,H,W] operands, got {instance.shape} and {exemplar.shape}")
    c, hx, wx = instance.shape
    cz, hz, wz = exemplar.shape
    if c != cz:
        raise ShapeError(f"channel mismatch: instance {c}, exemplar {cz}")
    if hz > hx or wz > wx:
        raise ShapeError(f"exemplar {hz}x{wz} larger than instance {hx}x{wx}")
    ho, wo = hx - hz + 1, wx - wz + 1
    win = sliding_window_view(instance.data, (hz, wz), axis=(1, 2))
    out = np.einsum("chwij,cij->chw", win, exemplar.data, optimize=True)

    def rule(g: np.ndarray):
        gx = gz = None
        if exemplar.requires_grad:
            gz = np.einsum("chwij,chw->cij", win, g, optimize=True)
        if instance.requires_grad:
            gx = np.zeros(instance.shape)
            for i in range(hz):
                for j in range(wz):
                    gx[:, i : i + ho, j : j + wo] += g * exemplar.data[:, i, j][:, None, None]
        return gx, gz

    return _emit(out, (instance, exemplar), rule)


def maxpool2d(x: Tensor, kernel: int, stride: int) -> Tensor:
    if x.data.ndim != 3:
        raise ShapeError(f"maxpool input must be [C,H,W], got {x.shape}")
    c, h, wd = x.shape
    if h < kernel or wd < kernel:
        raise ShapeError(f"input {h}x{wd} smaller than pool kernel {kernel}")
    ho = (h - kernel) // stride + 1
    wo = (wd - kernel) // stride + 1
    win = sliding_window_view(x.data, (kernel, kernel), axis=(1, 2))[:, : (ho - 1) * stride + 1 : stride,
                                                                     : (wo - 1) * stride + 1 : stride]
    flat = win.reshape(c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def rule(g: np.ndarray):
        gx = np.zeros(x.shape)
        span_h = (ho - 1) * stride + 1
        span_w = (wo - 1) * stride + 1
        for i in range(kernel):
            for j in range(kernel):
                hit = arg == i * kernel + j
                gx[:, i : i + span_h : stride, j : j + span_w : stride] += np.where(hit, g, 0.0)
        return (gx,)

    return _emit(out, (x,), rule)


# ----------------------------------------------------------------- pointwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)
    return _emit(out, (x,), lambda g: (np.where(mask, g, 0.0),))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit(out, (x,), lambda g: (g * out * (1.0 - out),))


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b = Tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def scale(a: Tensor, factor: float) -> Tensor:
    return _emit(a.data * factor, (a,), lambda g: (g * factor,))


def tsum(a: Tensor) -> Tensor:
    return _emit(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


# ---------------------------------------------------------------- grad check


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between backward gradients and central differences.

    ``fn`` takes the input tensors positionally and returns a scalar tensor.
    Inputs are treated as leaves; their ``grad`` slots are overwritten.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Graph() as graph:
        out = fn(*inputs)
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    graph.backward(out)
    worst = 0.0
    for pos, t in enumerate(inputs):
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        base = t.data.copy()
        for idx in np.ndindex(*t.shape):
            probe = base.copy()
            probe[idx] = base[idx] + eps
            plus = _eval_with(fn, inputs, pos, probe)
            probe[idx] = base[idx] - eps
            minus = _eval_with(fn, inputs, pos, probe)
            numeric = (plus - minus) / (2.0 * eps)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def _eval_with(fn, inputs: list[Tensor], pos: int, values: np.ndarray) -> float:
    args = [Tensor(t.data) for t in inputs]
    args[pos] = Tensor(values)
    return fn(*args).item()


# ---------------------------------------------------------------- checkpoint


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, tensors: dict[str, Tensor] | Iterable[tuple[str, Tensor]]) -> None:
    """Write named tensors as little-endian (name, rank, dims, float64 values) records."""
    items = tensors.items() if isinstance(tensors, dict) else tensors
    chunks = []
    for name, t in items:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", t.data.ndim))
        chunks.append(struct.pack(f"<{t.data.ndim}I", *t.shape))
        chunks.append(t.data.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, Tensor]:
    blob = Path(path).read_bytes()
    pos = 0
    out: dict[str, Tensor] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated record at byte {pos} (need {n}, have {len(blob) - pos})")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (n_name,) = struct.unpack("<I", take(4))
        try:
            name = take(n_name).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{path}: invalid tensor name at byte {pos - n_name}") from exc
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        values = np.frombuffer(take(8 * count), dtype="<f8").reshape(dims)
        if name in out:
            raise CheckpointError(f"{path}: duplicate tensor {name!r}")
        out[name] = Tensor(values, name=name)
    return out
