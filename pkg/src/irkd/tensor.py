"""Minimal dense tensor engine with reverse-mode differentiation.

Every op that touches a tensor with ``requires_grad`` appends a node to the
gradient graph. Nodes carry a monotonically increasing ``node_id``; backward
walks the reachable nodes once each, in reverse creation order.
"""

from __future__ import annotations

import contextlib
import itertools
import struct
import threading
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_node_counter = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Ops inside the block record no graph nodes (evaluation passes)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class GraphError(RuntimeError):
    """Raised on misuse of the gradient graph (detached roots, non-ancestors, ...)."""


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = next(_node_counter) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out.node_id = next(_node_counter)
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.node_id = None
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def backward(self) -> None:
        backward(self)

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype)
    return Tensor(arr)


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- graph traversal ----------------------------------------------------------


def _reachable(root: Tensor) -> list[Tensor]:
    """Graph nodes reachable from ``root``, sorted by reverse creation order."""
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(p for p in t._parents if p.requires_grad)
    nodes.sort(key=lambda t: t.node_id, reverse=True)
    return nodes


def _propagate(nodes: list[Tensor], root: Tensor, allowed: set[int] | None = None, stop: Tensor | None = None):
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaf_grads: list[tuple[Tensor, np.ndarray]] = []
    for t in nodes:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t is stop or t._backward is None:
            leaf_grads.append((t, g))
            continue
        parent_grads = t._backward(g)
        for p, pg in zip(t._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if allowed is not None and id(p) not in allowed:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaf_grads


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("backward called on a detached tensor (no graph history)")
    for leaf, g in _propagate(_reachable(loss), loss):
        g = g.astype(leaf.dtype, copy=False).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def grad_query(target: Tensor, wrt: Tensor) -> Tensor:
    """d(target)/d(wrt) as a detached tensor. No ``.grad`` buffer is touched."""
    if target.data.size != 1:
        raise GraphError(f"grad_query target must be scalar, got shape {target.shape}")
    if not target.requires_grad or not wrt.requires_grad:
        raise GraphError("grad_query needs both target and wrt to be part of a live graph")
    nodes = _reachable(target)
    # Keep only nodes lying on a path from wrt to target.
    depends: set[int] = {id(wrt)}
    for t in reversed(nodes):
        if t is wrt:
            continue
        if any(id(p) in depends for p in t._parents):
            depends.add(id(t))
    if id(target) not in depends or not any(t is wrt for t in nodes):
        raise GraphError("wrt is not an ancestor of target")
    nodes = [t for t in nodes if id(t) in depends]
    for t, g in _propagate(nodes, target, allowed=depends, stop=wrt):
        if t is wrt:
            return Tensor(np.array(g, dtype=wrt.dtype).reshape(wrt.shape))
    return Tensor(np.zeros_like(wrt.data))


# -- elementwise --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), bw, "mul")


def square(x: Tensor) -> Tensor:
    def bw(g):
        return (2 * g * x.data,)

    return Tensor._from_op(x.data * x.data, (x,), bw, "square")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return Tensor._from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), bw, "relu")


LOG_FLOOR = 1e-12


def log(x: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log with inputs clamped from below at ``floor``."""
    clipped = np.maximum(x.data, floor)
    live = x.data > floor

    def bw(g):
        return (np.where(live, g / clipped, 0).astype(g.dtype),)

    return Tensor._from_op(np.log(clipped), (x,), bw, "log")


# -- shape & reductions ---------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        return (g.reshape(x.shape),)

    return Tensor._from_op(x.data.reshape(shape), (x,), bw, "reshape")


def take(x: Tensor, index) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.array(x.data[index]), (x,), bw, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=x.dtype), (x,), bw, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.sum(axis=axes) / x.dtype.type(count)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g / x.dtype.type(count), axes), x.shape).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=x.dtype), (x,), bw, "mean")


# -- layers ---------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight shaped (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape} do not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, bw, "linear")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    if min(x.shape) == 0:
        raise ShapeError(f"conv2d: zero-extent input {x.shape}")
    n, c, h, w = x.shape
    co, ci, kh, kw = kernel.shape
    if ci != c:
        raise ShapeError(f"conv2d: input channels (dim 1) {c} != kernel channels {ci}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({co},)")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be >= 1 and padding >= 0")
    if h + 2 * padding < kh:
        raise ShapeError(f"conv2d: padded height {h + 2 * padding} smaller than kernel height {kh}")
    if w + 2 * padding < kw:
        raise ShapeError(f"conv2d: padded width {w + 2 * padding} smaller than kernel width {kw}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: n, c, ho, wo, kh, kw  ->  cols: n*ho*wo, c*kh*kw
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    kmat = kernel.data.reshape(co, -1)
    out = cols @ kmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
        gk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ kmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._from_op(np.ascontiguousarray(out), parents, bw, "conv2d")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"max_pool2d: spatial size {(h, w)} not divisible by {size}")
    blocks = x.data.reshape(n, c, h // size, size, w // size, size).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // size, w // size, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // size, w // size, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return Tensor._from_op(out, (x,), bw, "max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """N×C×H×W -> N×C."""
    return mean(x, axis=(2, 3))


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row i holds the half-pixel-center bilinear weights of output sample i."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling of the last two axes, half-pixel centers, edge clamp."""
    if x.ndim < 2 or min(x.shape) <= 0 or out_h <= 0 or out_w <= 0:
        raise ShapeError(f"bilinear_resize: invalid extents {x.shape} -> ({out_h}, {out_w})")
    h, w = x.shape[-2:]
    if (out_h, out_w) == (h, w):
        return Tensor._from_op(x.data.copy(), (x,), lambda g: (g,), "bilinear_resize")
    rh = _resize_matrix(h, out_h, x.dtype)
    rw = _resize_matrix(w, out_w, x.dtype)
    out = rh @ x.data @ rw.T

    def bw(g):
        return (rh.T @ g @ rw,)

    return Tensor._from_op(out, (x,), bw, "bilinear_resize")


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax over the last axis."""
    z = logits.data
    if np.isnan(z).any():
        raise ValueError("softmax: NaN in logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(s, (logits,), bw, "softmax")


def minmax_normalize(x: Tensor) -> Tensor:
    """Rescale every map over the last two axes to [0, 1]; constant maps become 0."""
    lead = x.shape[:-2]
    flat = x.data.reshape(*lead, -1)
    lo_idx = flat.argmin(axis=-1)
    hi_idx = flat.argmax(axis=-1)
    lo = np.take_along_axis(flat, lo_idx[..., None], axis=-1)
    hi = np.take_along_axis(flat, hi_idx[..., None], axis=-1)
    rng = hi - lo
    degenerate = rng <= 0
    safe = np.where(degenerate, 1, rng)
    out = np.where(degenerate, 0, (flat - lo) / safe).astype(x.dtype)

    def bw(g):
        gf = g.reshape(flat.shape)
        gx = np.where(degenerate, 0, gf / safe)
        d_lo = np.where(degenerate, 0, (gf * (flat - hi)).sum(axis=-1, keepdims=True) / safe**2)
        d_hi = np.where(degenerate, 0, -(gf * (flat - lo)).sum(axis=-1, keepdims=True) / safe**2)
        np.add.at(gx, _along(lo_idx), d_lo[..., 0])
        np.add.at(gx, _along(hi_idx), d_hi[..., 0])
        return (gx.astype(x.dtype).reshape(x.shape),)

    return Tensor._from_op(out.reshape(x.shape), (x,), bw, "minmax_normalize")


def _along(idx: np.ndarray):
    grids = np.indices(idx.shape, sparse=True)
    return (*grids, idx)


def detach(x: Tensor) -> Tensor:
    return x.detach()


# -- serialization ----------------------------------------------------------------

TENSOR_MAGIC = b"ATD1"
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2, np.dtype("u1"): 3}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def write_tensor(fh: BinaryIO, x) -> None:
    """Header: magic, rank (u64), extents (u64 each), dtype code (u64); then row-major LE payload."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
    if dt not in _DTYPE_CODES:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<Q", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(struct.pack("<Q", _DTYPE_CODES[dt]))
    fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated tensor data")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    if _read_exact(fh, 4) != TENSOR_MAGIC:
        raise ValueError("bad tensor magic")
    (rank,) = struct.unpack("<Q", _read_exact(fh, 8))
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    (code,) = struct.unpack("<Q", _read_exact(fh, 8))
    if code not in _CODE_DTYPES:
        raise ValueError(f"unknown dtype code {code}")
    dt = _CODE_DTYPES[code]
    count = int(np.prod(shape)) if rank else 1
    payload = _read_exact(fh, count * dt.itemsize)
    return np.frombuffer(payload, dtype=dt).reshape(shape).copy()


def save_tensor(path, x) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, x)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return Tensor(read_tensor(fh))


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def channel_weighted_sum(weights: np.ndarray, features: Tensor) -> Tensor:
    """out[n,k,h,w] = sum_c weights[n,k,c] * features[n,c,h,w]; weights are constants."""
    w = np.asarray(weights, dtype=features.dtype)
    if w.ndim != 3 or w.shape[0] != features.shape[0] or w.shape[2] != features.shape[1]:
        raise ShapeError(f"channel weights {w.shape} incompatible with features {features.shape}")
    out = np.einsum("nkc,nchw->nkhw", w, features.data)

    def bw(g):
        return (np.einsum("nkc,nkhw->nchw", w, g),)

    return Tensor._from_op(out, (features,), bw, "channel_weighted_sum")
