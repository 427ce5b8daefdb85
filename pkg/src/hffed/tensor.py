"""Dense float64 tensors with a reverse-mode gradient tape.

A :class:`Tape` records every operation whose inputs include a watched
tensor. ``tape.backward(loss)`` sweeps the recorded nodes in reverse and
leaves one gradient per reachable node in ``tape.grads``.

    tape = Tape()
    w = tape.watch(np.ones((2, 2)))
    loss = mse_loss(matmul(w, x), y)
    tape.backward(loss)
    tape.grad(w)
"""

from __future__ import annotations

import math
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAX_RANK = 4
HFT_MAGIC = b"HFT1"


class ShapeError(ValueError):
    pass


class TensorFormatError(ValueError):
    pass


class Tensor:
    """An n-d float64 array, optionally attached to a tape node."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds the maximum of {MAX_RANK}")
        if 0 in arr.shape:
            raise ShapeError(f"zero-sized dimension in shape {arr.shape}")
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.node is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self) -> str:
        flag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node(NamedTuple):
    op: str
    parents: tuple[int | None, ...]
    vjp: Callable | None


class Tape:
    """Append-only record of operations; parents always precede children."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.grads: dict[int, np.ndarray] = {}

    def watch(self, value) -> Tensor:
        t = Tensor(value)
        t.tape = self
        t.node = len(self.nodes)
        self.nodes.append(Node("leaf", (), None))
        return t

    def record(self, op: str, value: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
        parents = tuple(t.node if t.tape is self else None for t in inputs)
        node = len(self.nodes)
        self.nodes.append(Node(op, parents, vjp))
        return Tensor(value, tape=self, node=node)

    def backward(self, root: Tensor) -> dict[int, np.ndarray]:
        if root.tape is not self or root.node is None:
            raise ValueError("backward root is not tracked on this tape")
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {list(root.shape)}")
        grads: dict[int, np.ndarray] = {root.node: np.ones_like(root.data)}
        for i in range(root.node, -1, -1):
            g = grads.get(i)
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            needs = tuple(p is not None for p in node.parents)
            for p, pg in zip(node.parents, node.vjp(g, needs)):
                if p is None:
                    continue
                prev = grads.get(p)
                grads[p] = pg if prev is None else prev + pg
        self.grads = grads
        return grads

    def grad(self, t: Tensor) -> np.ndarray:
        if t.tape is not self or t.node is None:
            raise ValueError("tensor is not tracked on this tape")
        g = self.grads.get(t.node)
        return np.zeros_like(t.data) if g is None else g


def _record(op: str, value: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = None
    for t in inputs:
        if t.node is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise ValueError(f"{op}: inputs are tracked on different tapes")
    if tape is None:
        return Tensor(value)
    return tape.record(op, value, inputs, vjp)


# ---------------------------------------------------------------------------
# elementwise arithmetic with channel broadcast


def _broadcast_kind(op: str, xs: tuple, ys: tuple) -> bool:
    """True when ``ys`` is a per-channel vector against ``xs``; raises otherwise."""
    if xs == ys:
        return False
    if len(xs) == 3 and ys in ((xs[0],), (xs[0], 1, 1)):
        return True
    raise ShapeError(f"{op}: incompatible shapes {list(xs)} and {list(ys)}")


def _elementwise(op: str, x, y, fwd, dx, dy) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    bcast = _broadcast_kind(op, x.shape, y.shape)
    xd = x.data
    yd = y.data.reshape(-1, 1, 1) if bcast else y.data
    out = fwd(xd, yd)

    def vjp(g, needs):
        gx = dx(g, xd, yd) if needs[0] else None
        gy = None
        if needs[1]:
            gy = dy(g, xd, yd)
            if bcast:
                gy = gy.sum(axis=(1, 2)).reshape(y.shape)
        return gx, gy

    return _record(op, out, (x, y), vjp)


def add(x, y) -> Tensor:
    return _elementwise("add", x, y, np.add, lambda g, a, b: g, lambda g, a, b: g)


def sub(x, y) -> Tensor:
    return _elementwise("sub", x, y, np.subtract, lambda g, a, b: g, lambda g, a, b: -g)


def mul(x, y) -> Tensor:
    return _elementwise(
        "mul", x, y, np.multiply, lambda g, a, b: g * b, lambda g, a, b: g * a
    )


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _record("scale", x.data * c, (x,), lambda g, needs: (g * c,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0.0), (x,), lambda g, needs: (g * mask,))


def total(x) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    x = as_tensor(x)
    shape = x.shape
    return _record(
        "sum", np.asarray(x.data.sum()), (x,), lambda g, needs: (np.broadcast_to(g, shape).copy(),)
    )


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    out = x.data.reshape(tuple(shape))
    return _record("reshape", out, (x,), lambda g, needs: (g.reshape(old),))


def slice1d(x, start: int, stop: int) -> Tensor:
    """Contiguous slice ``x[start:stop]`` of a rank-1 tensor."""
    x = as_tensor(x)
    if x.data.ndim != 1 or not 0 <= start < stop <= x.shape[0]:
        raise ShapeError(f"slice1d: bad range [{start}:{stop}] for shape {list(x.shape)}")
    n = x.shape[0]

    def vjp(g, needs):
        full = np.zeros(n)
        full[start:stop] = g
        return (full,)

    return _record("slice", x.data[start:stop].copy(), (x,), vjp)


def matmul(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    if x.data.ndim != 2 or y.data.ndim != 2 or x.shape[1] != y.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {list(x.shape)} by {list(y.shape)}")
    xd, yd = x.data, y.data

    def vjp(g, needs):
        return (g @ yd.T if needs[0] else None, xd.T @ g if needs[1] else None)

    return _record("matmul", xd @ yd, (x, y), vjp)


def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shapes differ {list(pred.shape)} vs {list(target.shape)}")
    diff = pred.data - target.data
    n = diff.size

    def vjp(g, needs):
        d = diff * (2.0 * g / n)
        return (d if needs[0] else None, -d if needs[1] else None)

    return _record("mse", np.asarray(np.mean(diff * diff)), (pred, target), vjp)


# ---------------------------------------------------------------------------
# convolution


_scratch = threading.local()


def _pool() -> dict:
    pool = getattr(_scratch, "pool", None)
    if pool is None:
        pool = _scratch.pool = {}
    return pool


def _acquire(shape: tuple[int, ...]) -> np.ndarray:
    # recycled per-thread buffers: fresh multi-MB allocations page-fault on every step
    free = _pool().setdefault(shape, [])
    return free.pop() if free else np.empty(shape)


def _release(buf: np.ndarray) -> None:
    _pool().setdefault(buf.shape, []).append(buf)


def _im2col(x: np.ndarray, k: int, out: np.ndarray) -> np.ndarray:
    """Fill ``out`` ([C, k, k, H, W]) with patches of zero-padded ``x``; return it as [C*k*k, H*W]."""
    c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    np.copyto(out, win.transpose(0, 3, 4, 1, 2))
    return out.reshape(c * k * k, h * w)


def conv2d(x, kernels, bias) -> Tensor:
    """Stride-1 cross-correlation with zero same-padding.

    ``x`` is [C_in, H, W], ``kernels`` [C_out, C_in, k, k] with odd ``k``,
    ``bias`` [C_out]. Output is [C_out, H, W].
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d: bad ranks {list(x.shape)} / {list(kernels.shape)}")
    c_out, c_in, k, k2 = kernels.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if x.shape[0] != c_in:
        raise ShapeError(f"conv2d: input has {x.shape[0]} channels, kernels expect {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {list(bias.shape)} != [{c_out}]")
    _, h, w = x.shape
    xd, kd = x.data, kernels.data
    keep = kernels.tracked
    buf = _acquire((c_in, k, k, h, w))
    cols = _im2col(xd, k, buf)
    out = (kd.reshape(c_out, -1) @ cols).reshape(c_out, h, w)
    out += bias.data.reshape(-1, 1, 1)
    if not keep:
        _release(buf)
    saved = [buf if keep else None]

    def vjp(g, needs):
        g2 = g.reshape(c_out, -1)
        gx = gk = gb = None
        if needs[1]:
            held = saved[0]
            if held is None:
                held = _acquire((c_in, k, k, h, w))
                _im2col(xd, k, held)
            gk = (held.reshape(c_in * k * k, -1) @ g2.T).T.reshape(kd.shape)
            saved[0] = None
            _release(held)
        if needs[0]:
            gbuf = _acquire((c_out, k, k, h, w))
            flipped = kd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, -1)
            gx = (flipped @ _im2col(g, k, gbuf)).reshape(c_in, h, w)
            _release(gbuf)
        if needs[2]:
            gb = g2.sum(axis=1)
        return gx, gk, gb

    return _record("conv2d", out, (x, kernels, bias), vjp)


def channel_norm(x, eps: float = 1e-5) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalize each channel of a [C, H, W] tensor to zero mean, unit variance.

    Returns the normalized tensor and the per-channel mean and (biased)
    variance used, for running-statistics bookkeeping.
    """
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"channel_norm: expected [C,H,W], got {list(x.shape)}")
    mean = x.data.mean(axis=(1, 2), keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def vjp(g, needs):
        gm = g.mean(axis=(1, 2), keepdims=True)
        gxm = (g * xhat).mean(axis=(1, 2), keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    out = _record("channel_norm", xhat, (x,), vjp)
    return out, mean.reshape(-1), var.reshape(-1)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update. Returns new arrays; inputs are not mutated."""
    if params.keys() != grads.keys():
        raise ShapeError(
            f"adam_step: parameter/gradient names differ: {sorted(set(params) ^ set(grads))}"
        )
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ShapeError(
                f"adam_step: {name} has shape {list(p.shape)}, gradient {list(grads[name].shape)}"
            )
        if name in state.m and state.m[name].shape != p.shape:
            raise ShapeError(f"adam_step: optimizer state for {name} has the wrong shape")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    step_size = state.lr / c1
    inv_c2 = 1.0 / math.sqrt(c2)
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            v = state.v[name] = np.zeros_like(p)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v)
        denom *= inv_c2
        denom += state.eps
        update = np.divide(m, denom, out=denom)
        update *= step_size
        out[name] = p - update
    return out


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one element at a time."""
    if h <= 0:
        raise ValueError("step h must be positive")
    xp = np.array(as_tensor(x).data, dtype=np.float64)
    grad = np.empty_like(xp)
    flat = xp.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(np.asarray(f(xp)))
        flat[i] = orig - h
        fm = float(np.asarray(f(xp)))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


# ---------------------------------------------------------------------------
# HFT1 tensor files


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim > MAX_RANK:
        raise ShapeError(f"rank {arr.ndim} exceeds the maximum of {MAX_RANK}")
    header = HFT_MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype("<f8").tobytes(order="C")


def decode_tensor(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 5 or buf[:4] != HFT_MAGIC:
        raise TensorFormatError(f"{source}: missing HFT1 magic")
    rank = buf[4]
    if rank > MAX_RANK:
        raise TensorFormatError(f"{source}: rank {rank} exceeds {MAX_RANK}")
    hdr = 5 + 4 * rank
    if len(buf) < hdr:
        raise TensorFormatError(f"{source}: truncated header")
    dims = struct.unpack(f"<{rank}I", buf[5:hdr])
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    if len(buf) != hdr + 8 * count:
        raise TensorFormatError(
            f"{source}: expected {count} values for shape {list(dims)}, "
            f"found {(len(buf) - hdr) / 8:g}"
        )
    return np.frombuffer(buf, dtype="<f8", offset=hdr).astype(np.float64).reshape(dims)


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise TensorFormatError(f"{path}: cannot read tensor file ({exc})") from exc
    return decode_tensor(buf, source=str(path))
