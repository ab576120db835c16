"""Minimal dense tensor engine with reverse-mode gradients.

Only the operations the fusion network needs are provided. Every op records
its parents and a backward closure on the output tensor; ``backward`` replays
the recorded ops in reverse execution order (see :class:`ComputationTape`).
"""

from __future__ import annotations

import itertools
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ComputationTape",
    "ShapeError",
    "custom_op",
    "conv2d",
    "maxpool2",
    "relu",
    "sigmoid",
    "concat",
    "split",
    "elementwise_mul",
    "add",
    "tsum",
    "scale",
    "reshape",
    "transpose",
    "backward",
    "sgd_step",
    "SGD",
    "glorot_uniform",
    "Adam",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"FGF1"

# Inner products of conv2d are accumulated in this dtype before casting back;
# None accumulates in the input dtype (float32 training, float64 gradient checks).
CONV_ACCUM_DTYPE = None

_seq = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Dense row-major array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._seq = next(_seq)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def _accumulate(self, g: np.ndarray, owned: bool = False) -> None:
        # ``owned`` marks a freshly computed buffer nobody else holds, which can be adopted without a copy
        if self.grad is None:
            if owned and g.dtype == self.data.dtype:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return elementwise_mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -other)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], fn: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap ``data`` as the output of an op whose backward is ``fn(grad_out)``.

    ``fn`` must accumulate into the parents via ``parent._accumulate``.
    """
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


class ComputationTape:
    """Recorded ops reachable from a root, in execution order.

    Each tensor gets a monotonically increasing sequence number when created,
    so sorting the reachable non-leaf nodes by it recovers execution order.
    """

    def __init__(self, root: Tensor):
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._backward is not None:
                nodes.append(t)
                stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        self.ops = nodes

    def __len__(self) -> int:
        return len(self.ops)

    def reverse(self) -> list[Tensor]:
        return self.ops[::-1]


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every requires-grad leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any tensor requiring grad")
    tape = ComputationTape(loss)
    loss.grad = np.ones_like(loss.data)
    for node in tape.reverse():
        g = node.grad
        if g is None:
            continue
        node._backward(g)
        # intermediate buffers are not needed once propagated
        node.grad = None
    loss.grad = np.ones_like(loss.data)


# ---------------------------------------------------------------------------
# convolution and pooling


def _conv_out(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[B,C,H,W]`` with ``w[O,C,kH,kW]`` plus per-channel bias."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D [B,C,H,W], got rank {x.data.ndim}")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4-D [O,C,kH,kW], got rank {w.data.ndim}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    B, C, H, W = x.shape
    O, Ck, kH, kW = w.shape
    if Ck != C:
        raise ShapeError(f"channel dimension mismatch: input C={C}, kernel C={Ck}")
    if kH > H + 2 * padding:
        raise ShapeError(f"kernel height {kH} exceeds padded input height {H + 2 * padding}")
    if kW > W + 2 * padding:
        raise ShapeError(f"kernel width {kW} exceeds padded input width {W + 2 * padding}")
    if b is not None and b.shape != (O,):
        raise ShapeError(f"bias must have shape ({O},), got {b.shape}")

    Ho = _conv_out(H, kH, stride, padding)
    Wo = _conv_out(W, kW, stride, padding)
    dtype = x.data.dtype
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if stride == 1 and O < C and kH * kW > 1:
        return _conv2d_narrow(x, w, b, xp, Ho, Wo, padding)

    # cols[C, kH, kW, B, Ho, Wo]
    cols = np.empty((C, kH, kW, B, Ho, Wo), dtype=dtype)
    hs = stride * (Ho - 1) + 1
    ws = stride * (Wo - 1) + 1
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kH):
        for j in range(kW):
            cols[:, i, j] = xt[:, :, i : i + hs : stride, j : j + ws : stride]
    cols2 = cols.reshape(C * kH * kW, B * Ho * Wo)
    wmat = w.data.reshape(O, -1)
    acc = CONV_ACCUM_DTYPE or dtype
    out = (wmat.astype(acc, copy=False) @ cols2.astype(acc, copy=False)).astype(dtype, copy=False)
    out = out.reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)
    res = np.empty((B, O, Ho, Wo), dtype=dtype)
    if b is not None:
        np.add(out, b.data.reshape(1, O, 1, 1), out=res)
    else:
        res[...] = out
    out = res

    parents = (x, w) if b is None else (x, w, b)

    def _bw(g: np.ndarray) -> None:
        gmat = g.transpose(1, 0, 2, 3).reshape(O, B * Ho * Wo)
        if w.requires_grad:
            gw = (gmat.astype(acc, copy=False) @ cols2.T.astype(acc, copy=False)).astype(dtype, copy=False)
            w._accumulate(gw.reshape(w.shape), owned=True)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3), dtype=acc).astype(dtype), owned=True)
        if x.requires_grad:
            gcols = (wmat.T.astype(acc, copy=False) @ gmat.astype(acc, copy=False)).astype(dtype, copy=False)
            gcols = gcols.reshape(C, kH, kW, B, Ho, Wo)
            gxp = np.zeros((C, B) + xp.shape[2:], dtype=dtype)
            for i in range(kH):
                for j in range(kW):
                    gxp[:, :, i : i + hs : stride, j : j + ws : stride] += gcols[:, i, j]
            gx = gxp.transpose(1, 0, 2, 3)
            if padding:
                gx = gx[:, :, padding : padding + H, padding : padding + W]
            x._accumulate(gx, owned=True)

    return custom_op(out, parents, _bw)


def _conv2d_narrow(x: Tensor, w: Tensor, b: Tensor | None, xp: np.ndarray, Ho: int, Wo: int,
                   padding: int) -> Tensor:
    """Stride-1 convolution with fewer output than input channels.

    Multiplies the padded input by every kernel tap at once and sums shifted
    slices, so no [C*kH*kW, B*Ho*Wo] column buffer is built. The backward pass
    shifts the (small) output gradient instead of the input.
    """
    B, C, H, W = x.shape
    O, _, kH, kW = w.shape
    Hp, Wp = xp.shape[2:]
    dtype = x.data.dtype
    acc = CONV_ACCUM_DTYPE or dtype
    X = np.ascontiguousarray(xp.transpose(1, 0, 2, 3)).reshape(C, B * Hp * Wp)
    taps = w.data.transpose(2, 3, 0, 1).reshape(kH * kW * O, C)
    Y = (taps.astype(acc, copy=False) @ X.astype(acc, copy=False)).reshape(kH, kW, O, B, Hp, Wp)
    out = np.zeros((O, B, Ho, Wo), dtype=acc)
    for i in range(kH):
        for j in range(kW):
            out += Y[i, j, :, :, i : i + Ho, j : j + Wo]
    out = out.transpose(1, 0, 2, 3)
    res = np.empty((B, O, Ho, Wo), dtype=dtype)
    if b is not None:
        np.add(out, b.data.reshape(1, O, 1, 1), out=res, casting="same_kind")
    else:
        res[...] = out
    out = res
    parents = (x, w) if b is None else (x, w, b)

    def _bw(g: np.ndarray) -> None:
        gt = g.transpose(1, 0, 2, 3)
        if w.requires_grad:
            # tap (i, j) sees the output gradient placed at offset (i, j) of the padded plane
            shifted = np.zeros((kH, kW, O, B, Hp, Wp), dtype=dtype)
            for i in range(kH):
                for j in range(kW):
                    shifted[i, j, :, :, i : i + Ho, j : j + Wo] = gt
            gw = shifted.reshape(kH * kW * O, B * Hp * Wp).astype(acc, copy=False) @ X.T.astype(acc, copy=False)
            w._accumulate(gw.reshape(kH, kW, O, C).transpose(2, 3, 0, 1).astype(dtype), owned=True)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3), dtype=acc).astype(dtype), owned=True)
        if x.requires_grad:
            gpad = np.pad(gt, ((0, 0), (0, 0), (kH - 1, Hp - Ho), (kW - 1, Wp - Wo)))
            cols = np.empty((O, kH, kW, B, Hp, Wp), dtype=dtype)
            for i in range(kH):
                for j in range(kW):
                    cols[:, i, j] = gpad[:, :, kH - 1 - i : kH - 1 - i + Hp, kW - 1 - j : kW - 1 - j + Wp]
            wmat = w.data.transpose(1, 0, 2, 3).reshape(C, O * kH * kW)
            gxp = (wmat.astype(acc, copy=False) @ cols.reshape(O * kH * kW, -1).astype(acc, copy=False))
            gx = gxp.astype(dtype, copy=False).reshape(C, B, Hp, Wp).transpose(1, 0, 2, 3)
            if padding:
                gx = gx[:, :, padding : padding + H, padding : padding + W]
            x._accumulate(gx, owned=True)

    return custom_op(out, parents, _bw)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties go to the first cell in row-major order."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2 input must be 4-D, got rank {x.data.ndim}")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2 needs even spatial extents, got H={H}, W={W}")
    win = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def _bw(g: np.ndarray) -> None:
        gw = np.zeros(win.shape, dtype=x.data.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        x._accumulate(gx, owned=True)

    return custom_op(out, (x,), _bw)


# ---------------------------------------------------------------------------
# pointwise and structural ops


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.maximum(x.data, 0)
    return custom_op(out, (x,), lambda g: x._accumulate(g * mask, owned=True))


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(v))
    r = 1.0 / (1.0 + e)
    return np.where(v >= 0, r, e * r).astype(v.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return custom_op(s, (x,), lambda g: x._accumulate(g * s * (1 - s), owned=True))


def _check_same(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape:
        for dim, (p, q) in enumerate(zip(a.shape, b.shape)):
            if p != q:
                raise ShapeError(f"{opname}: extent mismatch at dim {dim}: {p} vs {q}")
        raise ShapeError(f"{opname}: rank mismatch {a.shape} vs {b.shape}")


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "elementwise_mul")

    def _bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return custom_op(a.data * b.data, (a, b), _bw)


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return custom_op(a.data + a.data.dtype.type(c), (a,), lambda g: a._accumulate(g))
    _check_same(a, b, "add")

    def _bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return custom_op(a.data + b.data, (a, b), _bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return custom_op(x.data * c, (x,), lambda g: x._accumulate(g * c))


def tsum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype)
    return custom_op(out, (x,), lambda g: x._accumulate(np.broadcast_to(g, x.shape)))


def concat(inputs: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not inputs:
        raise ShapeError("concat of an empty list")
    ref = inputs[0].shape
    ax = axis % len(ref)
    for k, t in enumerate(inputs[1:], start=1):
        if len(t.shape) != len(ref):
            raise ShapeError(f"concat: input {k} has rank {len(t.shape)}, expected {len(ref)}")
        for dim in range(len(ref)):
            if dim != ax and t.shape[dim] != ref[dim]:
                raise ShapeError(f"concat: input {k} extent {t.shape[dim]} at dim {dim}, expected {ref[dim]}")
    out = np.concatenate([t.data for t in inputs], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in inputs])

    def _bw(g: np.ndarray) -> None:
        for t, lo, hi in zip(inputs, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return custom_op(out, tuple(inputs), _bw)


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    """Inverse of :func:`concat`: slice ``x`` into consecutive chunks along ``axis``."""
    ax = axis % x.data.ndim
    if sum(sizes) != x.shape[ax]:
        raise ShapeError(f"split sizes sum to {sum(sizes)}, extent at dim {ax} is {x.shape[ax]}")
    outs = []
    lo = 0
    for n in sizes:
        sl = [slice(None)] * x.data.ndim
        sl[ax] = slice(lo, lo + n)
        sl = tuple(sl)

        def _bw(g: np.ndarray, sl=sl) -> None:
            full = np.zeros_like(x.data)
            full[sl] = g
            x._accumulate(full)

        outs.append(custom_op(np.ascontiguousarray(x.data[sl]), (x,), _bw))
        lo += n
    return outs


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return custom_op(out, (x,), lambda g: x._accumulate(g.reshape(x.shape)))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return custom_op(out, (x,), lambda g: x._accumulate(g.transpose(inv)))


# ---------------------------------------------------------------------------
# parameters and optimisation


def glorot_uniform(shape: Sequence[int], rng: np.random.Generator, dtype=np.float32) -> Tensor:
    """Seeded Glorot/Xavier uniform init for conv kernels ``[O,C,kH,kW]``."""
    shape = tuple(shape)
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in = shape[1] * receptive
    fan_out = shape[0] * receptive
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


def sgd_step(params: Iterable[Tensor], learning_rate: float, weight_decay: float = 0.0) -> None:
    """p <- p - lr * (grad + weight_decay * p), then clear grads."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name or p!r} has no gradient")
    for p in params:
        p.data -= p.data.dtype.type(learning_rate) * (p.grad + p.data.dtype.type(weight_decay) * p.data)
        p.grad = None


class SGD:
    """SGD with L2 weight decay and optional heavy-ball momentum.

    With ``momentum=0`` each step is exactly :func:`sgd_step`.
    """

    def __init__(self, params: Sequence[Tensor], lr: float, weight_decay: float = 0.0, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        if self.momentum == 0.0:
            sgd_step(self.params, self.lr, self.weight_decay)
            return
        for p in self.params:
            if p.grad is None:
                raise ValueError(f"parameter {p.name or p!r} has no gradient")
        mu = np.float32(self.momentum)
        for p, v in zip(self.params, self._velocity):
            d = p.grad + p.data.dtype.type(self.weight_decay) * p.data
            v *= mu
            v += d
            p.data -= p.data.dtype.type(self.lr) * v
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    """Adam with a constant step size and L2 weight decay folded into the gradient."""

    def __init__(self, params: Sequence[Tensor], lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise ValueError(f"parameter {p.name or p!r} has no gradient")
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            dt = p.data.dtype.type
            g = p.grad + dt(self.weight_decay) * p.data
            m *= dt(self.b1)
            m += dt(1.0 - self.b1) * g
            v *= dt(self.b2)
            v += dt(1.0 - self.b2) * g * g
            p.data -= dt(self.lr / c1) * m / (np.sqrt(v / dt(c2)) + dt(self.eps))
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# checkpoint file


def save_checkpoint(path, params: dict[str, np.ndarray | Tensor], header: bytes | str | None = None) -> None:
    """Write ``FGF1`` + u64 header length + header + per-parameter records.

    Record layout: u64 name length, utf-8 name, u64 rank, rank x u64 extents,
    float32 little-endian payload.
    """
    if isinstance(header, str):
        header = header.encode("utf-8")
    header = header or b""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name, value in params.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            arr = np.ascontiguousarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[bytes, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {buf[:4]!r} at offset 0")

    def take(off: int, n: int) -> bytes:
        if off + n > len(buf):
            raise ValueError(f"truncated checkpoint at offset {off}: need {n} bytes, have {len(buf) - off}")
        return buf[off : off + n]

    off = 4
    (hlen,) = struct.unpack("<Q", take(off, 8))
    off += 8
    header = take(off, hlen)
    off += hlen
    params: dict[str, np.ndarray] = {}
    while off < len(buf):
        (nlen,) = struct.unpack("<Q", take(off, 8))
        off += 8
        name = take(off, nlen).decode("utf-8")
        off += nlen
        (rank,) = struct.unpack("<Q", take(off, 8))
        off += 8
        shape = struct.unpack(f"<{rank}Q", take(off, 8 * rank))
        off += 8 * rank
        n = int(np.prod(shape)) if rank else 1
        payload = take(off, 4 * n)
        off += 4 * n
        params[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return header, params
