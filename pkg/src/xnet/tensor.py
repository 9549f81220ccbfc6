"""Dense float tensors with reverse-mode automatic differentiation.

The engine is a recorded op list (Wengert list): running a differentiable op
while a :class:`Tape` is active appends a backward closure to that tape, and
:func:`backward` replays the closures in reverse, accumulating gradients into
every grad-enabled tensor that contributed to the loss.  There is no
double-backward; a tape can be consumed exactly once.

Storage is numpy, float32 by default.  Every op also works in float64, which
is what the finite-difference gradient checks run in.  Ops never broadcast:
binary ops demand equal shapes, and anything channel-wise (bias, norm gain)
is its own op.  Gradients accumulate across multiple backward calls until
explicitly cleared, so several loss terms can be pushed through one set of
parameters before an optimizer step.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional

import numpy as np

__all__ = [
    "ShapeError",
    "TapeError",
    "Tensor",
    "Tape",
    "tensor",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "add_channel_bias",
    "relu",
    "leaky_relu",
    "tanh",
    "pad_reflect",
    "conv2d",
    "conv2d_transpose",
    "instance_norm",
    "l1_mean",
    "sq_mean",
    "sum_all",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Shapes, axes or dtypes are incompatible with the requested op."""


class TapeError(RuntimeError):
    """Tape misuse: replaying a consumed tape or backward on a non-scalar."""


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


class Tensor:
    """An n-d float array plus the autodiff bookkeeping for it.

    ``data`` is a C-contiguous numpy array (row-major, so ``data.ravel()``
    is the flat buffer).  ``grad`` starts as None and is lazily allocated
    by the backward pass; it always matches ``data`` in shape and dtype.
    """

    __slots__ = ("data", "grad_enabled", "grad")

    def __init__(self, data: np.ndarray, grad_enabled: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # note: never hit for 0-d, which it would promote to 1-d
        self.data = arr
        self.grad_enabled = bool(grad_enabled)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, cut off from gradient flow (shares the buffer)."""
        return Tensor(self.data, grad_enabled=False)

    def clear_grad(self) -> None:
        self.grad = None

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad_enabled={self.grad_enabled})"


def tensor(data, grad_enabled: bool = False, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, grad_enabled=grad_enabled)


class Tape:
    """Ordered record of backward closures for one forward pass."""

    __slots__ = ("_nodes", "consumed")

    def __init__(self):
        self._nodes: list[Callable[[], None]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)


def _active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.grad_enabled:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _record(out: Tensor, inputs: Iterable[Tensor], bw: Callable[[np.ndarray], None]) -> None:
    """Mark `out` grad-enabled and push a closure if a tape is listening."""
    if not any(i.grad_enabled for i in inputs):
        return
    out.grad_enabled = True
    tp = _active_tape()
    if tp is None:
        return

    def node() -> None:
        g = out.grad
        if g is not None:
            bw(g)

    tp._nodes.append(node)


def backward(loss: Tensor, tape: Tape) -> None:
    """Replay `tape` in reverse, seeding d(loss)/d(loss) = 1.

    Gradients land in every grad-enabled tensor touched by the tape and
    accumulate on top of whatever was already there.  The tape is single
    use; replaying it again raises.
    """
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward call")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape.consumed = True
    if not loss.grad_enabled:
        return  # constant loss: nothing contributed gradients
    _accum(loss, np.ones_like(loss.data))
    for node in reversed(tape._nodes):
        node()


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    out = Tensor(a.data + b.data)

    def bw(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, g)

    _record(out, (a, b), bw)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bw(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, -g)

    _record(out, (a, b), bw)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bw(g: np.ndarray) -> None:
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    _record(out, (a, b), bw)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * a.data.dtype.type(s))

    def bw(g: np.ndarray) -> None:
        _accum(a, g * a.data.dtype.type(s))

    _record(out, (a,), bw)
    return out


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x[N,C,H,W] + bias[C], broadcast over batch and spatial axes."""
    if x.data.ndim != 4:
        raise ShapeError(f"add_channel_bias: expected 4-d input, got {x.shape}")
    if bias.data.ndim != 1 or bias.data.shape[0] != x.data.shape[1]:
        raise ShapeError(
            f"add_channel_bias: bias shape {bias.shape} does not match channel axis 1 (={x.data.shape[1]})"
        )
    out = Tensor(x.data + bias.data.reshape(1, -1, 1, 1))

    def bw(g: np.ndarray) -> None:
        _accum(x, g)
        _accum(bias, g.sum(axis=(0, 2, 3)))

    _record(out, (x, bias), bw)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))

    mask = x.data > 0

    def bw(g: np.ndarray) -> None:
        _accum(x, g * mask)

    _record(out, (x,), bw)
    return out


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    slope = x.data.dtype.type(slope)
    out = Tensor(np.where(x.data > 0, x.data, x.data * slope))

    # subgradient at 0 is the slope, by contract
    factor = np.where(x.data > 0, x.data.dtype.type(1.0), slope)

    def bw(g: np.ndarray) -> None:
        _accum(x, g * factor)

    _record(out, (x,), bw)
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)

    def bw(g: np.ndarray) -> None:
        _accum(x, g * (1.0 - y * y))

    _record(out, (x,), bw)
    return out


def l1_mean(a: Tensor, b: Tensor) -> Tensor:
    """mean(|a - b|), the reconstruction penalty used by every L1 term."""
    _check_same(a, b, "l1_mean")
    d = a.data - b.data
    out = Tensor(np.asarray(np.mean(np.abs(d)), dtype=a.data.dtype))

    def bw(g: np.ndarray) -> None:
        s = np.sign(d) * (g / d.size)
        _accum(a, s)
        _accum(b, -s)

    _record(out, (a, b), bw)
    return out


def sq_mean(a: Tensor, target: float) -> Tensor:
    """mean((a - target)^2) against a scalar label."""
    d = a.data - a.data.dtype.type(target)
    out = Tensor(np.asarray(np.mean(d * d), dtype=a.data.dtype))

    def bw(g: np.ndarray) -> None:
        _accum(a, d * (2.0 * g / d.size))

    _record(out, (a,), bw)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(), dtype=a.data.dtype))

    def bw(g: np.ndarray) -> None:
        _accum(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False))

    _record(out, (a,), bw)
    return out


# ---------------------------------------------------------------------------
# padding


def pad_reflect(x: Tensor, amount: int) -> Tensor:
    """Mirror padding without edge repetition on both spatial axes.

    A row (1,2,3) padded by 1 becomes (2,1,2,3,2).  Requires amount < H and
    amount < W so the mirror has enough rows to reflect.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"pad_reflect: expected 4-d input, got {x.shape}")
    a = int(amount)
    if a < 0:
        raise ShapeError(f"pad_reflect: negative amount {a}")
    n, c, h, w = x.data.shape
    if a >= h or a >= w:
        raise ShapeError(f"pad_reflect: amount {a} must be smaller than spatial axes (H={h}, W={w})")
    if a == 0:
        out = Tensor(x.data)

        def bw0(g: np.ndarray) -> None:
            _accum(x, g)

        _record(out, (x,), bw0)
        return out

    idx_h = np.concatenate([np.arange(a, 0, -1), np.arange(h), np.arange(h - 2, h - 2 - a, -1)])
    idx_w = np.concatenate([np.arange(a, 0, -1), np.arange(w), np.arange(w - 2, w - 2 - a, -1)])
    out = Tensor(x.data[:, :, idx_h[:, None], idx_w[None, :]])

    # backward scatters each padded cell back onto its mirror source
    src = (idx_h[:, None] * w + idx_w[None, :]).ravel()

    def bw(g: np.ndarray) -> None:
        gf = g.reshape(n * c, -1)
        dx = np.zeros((n * c, h * w), dtype=g.dtype)
        np.add.at(dx, (np.arange(n * c)[:, None], src[None, :]), gf)
        _accum(x, dx.reshape(n, c, h, w))

    _record(out, (x,), bw)
    return out


def _pad_zero(arr: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return arr
    return np.pad(arr, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int):
    """Sliding windows of an already-padded [N,C,H,W] array.

    Returns (cols [N, C*kh*kw, Ho*Wo], Ho, Wo).
    """
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    v = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    v = v[:, :, ::stride, ::stride]  # [N, C, Ho, Wo, kh, kw]
    cols = np.ascontiguousarray(v.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)
    return cols, ho, wo


def _col2im(cols: np.ndarray, n: int, c: int, h: int, w: int, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add windows back onto an [N,C,H,W] canvas."""
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    v = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        hi = i + stride * (ho - 1) + 1
        for j in range(kw):
            wj = j + stride * (wo - 1) + 1
            out[:, :, i:hi:stride, j:wj:stride] += v[:, :, i, j]
    return out


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x[N,Cin,H,W] with kernel[Cout,Cin,kh,kw].

    Zero padding of `padding` on each spatial side; output side is
    floor((H + 2*padding - kh)/stride) + 1.  Reflection padding is a
    separate op (`pad_reflect`) composed in front of a padding=0 conv.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input, got {x.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d kernel, got {kernel.shape}")
    if x.data.dtype != kernel.data.dtype:
        raise ShapeError(f"conv2d: dtype mismatch {x.data.dtype} vs {kernel.data.dtype}")
    n, cin, h, w = x.data.shape
    cout, kcin, kh, kw = kernel.data.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input channel axis 1 (={cin}) does not match kernel axis 1 (={kcin})")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"conv2d: padding must be >= 0, got {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(
            f"conv2d: padded spatial axes ({hp}, {wp}) smaller than kernel ({kh}, {kw})"
        )

    xp = _pad_zero(x.data, padding)
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wm = kernel.data.reshape(cout, cin * kh * kw)
    out_mat = np.matmul(wm[None], cols)  # [N, Cout, L]
    out = Tensor(out_mat.reshape(n, cout, ho, wo))

    def bw(g: np.ndarray) -> None:
        gm = g.reshape(n, cout, ho * wo)
        if kernel.grad_enabled:
            dw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0)
            _accum(kernel, dw.reshape(cout, cin, kh, kw))
        if x.grad_enabled:
            dcols = np.matmul(wm.T[None], gm)
            dxp = _col2im(dcols, n, cin, hp, wp, kh, kw, stride, ho, wo)
            if padding:
                dxp = dxp[:, :, padding : padding + h, padding : padding + w]
            _accum(x, dxp)

    _record(out, (x, kernel), bw)
    return out


def conv2d_transpose(
    x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0, output_padding: int = 0
) -> Tensor:
    """Adjoint of conv2d: x[N,Cin,H,W], kernel[Cin,Cout,kh,kw].

    Output side is (H - 1)*stride - 2*padding + kh + output_padding, with
    output_padding rows/cols appended on the bottom/right to disambiguate
    strided shapes.  Requires output_padding < stride.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(
            f"conv2d_transpose: expected 4-d input and kernel, got {x.shape} and {kernel.shape}"
        )
    if x.data.dtype != kernel.data.dtype:
        raise ShapeError(f"conv2d_transpose: dtype mismatch {x.data.dtype} vs {kernel.data.dtype}")
    n, cin, h, w = x.data.shape
    kcin, cout, kh, kw = kernel.data.shape
    if kcin != cin:
        raise ShapeError(
            f"conv2d_transpose: input channel axis 1 (={cin}) does not match kernel axis 0 (={kcin})"
        )
    if stride < 1:
        raise ShapeError(f"conv2d_transpose: stride must be >= 1, got {stride}")
    if not (0 <= output_padding < stride):
        raise ShapeError(
            f"conv2d_transpose: output_padding {output_padding} must satisfy 0 <= op < stride (={stride})"
        )
    hc = (h - 1) * stride + kh + output_padding
    wc = (w - 1) * stride + kw + output_padding
    ho = hc - 2 * padding
    wo = wc - 2 * padding
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d_transpose: output side would be ({ho}, {wo})")

    km = kernel.data.reshape(cin, cout * kh * kw)
    xm = x.data.reshape(n, cin, h * w)
    cols = np.matmul(km.T[None], xm)  # [N, Cout*kh*kw, H*W]
    canvas = _col2im(cols, n, cout, hc, wc, kh, kw, stride, h, w)
    out = Tensor(canvas[:, :, padding : padding + ho, padding : padding + wo])

    def bw(g: np.ndarray) -> None:
        gp = np.zeros((n, cout, hc, wc), dtype=g.dtype)
        gp[:, :, padding : padding + ho, padding : padding + wo] = g
        gcols, nh, nw = _im2col(gp, kh, kw, stride)
        # nh == h and nw == w by construction (output_padding < stride)
        gm = gcols  # [N, Cout*kh*kw, H*W]
        if x.grad_enabled:
            dx = np.matmul(km[None], gm)
            _accum(x, dx.reshape(n, cin, h, w))
        if kernel.grad_enabled:
            dk = np.matmul(xm, gm.transpose(0, 2, 1)).sum(axis=0)
            _accum(kernel, dk.reshape(cin, cout, kh, kw))

    _record(out, (x, kernel), bw)
    return out


def instance_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-(sample, channel) spatial standardization with affine params.

    Uses population statistics over the H*W positions of each (n, c) slice.
    A 1x1 spatial extent has zero variance by construction and is rejected.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"instance_norm: expected 4-d input, got {x.shape}")
    n, c, h, w = x.data.shape
    if h * w == 1:
        raise ShapeError("instance_norm: spatial extent 1x1 has degenerate statistics")
    if gain.data.shape != (c,) or bias.data.shape != (c,):
        raise ShapeError(
            f"instance_norm: gain/bias shapes {gain.shape}/{bias.shape} do not match channels (={c})"
        )
    dt = x.data.dtype
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + dt.type(eps))
    xhat = xc * inv
    out = Tensor(xhat * gain.data.reshape(1, c, 1, 1) + bias.data.reshape(1, c, 1, 1))

    def bw(g: np.ndarray) -> None:
        if gain.grad_enabled:
            _accum(gain, (g * xhat).sum(axis=(0, 2, 3)))
        if bias.grad_enabled:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if x.grad_enabled:
            dxhat = g * gain.data.reshape(1, c, 1, 1)
            t1 = dxhat - dxhat.mean(axis=(2, 3), keepdims=True)
            t2 = xhat * np.mean(dxhat * xhat, axis=(2, 3), keepdims=True)
            _accum(x, inv * (t1 - t2))

    _record(out, (x, gain, bias), bw)
    return out
