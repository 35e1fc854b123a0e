"""Dense float32 tensors plus a tape for reverse-mode gradients.

The operation set is deliberately small: exactly the primitives the fusion
blocks are built from (1x1 / 3x3 convolution, group normalization, row-wise
softmax, matmul, pooling, restricted-broadcast elementwise ops), each with a
hand-written backward rule that the gradient checker verifies against central
finite differences.

Conventions:
  * all data is float32, row-major, last axis fastest
  * feature maps are (channels, height, width)
  * broadcasting exists in exactly one form: a (C, 1, 1) tensor against a
    (C, H, W) tensor; everything else is a loud shape error
  * every operation returns a fresh tensor and never mutates its inputs
"""

from __future__ import annotations

from typing import Callable

import numpy as np


class ShapeMismatchError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ShapeMismatchError(message)


class Tensor:
    """Immutable dense float32 array of rank 1..4."""

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float32, order="C")
        if arr.ndim < 1 or arr.ndim > 4:
            raise ShapeMismatchError(f"tensor rank must be 1..4, got {arr.ndim}")
        if arr.size == 0:
            raise ShapeMismatchError(f"all extents must be >= 1, got shape {tuple(arr.shape)}")
        arr.setflags(write=False)
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        """Read-only float32 view of the underlying storage."""
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self._data.shape)

    @property
    def rank(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    @classmethod
    def zeros(cls, shape) -> "Tensor":
        return _wrap(np.zeros(shape, dtype=np.float32))

    @classmethod
    def ones(cls, shape) -> "Tensor":
        return _wrap(np.ones(shape, dtype=np.float32))

    @classmethod
    def full(cls, shape, value: float) -> "Tensor":
        return _wrap(np.full(shape, value, dtype=np.float32))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def _wrap(arr: np.ndarray) -> Tensor:
    """Adopt a freshly computed array without copying.

    float64 arrays stay float64: the gradient checker runs forward
    evaluations at lifted precision so its finite differences do not drown
    in float32 rounding noise.  Publicly constructed tensors are always
    float32.
    """
    t = Tensor.__new__(Tensor)
    dtype = np.float64 if arr.dtype == np.float64 else np.float32
    arr = np.ascontiguousarray(arr, dtype=dtype)
    if arr.ndim < 1 or arr.ndim > 4 or arr.size == 0:
        raise ShapeMismatchError(f"tensor rank must be 1..4 with all extents >= 1, got shape {tuple(arr.shape)}")
    arr.setflags(write=False)
    t._data = arr
    return t


class Tape:
    """Ordered record of the primitives executed in one forward evaluation.

    A tape belongs to exactly one evaluation and must not be reused across
    evaluations; replaying it backward visits ops in exact reverse execution
    order.  Records keep references to their output tensors, so everything a
    backward pass needs stays alive for the tape's lifetime.
    """

    __slots__ = ("_records", "_final")

    def __init__(self):
        self._records: list[tuple[Tensor, Callable]] = []
        self._final: Tensor | None = None

    def _record(self, out: Tensor, backward_fn: Callable) -> None:
        self._records.append((out, backward_fn))
        self._final = out

    @property
    def final_output(self) -> Tensor | None:
        """Output of the last recorded primitive."""
        return self._final

    def __len__(self) -> int:
        return len(self._records)


class _Accumulator:
    """Per-tensor gradient accumulation table used during backward()."""

    def __init__(self):
        self.table: dict[int, np.ndarray] = {}
        self.refs: dict[int, Tensor] = {}

    def add(self, t: Tensor, grad: np.ndarray) -> None:
        key = id(t)
        grad = np.asarray(grad, dtype=np.float32)
        if key in self.table:
            self.table[key] = self.table[key] + grad
        else:
            self.table[key] = grad.copy() if grad.base is not None or not grad.flags.owndata else grad
            self.refs[key] = t

    def get(self, t: Tensor) -> np.ndarray | None:
        return self.table.get(id(t))


class Gradients:
    """Gradient lookup for tensors that participated in a taped forward."""

    def __init__(self, acc: _Accumulator):
        self._table = acc.table
        self._refs = acc.refs

    def get(self, t: Tensor) -> Tensor:
        """Gradient for ``t``; zero for inputs the output never used."""
        arr = self._table.get(id(t))
        if arr is None:
            return Tensor.zeros(t.shape)
        return _wrap(arr)


def backward(tape: Tape, seed: Tensor) -> Gradients:
    """Reverse-mode accumulation over every primitive recorded on the tape.

    ``seed`` is the upstream gradient of the tape's final output (for a plain
    sum objective, a tensor of ones).
    """
    final = tape.final_output
    if final is None:
        raise ValueError("backward() on an empty tape")
    _require(
        seed.shape == final.shape,
        f"seed shape {seed.shape} does not match final output shape {final.shape}",
    )
    acc = _Accumulator()
    acc.add(final, seed.data)
    for out, fn in reversed(tape._records):
        g = acc.table.get(id(out))
        if g is None:
            continue  # branch never reached the final output
        fn(g, acc)
    return Gradients(acc)


def _check_finite(arr: np.ndarray, op: str) -> None:
    # Debug-build guard: finite inputs must never produce NaN/Inf.
    assert np.isfinite(arr).all(), f"{op} produced non-finite values"


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Standard matrix product of two rank-2 tensors."""
    _require(a.rank == 2 and b.rank == 2, f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    _require(a.shape[1] == b.shape[0], f"matmul inner extents differ: {a.shape} x {b.shape}")
    out = _wrap(a.data @ b.data)
    if tape is not None:
        def bwd(g, acc, a=a, b=b):
            acc.add(a, g @ b.data.T)
            acc.add(b, a.data.T @ g)
        tape._record(out, bwd)
    return out


def transpose2d(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Transpose of a rank-2 tensor."""
    _require(x.rank == 2, f"transpose2d needs a rank-2 tensor, got {x.shape}")
    out = _wrap(x.data.T)
    if tape is not None:
        def bwd(g, acc, x=x):
            acc.add(x, np.ascontiguousarray(g.T))
        tape._record(out, bwd)
    return out


def softmax_rows(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    _require(x.rank == 2, f"softmax_rows needs a rank-2 tensor, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = _wrap(y)
    if tape is not None:
        def bwd(g, acc, x=x, y=y):
            dot = (g * y).sum(axis=1, keepdims=True)
            acc.add(x, y * (g - dot))
        tape._record(out, bwd)
    return out


def sigmoid(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise logistic function, values in (0, 1)."""
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = _wrap(y)
    if tape is not None:
        def bwd(g, acc, x=x, y=y):
            acc.add(x, g * y * (1.0 - y))
        tape._record(out, bwd)
    return out


def conv1x1(x: Tensor, w: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Per-pixel linear map: out[o,h,w] = sum_i W[o,i] * X[i,h,w] + b[o]."""
    _require(x.rank == 3, f"conv1x1 input must be (C,H,W), got {x.shape}")
    _require(w.rank == 2, f"conv1x1 weight must be (C_out,C_in), got {w.shape}")
    _require(
        w.shape[1] == x.shape[0],
        f"conv1x1 channel mismatch: weight {w.shape} vs input {x.shape}",
    )
    _require(
        b.rank == 1 and b.shape[0] == w.shape[0],
        f"conv1x1 bias shape {b.shape} does not match weight {w.shape}",
    )
    out_arr = np.einsum("oi,ihw->ohw", w.data, x.data) + b.data[:, None, None]
    _check_finite(out_arr, "conv1x1")
    out = _wrap(out_arr)
    if tape is not None:
        def bwd(g, acc, x=x, w=w, b=b):
            acc.add(x, np.einsum("oi,ohw->ihw", w.data, g))
            acc.add(w, np.einsum("ohw,ihw->oi", g, x.data))
            acc.add(b, g.sum(axis=(1, 2)))
        tape._record(out, bwd)
    return out


def conv3x3(x: Tensor, w: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1 (same-size output)."""
    _require(x.rank == 3, f"conv3x3 input must be (C,H,W), got {x.shape}")
    _require(
        w.rank == 4 and w.shape[2] == 3 and w.shape[3] == 3,
        f"conv3x3 weight must be (C_out,C_in,3,3), got {w.shape}",
    )
    _require(
        w.shape[1] == x.shape[0],
        f"conv3x3 channel mismatch: weight {w.shape} vs input {x.shape}",
    )
    _require(
        b.rank == 1 and b.shape[0] == w.shape[0],
        f"conv3x3 bias shape {b.shape} does not match weight {w.shape}",
    )
    _, h, wid = x.shape
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    out_arr = np.zeros((w.shape[0], h, wid), dtype=np.result_type(x.data, w.data))
    for dy in range(3):
        for dx in range(3):
            out_arr += np.einsum("oi,ihw->ohw", w.data[:, :, dy, dx], xp[:, dy:dy + h, dx:dx + wid])
    out_arr += b.data[:, None, None]
    _check_finite(out_arr, "conv3x3")
    out = _wrap(out_arr)
    if tape is not None:
        def bwd(g, acc, x=x, w=w, b=b, xp=xp, h=h, wid=wid):
            gxp = np.zeros_like(xp)
            gw = np.zeros(w.shape, dtype=np.float32)
            for dy in range(3):
                for dx in range(3):
                    gxp[:, dy:dy + h, dx:dx + wid] += np.einsum("oi,ohw->ihw", w.data[:, :, dy, dx], g)
                    gw[:, :, dy, dx] = np.einsum("ohw,ihw->oi", g, xp[:, dy:dy + h, dx:dx + wid])
            acc.add(x, gxp[:, 1:1 + h, 1:1 + wid])
            acc.add(w, gw)
            acc.add(b, g.sum(axis=(1, 2)))
        tape._record(out, bwd)
    return out


def group_norm(
    x: Tensor,
    groups: int,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-5,
    tape: Tape | None = None,
) -> Tensor:
    """Normalize over channel groups and all spatial positions.

    Statistics use the population (biased) variance; ``gamma``/``beta`` are
    per-channel affine parameters.
    """
    _require(x.rank == 3, f"group_norm input must be (C,H,W), got {x.shape}")
    c, h, wid = x.shape
    if groups < 1 or c % groups != 0:
        raise ShapeMismatchError(f"groups={groups} does not divide channels={c}")
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    _require(
        gamma.rank == 1 and gamma.shape[0] == c and beta.rank == 1 and beta.shape[0] == c,
        f"gamma {gamma.shape} / beta {beta.shape} must be rank-1 of length {c}",
    )
    grouped = x.data.reshape(groups, c // groups, h, wid)
    mean = grouped.mean(axis=(1, 2, 3), keepdims=True)
    var = grouped.var(axis=(1, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = ((grouped - mean) * inv).reshape(c, h, wid)
    out_arr = gamma.data[:, None, None] * xhat + beta.data[:, None, None]
    _check_finite(out_arr, "group_norm")
    out = _wrap(out_arr)
    if tape is not None:
        def bwd(g, acc, x=x, gamma=gamma, beta=beta, xhat=xhat, inv=inv, groups=groups, c=c, h=h, wid=wid):
            acc.add(beta, g.sum(axis=(1, 2)))
            acc.add(gamma, (g * xhat).sum(axis=(1, 2)))
            dxhat = (g * gamma.data[:, None, None]).reshape(groups, c // groups, h, wid)
            xh = xhat.reshape(groups, c // groups, h, wid)
            m1 = dxhat.mean(axis=(1, 2, 3), keepdims=True)
            m2 = (dxhat * xh).mean(axis=(1, 2, 3), keepdims=True)
            dx = inv * (dxhat - m1 - xh * m2)
            acc.add(x, dx.reshape(c, h, wid))
        tape._record(out, bwd)
    return out


def global_avg_pool(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Per-channel mean over all spatial positions; output is (C, 1, 1)."""
    _require(x.rank == 3, f"global_avg_pool input must be (C,H,W), got {x.shape}")
    c, h, wid = x.shape
    out = _wrap(x.data.mean(axis=(1, 2)).reshape(c, 1, 1))
    if tape is not None:
        def bwd(g, acc, x=x, h=h, wid=wid):
            acc.add(x, np.broadcast_to(g / np.float32(h * wid), x.shape))
        tape._record(out, bwd)
    return out


def global_max_pool(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Per-channel spatial max; gradient routes to the first argmax position."""
    _require(x.rank == 3, f"global_max_pool input must be (C,H,W), got {x.shape}")
    c, h, wid = x.shape
    flat = x.data.reshape(c, h * wid)
    idx = flat.argmax(axis=1)
    out = _wrap(flat[np.arange(c), idx].reshape(c, 1, 1))
    if tape is not None:
        def bwd(g, acc, x=x, idx=idx, c=c, h=h, wid=wid):
            dx = np.zeros((c, h * wid), dtype=np.float32)
            dx[np.arange(c), idx] = g.reshape(c)
            acc.add(x, dx.reshape(c, h, wid))
        tape._record(out, bwd)
    return out


def flatten_spatial(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Reshape (C, H, W) to (C, H*W); column n maps to (n // W, n % W)."""
    _require(x.rank == 3, f"flatten_spatial input must be (C,H,W), got {x.shape}")
    c, h, wid = x.shape
    out = _wrap(x.data.reshape(c, h * wid))
    if tape is not None:
        def bwd(g, acc, x=x):
            acc.add(x, g.reshape(x.shape))
        tape._record(out, bwd)
    return out


def unflatten_spatial(y: Tensor, height: int, width: int, tape: Tape | None = None) -> Tensor:
    """Inverse of :func:`flatten_spatial`; requires N == height * width."""
    _require(y.rank == 2, f"unflatten_spatial input must be (C,N), got {y.shape}")
    _require(
        y.shape[1] == height * width,
        f"unflatten_spatial: N={y.shape[1]} != height*width={height}*{width}",
    )
    out = _wrap(y.data.reshape(y.shape[0], height, width))
    if tape is not None:
        def bwd(g, acc, y=y):
            acc.add(y, g.reshape(y.shape))
        tape._record(out, bwd)
    return out


def _broadcast_kind(a: Tensor, b: Tensor, op: str) -> bool:
    """True when b is (C,1,1) broadcasting over a's (C,H,W)."""
    if a.shape == b.shape:
        return False
    if a.rank == 3 and b.rank == 3 and b.shape == (a.shape[0], 1, 1):
        return True
    raise ShapeMismatchError(
        f"{op}: incompatible shapes {a.shape} and {b.shape} "
        "(only exact match or C,1,1 against C,H,W)"
    )


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise sum; b may be (C,1,1) against a's (C,H,W)."""
    broadcast = _broadcast_kind(a, b, "add")
    out = _wrap(a.data + b.data)
    if tape is not None:
        def bwd(g, acc, a=a, b=b, broadcast=broadcast):
            acc.add(a, g)
            acc.add(b, g.sum(axis=(1, 2), keepdims=True) if broadcast else g)
        tape._record(out, bwd)
    return out


def mul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise product; b may be (C,1,1) against a's (C,H,W)."""
    broadcast = _broadcast_kind(a, b, "mul")
    out = _wrap(a.data * b.data)
    if tape is not None:
        def bwd(g, acc, a=a, b=b, broadcast=broadcast):
            acc.add(a, g * b.data)
            gb = g * a.data
            acc.add(b, gb.sum(axis=(1, 2), keepdims=True) if broadcast else gb)
        tape._record(out, bwd)
    return out


def elementwise(op: str, a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Dispatch to :func:`add` or :func:`mul` by name."""
    if op == "add":
        return add(a, b, tape)
    if op == "mul":
        return mul(a, b, tape)
    raise ValueError(f"unknown elementwise op {op!r} (expected 'add' or 'mul')")


def scale(x: Tensor, s: Tensor, tape: Tape | None = None) -> Tensor:
    """Multiply a tensor by a learnable scalar held as a shape-(1,) tensor."""
    _require(s.rank == 1 and s.shape[0] == 1, f"scale factor must have shape (1,), got {s.shape}")
    out = _wrap(x.data * s.data[0])
    if tape is not None:
        def bwd(g, acc, x=x, s=s):
            acc.add(x, g * s.data[0])
            acc.add(s, np.array([(g * x.data).sum()], dtype=np.float32))
        tape._record(out, bwd)
    return out


def concat_channels(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Concatenate two (C, H, W) tensors along the channel axis."""
    _require(a.rank == 3 and b.rank == 3, f"concat_channels needs rank-3 operands, got {a.shape}, {b.shape}")
    _require(
        a.shape[1:] == b.shape[1:],
        f"concat_channels spatial extents differ: {a.shape} vs {b.shape}",
    )
    out = _wrap(np.concatenate([a.data, b.data], axis=0))
    if tape is not None:
        ca = a.shape[0]
        def bwd(g, acc, a=a, b=b, ca=ca):
            acc.add(a, g[:ca])
            acc.add(b, g[ca:])
        tape._record(out, bwd)
    return out
