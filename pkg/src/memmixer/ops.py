"""The differentiable operation set.

Each op validates shapes, computes its result with numpy, guards against
non-finite output, and (when a tape is active) records an adjoint closure.
The set is deliberately small: matrix product, GELU, LayerNorm, the
concat/slice/transpose/mean plumbing that token shuffling needs, and a few
elementwise helpers for losses.

``matmul``/``linear`` honour transpose flags so stored weight matrices can
keep their natural orientation without materialising transposed copies, and
they feed the multiply-accumulate counter used for complexity reports.

Adjoint closures insert freshly-allocated gradient arrays with
``accumulate_raw`` (no copy); only pass-through adjoints that would alias a
shared upstream buffer go through the copying ``accumulate``.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from . import tensor as _t
from .errors import ShapeError
from .tensor import Tensor, accumulate, accumulate_raw, active_tape

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)
_isfinite = math.isfinite

LN_EPS = 1e-5


class MacTally:
    """Accumulates multiply-accumulate counts for one measurement window."""

    __slots__ = ("count",)

    def __init__(self):
        self.count = 0


_MAC_STACK: list = []


@contextmanager
def count_macs():
    """Count matmul multiply-accumulates executed inside the block."""
    tally = MacTally()
    _MAC_STACK.append(tally)
    try:
        yield tally
    finally:
        _MAC_STACK.remove(tally)


def _tally_macs(m: int, k: int, n: int) -> None:
    macs = m * k * n
    for t in _MAC_STACK:
        t.count += macs


def _finish(out_arr: np.ndarray, opname: str) -> Tensor:
    if _t._FINITE_CHECKS and not _isfinite(float(out_arr.sum())):
        _t.assert_finite(out_arr, opname)  # classify and raise
    return Tensor.wrap(out_arr)


def matmul(a: Tensor, b: Tensor, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    """Matrix product, optionally transposing either operand in place."""
    am = a.data.T if transpose_a else a.data
    bm = b.data.T if transpose_b else b.data
    if am.shape[1] != bm.shape[0]:
        raise ShapeError(
            f"matmul: inner extents differ: {am.shape} x {bm.shape}"
            f" (operands {a.data.shape} and {b.data.shape})"
        )
    if _MAC_STACK:
        _tally_macs(am.shape[0], am.shape[1], bm.shape[1])
    out = _finish(am @ bm, "matmul")
    tape = active_tape()
    if tape is not None:
        def adjoint(dy, adj, _a=a, _b=b, _am=am, _bm=bm):
            da = dy @ _bm.T
            db = _am.T @ dy
            accumulate_raw(adj, _a, da.T if transpose_a else da)
            accumulate_raw(adj, _b, db.T if transpose_b else db)

        tape.record(out, adjoint)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor, transpose_w: bool = False) -> Tensor:
    """Affine map ``x @ w (+ row bias)``; fused so hot paths stay short."""
    wm = w.data.T if transpose_w else w.data
    xd = x.data
    if xd.shape[1] != wm.shape[0]:
        raise ShapeError(
            f"linear: input {xd.shape} does not match weight {wm.shape}"
        )
    if b.data.shape != (1, wm.shape[1]):
        raise ShapeError(
            f"linear: bias {b.data.shape} must be (1, {wm.shape[1]})"
        )
    if _MAC_STACK:
        _tally_macs(xd.shape[0], xd.shape[1], wm.shape[1])
    out_arr = xd @ wm
    out_arr += b.data
    out = _finish(out_arr, "linear")
    tape = active_tape()
    if tape is not None:
        def adjoint(dy, adj, _x=x, _w=w, _b=b, _xd=xd, _wm=wm):
            accumulate_raw(adj, _x, dy @ _wm.T)
            dw = _xd.T @ dy
            accumulate_raw(adj, _w, dw.T if transpose_w else dw)
            accumulate_raw(adj, _b, dy.sum(axis=0, keepdims=True))

        tape.record(out, adjoint)
    return out


def mlp2(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
         transpose_io: bool = False) -> Tensor:
    """Fused two-layer MLP with a GELU between: ``gelu(x @ w1^T + b1) @ w2^T + b2``.

    Weights are stored (out, in) as everywhere else.  With ``transpose_io``
    the MLP runs over the transposed input and the result is transposed
    back, which is exactly the token-mixing data path.  Fusing the five
    primitive steps into one tape record keeps the per-clip op count low;
    the adjoint is the straightforward chain of the pieces.
    """
    xd = x.data.T if transpose_io else x.data
    w1d, w2d = w1.data, w2.data
    if xd.shape[1] != w1d.shape[1]:
        raise ShapeError(f"mlp2: input {xd.shape} does not match w1 {w1d.shape}")
    if w2d.shape[1] != w1d.shape[0]:
        raise ShapeError(f"mlp2: w2 {w2d.shape} does not match hidden {w1d.shape[0]}")
    if b1.data.shape != (1, w1d.shape[0]) or b2.data.shape != (1, w2d.shape[0]):
        raise ShapeError(
            f"mlp2: biases {b1.data.shape}/{b2.data.shape} must be"
            f" (1, {w1d.shape[0]})/(1, {w2d.shape[0]})"
        )
    if _MAC_STACK:
        _tally_macs(xd.shape[0], xd.shape[1], w1d.shape[0])
        _tally_macs(xd.shape[0], w1d.shape[0], w2d.shape[0])
    z1 = xd @ w1d.T
    z1 += b1.data
    cdf = erf(z1 * _INV_SQRT2)
    cdf += 1.0
    cdf *= 0.5
    h = z1 * cdf
    y = h @ w2d.T
    y += b2.data
    out = _finish(y.T if transpose_io else y, "mlp2")
    tape = active_tape()
    if tape is not None:
        def adjoint(dy, adj, _x=x, _w1=w1, _b1=b1, _w2=w2, _b2=b2,
                    _xd=xd, _z1=z1, _cdf=cdf, _h=h):
            if transpose_io:
                dy = dy.T
            accumulate_raw(adj, _w2, dy.T @ _h)
            accumulate_raw(adj, _b2, dy.sum(axis=0, keepdims=True))
            dz = dy @ _w2.data
            pdf = np.exp(-0.5 * _z1 * _z1) * _INV_SQRT2PI
            dz *= _cdf + _z1 * pdf
            accumulate_raw(adj, _w1, dz.T @ _xd)
            accumulate_raw(adj, _b1, dz.sum(axis=0, keepdims=True))
            dx = dz @ _w1.data
            accumulate_raw(adj, _x, dx.T if transpose_io else dx)

        tape.record(out, adjoint)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a (1, n) row broadcast over rows."""
    ash, bsh = a.data.shape, b.data.shape
    row_broadcast = bsh != ash and bsh == (1, ash[1])
    if bsh != ash and not row_broadcast:
        raise ShapeError(f"add: shapes {ash} and {bsh} are incompatible")
    out = _finish(a.data + b.data, "add")
    tape = active_tape()
    if tape is not None:
        def adjoint(dy, adj, _a=a, _b=b):
            accumulate(adj, _a, dy)
            if row_broadcast:
                accumulate_raw(adj, _b, dy.sum(axis=0, keepdims=True))
            else:
                accumulate(adj, _b, dy)

        tape.record(out, adjoint)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub: shapes {a.data.shape} and {b.data.shape} differ")
    out = _finish(a.data - b.data, "sub")
    tape = active_tape()
    if tape is not None:
        def adjoint(dy, adj, _a=a, _b=b):
            accumulate(adj, _a, dy)
            accumulate_raw(adj, _b, -dy)

        tape.record(out, adjoint)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} differ")
    out = _finish(a.data * b.data, "mul")
    tape = active_tape()
    if tape is not None:
        def adjoint(dy, adj, _a=a, _b=b):
            accumulate_raw(adj, _a, dy * _b.data)
            accumulate_raw(adj, _b, dy * _a.data)

        tape.record(out, adjoint)
    return out


def scale(x: Tensor, s: float) -> Tensor:
    """Multiply by a (non-learnable) scalar constant."""
    s = float(s)
    out = _finish(x.data * s, "scale")
    tape = active_tape()
    if tape is not None:
        def adjoint(dy, adj, _x=x):
            accumulate_raw(adj, _x, dy * s)

        tape.record(out, adjoint)
    return out


def gelu(x: Tensor) -> Tensor:
    """Exact GELU: ``x * Phi(x)`` with Phi the standard normal CDF."""
    xd = x.data
    cdf = erf(xd * _INV_SQRT2)
    cdf += 1.0
    cdf *= 0.5
    out = _finish(xd * cdf, "gelu")
    tape = active_tape()
    if tape is not None:
        def adjoint(dy, adj, _x=x, _xd=xd, _cdf=cdf):
            pdf = np.exp(-0.5 * _xd * _xd) * _INV_SQRT2PI
            accumulate_raw(adj, _x, dy * (_cdf + _xd * pdf))

        tape.record(out, adjoint)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Per-row normalization over the channel axis, then affine gamma/beta.

    Uses the population (biased) variance.  ``gamma``/``beta`` are (1, C)
    rows matching the channel extent.
    """
    xd = x.data
    c = xd.shape[1]
    if gamma.data.shape != (1, c) or beta.data.shape != (1, c):
        raise ShapeError(
            f"layer_norm: gamma {gamma.data.shape} / beta {beta.data.shape}"
            f" must be (1, {c})"
        )
    inv_c = 1.0 / c
    mu = xd.sum(axis=1, keepdims=True)
    mu *= inv_c
    xc = xd - mu
    var = (xc * xc).sum(axis=1, keepdims=True)
    var *= inv_c
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc
    xhat *= inv
    out = _finish(xhat * gamma.data + beta.data, "layer_norm")
    tape = active_tape()
    if tape is not None:
        def adjoint(dy, adj, _x=x, _g=gamma, _b=beta, _xhat=xhat, _inv=inv,
                    _inv_c=inv_c):
            accumulate_raw(adj, _g, (dy * _xhat).sum(axis=0, keepdims=True))
            accumulate_raw(adj, _b, dy.sum(axis=0, keepdims=True))
            dxhat = dy * _g.data
            m1 = dxhat.sum(axis=1, keepdims=True)
            m1 *= _inv_c
            m2 = (dxhat * _xhat).sum(axis=1, keepdims=True)
            m2 *= _inv_c
            dxhat -= m1
            dxhat -= _xhat * m2
            dxhat *= _inv
            accumulate_raw(adj, _x, dxhat)

        tape.record(out, adjoint)
    return out


def concat(tensors, axis: int) -> Tensor:
    """Join along ``axis`` (0 or 1); the adjoint splits the gradient back."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    if axis not in (0, 1):
        raise ShapeError(f"concat: axis must be 0 or 1, got {axis}")
    other = 1 - axis
    ref = tensors[0].data.shape[other]
    for t in tensors[1:]:
        if t.data.shape[other] != ref:
            raise ShapeError(
                f"concat: extent mismatch on axis {other}: "
                f"{[t.data.shape for t in tensors]}"
            )
    out = _finish(np.concatenate([t.data for t in tensors], axis=axis), "concat")
    tape = active_tape()
    if tape is not None:
        extents = [t.data.shape[axis] for t in tensors]

        def adjoint(dy, adj, _parts=tensors, _ext=extents):
            # disjoint views of dy, which this closure now exclusively owns
            ofs = 0
            for t, n in zip(_parts, _ext):
                if axis == 0:
                    accumulate_raw(adj, t, dy[ofs:ofs + n, :])
                else:
                    accumulate_raw(adj, t, dy[:, ofs:ofs + n])
                ofs += n

        tape.record(out, adjoint)
    return out


def slice_(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous range along ``axis``; the adjoint scatters back into zeros."""
    if axis not in (0, 1):
        raise ShapeError(f"slice: axis must be 0 or 1, got {axis}")
    extent = x.data.shape[axis]
    if not (0 <= start < stop <= extent):
        raise ShapeError(
            f"slice: range [{start}, {stop}) out of bounds for extent {extent}"
        )
    piece = x.data[start:stop, :] if axis == 0 else x.data[:, start:stop]
    out = _finish(piece, "slice")
    tape = active_tape()
    if tape is not None:
        def adjoint(dy, adj, _x=x):
            dx = np.zeros_like(_x.data)
            if axis == 0:
                dx[start:stop, :] = dy
            else:
                dx[:, start:stop] = dy
            accumulate_raw(adj, _x, dx)

        tape.record(out, adjoint)
    return out


def transpose2d(x: Tensor) -> Tensor:
    out = _finish(x.data.T, "transpose2d")
    tape = active_tape()
    if tape is not None:
        def adjoint(dy, adj, _x=x):
            accumulate_raw(adj, _x, dy.T)

        tape.record(out, adjoint)
    return out


def mean(x: Tensor, axis: int) -> Tensor:
    """Mean along one axis, keeping the reduced axis as extent 1."""
    if axis not in (0, 1):
        raise ShapeError(f"mean: axis must be 0 or 1, got {axis}")
    n = x.data.shape[axis]
    out_arr = x.data.sum(axis=axis, keepdims=True)
    out_arr *= 1.0 / n
    out = _finish(out_arr, "mean")
    tape = active_tape()
    if tape is not None:
        def adjoint(dy, adj, _x=x):
            accumulate_raw(adj, _x, np.repeat(dy * (1.0 / n), n, axis=axis))

        tape.record(out, adjoint)
    return out


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries as a (1, 1) scalar tensor."""
    out = _finish(x.data.sum(keepdims=True).reshape(1, 1), "sum_all")
    tape = active_tape()
    if tape is not None:
        def adjoint(dy, adj, _x=x):
            accumulate_raw(adj, _x, np.full_like(_x.data, dy[0, 0]))

        tape.record(out, adjoint)
    return out
