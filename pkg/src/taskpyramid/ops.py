"""Differentiable primitive operations on rank-4 tensors.

Every function returns a new :class:`~taskpyramid.tensor.Tensor` whose tape
closure implements the exact vector-Jacobian product of the forward map.
All of them are pure: inputs are never mutated.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation
from .tensor import Tensor


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ContractViolation(f"{op}: operand shapes differ, {a.shape} vs {b.shape}")


# -- convolution --------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with per-output-channel bias.

    ``weight`` has shape (out_c, in_c, kh, kw) with odd kh, kw; ``bias`` has
    shape (1, out_c, 1, 1).  Output spatial dims follow
    floor((H + 2*padding - k)/stride) + 1.
    """
    n, ci, h, w = x.shape
    co, ci_w, kh, kw = weight.shape
    if ci != ci_w:
        raise ContractViolation(
            f"conv2d: input has {ci} channels (shape {x.shape}) but weight expects "
            f"{ci_w} (shape {weight.shape})"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractViolation(f"conv2d: kernel dims must be odd, got ({kh}, {kw})")
    if stride < 1 or padding < 0:
        raise ContractViolation(f"conv2d: invalid stride={stride} or padding={padding}")
    if bias.shape != (1, co, 1, 1):
        raise ContractViolation(f"conv2d: bias shape {bias.shape} != (1, {co}, 1, 1)")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ContractViolation(f"conv2d: kernel ({kh},{kw}) too large for input {x.shape}")

    w2 = weight.data.reshape(co, ci * kh * kw)

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        # pointwise fast path: a single batched matmul, no column buffer
        x2 = x.data.reshape(n, ci, h * w)
        out = np.matmul(w2, x2).reshape(n, co, h, w) + bias.data

        def vjp(g):
            g2 = g.reshape(n, co, h * w)
            db = g.sum(axis=(0, 2, 3)).reshape(1, co, 1, 1)
            dw = np.matmul(g2, x2.swapaxes(1, 2)).sum(axis=0).reshape(co, ci, 1, 1)
            dx = np.matmul(w2.T, g2).reshape(n, ci, h, w)
            return dx, dw, db

        return Tensor(out, parents=(x, weight, bias), vjp=vjp)

    if padding:
        xp = np.zeros((n, ci, h + 2 * padding, w + 2 * padding))
        xp[:, :, padding : padding + h, padding : padding + w] = x.data
    else:
        xp = x.data
    cols = np.empty((n, ci, kh, kw, oh, ow))
    for ky in range(kh):
        for kx in range(kw):
            cols[:, :, ky, kx] = xp[:, :, ky : ky + stride * oh : stride, kx : kx + stride * ow : stride]
    cols2 = cols.reshape(n, ci * kh * kw, oh * ow)
    out = np.matmul(w2, cols2).reshape(n, co, oh, ow) + bias.data

    def vjp(g):
        g2 = g.reshape(n, co, oh * ow)
        db = g.sum(axis=(0, 2, 3)).reshape(1, co, 1, 1)
        dw = np.matmul(g2, cols2.swapaxes(1, 2)).sum(axis=0).reshape(co, ci, kh, kw)
        dcols = np.matmul(w2.T, g2).reshape(n, ci, kh, kw, oh, ow)
        dxp = np.zeros((n, ci, h + 2 * padding, w + 2 * padding))
        for ky in range(kh):
            for kx in range(kw):
                dxp[:, :, ky : ky + stride * oh : stride, kx : kx + stride * ow : stride] += dcols[:, :, ky, kx]
        dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return dx, dw, db

    return Tensor(out, parents=(x, weight, bias), vjp=vjp)


# -- resampling ---------------------------------------------------------------


def _interp_matrix(n_in: int, factor: int) -> np.ndarray:
    """1-D bilinear interpolation matrix, half-pixel-center convention.

    Source coordinate of output sample o is (o + 0.5)/factor - 0.5, clamped to
    [0, n_in - 1]; each row holds the two blending weights and sums to one.
    """
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    a = np.zeros((n_out, n_in))
    np.add.at(a, (np.arange(n_out), i0), 1.0 - frac)
    np.add.at(a, (np.arange(n_out), i1), frac)
    return a


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Upsample spatial dims by an integer factor (half-pixel centers)."""
    if factor < 1:
        raise ContractViolation(f"bilinear_upsample: factor must be >= 1, got {factor}")
    if factor == 1:
        return scale(x, 1.0)  # identity node keeps gradients flowing
    _, _, h, w = x.shape
    ay = _interp_matrix(h, factor)
    ax = _interp_matrix(w, factor)
    tmp = np.matmul(ay, x.data)  # (n, c, fH, w)
    out = np.matmul(tmp, ax.T)  # (n, c, fH, fW)

    def vjp(g):
        dtmp = np.matmul(g, ax)
        dx = np.matmul(ay.T, dtmp)
        return (dx,)

    return Tensor(out, parents=(x,), vjp=vjp)


# -- shape plumbing -----------------------------------------------------------


def concat_channels(inputs: list[Tensor] | tuple[Tensor, ...]) -> Tensor:
    """Concatenate along the channel axis; batch and spatial dims must agree."""
    if not inputs:
        raise ContractViolation("concat_channels: need at least one input")
    ref = inputs[0].shape
    for t in inputs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ContractViolation(
                f"concat_channels: batch/spatial mismatch, {t.shape} vs {ref}"
            )
    out = np.concatenate([t.data for t in inputs], axis=1)
    sizes = [t.shape[1] for t in inputs]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(sizes)))

    return Tensor(out, parents=tuple(inputs), vjp=vjp)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Take the channel slice [start, stop)."""
    c = x.shape[1]
    if not (0 <= start < stop <= c):
        raise ContractViolation(f"slice_channels: bad range [{start}, {stop}) for {c} channels")
    out = x.data[:, start:stop]

    def vjp(g):
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = g
        return (dx,)

    return Tensor(out, parents=(x,), vjp=vjp)


def broadcast_hw(x: Tensor, h: int, w: int) -> Tensor:
    """Tile an (n, c, 1, 1) tensor over an h*w spatial grid."""
    if x.shape[2] != 1 or x.shape[3] != 1:
        raise ContractViolation(f"broadcast_hw: expected 1x1 spatial dims, got {x.shape}")
    out = np.broadcast_to(x.data, (x.shape[0], x.shape[1], h, w)).copy()

    def vjp(g):
        return (g.sum(axis=(2, 3), keepdims=True),)

    return Tensor(out, parents=(x,), vjp=vjp)


# -- elementwise --------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient at 0 is defined as 0
    out = np.where(mask, x.data, 0.0)

    def vjp(g):
        return (g * mask,)

    return Tensor(out, parents=(x,), vjp=vjp)


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return Tensor(out, parents=(x,), vjp=vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out = a.data + b.data

    def vjp(g):
        return g, g

    return Tensor(out, parents=(a, b), vjp=vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    out = a.data * b.data

    def vjp(g):
        return g * b.data, g * a.data

    return Tensor(out, parents=(a, b), vjp=vjp)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (not a differentiable operand)."""
    c = float(c)
    out = x.data * c

    def vjp(g):
        return (g * c,)

    return Tensor(out, parents=(x,), vjp=vjp)


_ELEMENTWISE = {"sigmoid": sigmoid, "relu": relu, "mul": mul, "add": add}


def elementwise(fn: str, x: Tensor, y: Tensor | None = None) -> Tensor:
    """Name-dispatched elementwise op: sigmoid/relu are unary, mul/add binary."""
    if fn not in _ELEMENTWISE:
        raise ContractViolation(f"elementwise: unknown fn {fn!r}")
    if fn in ("mul", "add"):
        if y is None:
            raise ContractViolation(f"elementwise: {fn} needs two operands")
        return _ELEMENTWISE[fn](x, y)
    if y is not None:
        raise ContractViolation(f"elementwise: {fn} takes one operand")
    return _ELEMENTWISE[fn](x)


# -- reductions and normalizers ----------------------------------------------


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, output shape (n, c, 1, 1)."""
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def vjp(g):
        return (np.broadcast_to(g / hw, x.shape).copy(),)

    return Tensor(out, parents=(x,), vjp=vjp)


def softmax_over_groups(x: Tensor, group_count: int) -> Tensor:
    """Softmax across ``group_count`` equal channel chunks.

    With channels N*C, the values at chunk positions {i*C + c} for
    i = 0..N-1 are exponent-normalized to sum to one at every
    (batch, c, y, x) position.  Stabilized by max subtraction.
    """
    n, ch, h, w = x.shape
    if group_count < 1 or ch % group_count != 0:
        raise ContractViolation(
            f"softmax_over_groups: {ch} channels not divisible into {group_count} groups"
        )
    c = ch // group_count
    z = x.data.reshape(n, group_count, c, h, w)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    out = s.reshape(n, ch, h, w)

    def vjp(g):
        gg = g.reshape(n, group_count, c, h, w)
        dot = (gg * s).sum(axis=1, keepdims=True)
        dx = s * (gg - dot)
        return (dx.reshape(n, ch, h, w),)

    return Tensor(out, parents=(x,), vjp=vjp)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, num_groups: int, eps: float = 1e-5) -> Tensor:
    """Per-sample group normalization with per-channel affine parameters."""
    n, c, h, w = x.shape
    if c % num_groups != 0:
        raise ContractViolation(f"group_norm: {c} channels not divisible by {num_groups} groups")
    if gamma.shape != (1, c, 1, 1) or beta.shape != (1, c, 1, 1):
        raise ContractViolation("group_norm: affine params must have shape (1, c, 1, 1)")
    m = (c // num_groups) * h * w
    grouped = x.data.reshape(n, num_groups, m)
    mean = grouped.mean(axis=2, keepdims=True)
    var = grouped.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((grouped - mean) * inv).reshape(n, c, h, w)
    out = gamma.data * xhat + beta.data

    def vjp(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        dbeta = g.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        dxhat = (g * gamma.data).reshape(n, num_groups, m)
        xh = xhat.reshape(n, num_groups, m)
        mean_d = dxhat.mean(axis=2, keepdims=True)
        mean_dx = (dxhat * xh).mean(axis=2, keepdims=True)
        dx = inv * (dxhat - mean_d - xh * mean_dx)
        return dx.reshape(n, c, h, w), dgamma, dbeta

    return Tensor(out, parents=(x, gamma, beta), vjp=vjp)


def mean_all(x: Tensor) -> Tensor:
    """Mean over every element, returned as a (1, 1, 1, 1) scalar tensor."""
    out = np.full((1, 1, 1, 1), x.data.mean())
    count = x.size

    def vjp(g):
        return (np.broadcast_to(g.reshape(()) / count, x.shape).copy(),)

    return Tensor(out, parents=(x,), vjp=vjp)


def sum_all(x: Tensor) -> Tensor:
    """Sum over every element, returned as a (1, 1, 1, 1) scalar tensor."""
    out = np.full((1, 1, 1, 1), x.data.sum())

    def vjp(g):
        return (np.broadcast_to(g.reshape(()), x.shape).copy(),)

    return Tensor(out, parents=(x,), vjp=vjp)
