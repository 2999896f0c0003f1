"""Differentiable primitives used by the Hyp-Net forward pass.

Image operands are ``[N, C, H, W]`` batches; the single-sample ``[C, H, W]``
form is accepted everywhere and returned in the same form.
"""

from __future__ import annotations

import numpy as np
from scipy import special

from .tensor import ShapeError, Tensor

KERNEL = 3
BN_EPS = 1e-5
IN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape(1, *x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected [C,H,W] or [N,C,H,W], got shape {x.shape}")
    return x, False


def conv_output_size(size: int, stride: int, dilation: int, padding: int, kernel: int = KERNEL) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _tap_slices(ho: int, wo: int, stride: int, dilation: int):
    for ki in range(KERNEL):
        for kj in range(KERNEL):
            r0, c0 = ki * dilation, kj * dilation
            yield (
                slice(r0, r0 + stride * (ho - 1) + 1, stride),
                slice(c0, c0 + stride * (wo - 1) + 1, stride),
            )


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """3x3 cross-correlation with bias, computed as a single matmul over im2col taps."""
    xb, squeeze = _batched(x)
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError(f"invalid conv geometry stride={stride} dilation={dilation} padding={padding}")
    n, c, h, wd = xb.shape
    if w.ndim != 4 or w.shape[2:] != (KERNEL, KERNEL):
        raise ShapeError(f"conv weight must be [C_out, C_in, 3, 3], got {w.shape}")
    c_out = w.shape[0]
    if w.shape[1] != c:
        raise ShapeError(f"conv weight expects {w.shape[1]} input channels, input has {c}")
    if b.shape != (c_out,):
        raise ShapeError(f"conv bias must have shape ({c_out},), got {b.shape}")
    ho = conv_output_size(h, stride, dilation, padding)
    wo = conv_output_size(wd, stride, dilation, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {h}x{wd} too small for this convolution")

    xp = np.pad(xb.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xb.data
    xt = xp.transpose(1, 0, 2, 3)
    taps = list(_tap_slices(ho, wo, stride, dilation))
    # columns laid out [C*9, N*Ho*Wo]; channel-major keeps the col2im scatter contiguous
    cols = np.stack([xt[:, :, rs, cs] for rs, cs in taps], axis=1).reshape(c * KERNEL * KERNEL, -1)
    wmat = w.data.reshape(c_out, -1)
    out = (wmat @ cols).reshape(c_out, n, ho, wo) + b.data.reshape(c_out, 1, 1, 1)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    hp, wp = xp.shape[2:]

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(c_out, -1)
        dw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        db = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
        dx = None
        if xb.requires_grad:
            dcols = (wmat.T @ g2).reshape(c, KERNEL * KERNEL, n, ho, wo)
            dxt = np.zeros((c, n, hp, wp), dtype=g.dtype)
            for k, (rs, cs) in enumerate(taps):
                dxt[:, :, rs, cs] += dcols[:, k]
            dx = dxt.transpose(1, 0, 2, 3)
            if padding:
                dx = dx[:, :, padding : padding + h, padding : padding + wd]
            dx = np.ascontiguousarray(dx)
        return dx, dw, db

    y = Tensor._from_op(out, (xb, w, b), backward, "conv2d")
    return y.reshape(y.shape[1:]) if squeeze else y


def conv2d_direct(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, dilation: int = 1, padding: int = 0) -> np.ndarray:
    """Loop-based reference convolution on a single ``[C, H, W]`` array."""
    c, h, wd = x.shape
    c_out = w.shape[0]
    if w.shape[1] != c:
        raise ShapeError(f"conv weight expects {w.shape[1]} input channels, input has {c}")
    ho = conv_output_size(h, stride, dilation, padding)
    wo = conv_output_size(wd, stride, dilation, padding)
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    out = np.empty((c_out, ho, wo), dtype=np.result_type(x, w))
    for i in range(ho):
        for j in range(wo):
            r, q = i * stride, j * stride
            window = xp[:, r : r + dilation * (KERNEL - 1) + 1 : dilation, q : q + dilation * (KERNEL - 1) + 1 : dilation]
            out[:, i, j] = np.tensordot(w, window, axes=([1, 2, 3], [0, 1, 2])) + b
    return out


def fully_connected(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``out = x @ w.T + b`` for ``x`` of shape ``[N_in]`` or ``[B, N_in]``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"fully_connected: input width {x.shape[-1]} vs weight {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"fully_connected: bias {b.shape} vs weight {w.shape}")
    if x.ndim == 1:
        return fully_connected(x.reshape(1, -1), w, b).reshape(w.shape[0])
    xd, wd = x.data, w.data

    def backward(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return Tensor._from_op(xd @ wd.T + b.data, (x, w, b), backward, "fc")


# python floats, so numpy scalar promotion never widens float32 operands
_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def gelu(x: Tensor) -> Tensor:
    a = x.data
    cdf = 0.5 * (1.0 + special.erf(a / _SQRT2))
    cdf = cdf.astype(a.dtype, copy=False)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a * a)
        return (g * (cdf + a * pdf),)

    return Tensor._from_op(a * cdf, (x,), backward, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    s = special.expit(x.data).astype(x.dtype, copy=False)
    return Tensor._from_op(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "gelu":
        return gelu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: ``[N,C,H,W] -> [N,C]`` (or ``[C,H,W] -> [C]``)."""
    if x.ndim == 3:
        return x.mean(axis=(1, 2))
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 3-D or 4-D input, got {x.shape}")
    return x.mean(axis=(2, 3))


def _standardize(x: Tensor, axes: tuple[int, ...], eps: float, mean=None, var=None) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Return ``(x - mean) / sqrt(var + eps)`` with statistics over ``axes``.

    When ``mean``/``var`` are supplied they are treated as constants.
    """
    a = x.data
    use_batch = mean is None
    if use_batch:
        mean = a.mean(axis=axes, keepdims=True)
        var = a.var(axis=axes, keepdims=True)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(a.dtype, copy=False)
    xhat = ((a - mean) * inv_std).astype(a.dtype, copy=False)
    m = int(np.prod([a.shape[i] for i in axes]))

    def backward(g):
        if not use_batch:
            return (g * inv_std,)
        g_sum = g.sum(axis=axes, keepdims=True)
        gx_sum = (g * xhat).sum(axis=axes, keepdims=True)
        return ((inv_std / m) * (m * g - g_sum - xhat * gx_sum),)

    return Tensor._from_op(xhat, (x,), backward, "standardize"), mean, var


def _channel_view(p: Tensor, ndim: int) -> Tensor:
    return p.reshape(1, -1, *([1] * (ndim - 2)))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mode: str,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Batch normalization over ``[N, C, H, W]`` (or ``[N, C]``).

    Train mode normalizes with batch statistics and updates the running
    buffers in place; eval mode normalizes with the running buffers.
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm expects [N,C] or [N,C,H,W], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm parameters must have shape ({c},)")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batch_norm in train mode needs a batch of at least 2 samples")
        xhat, mean, var = _standardize(x, axes, eps)
        m = x.data.size // c
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(c) * (m / max(m - 1, 1))
    elif mode == "eval":
        shape = (1, c) + (1,) * (x.ndim - 2)
        xhat, _, _ = _standardize(
            x, axes, eps, mean=running_mean.reshape(shape).astype(x.dtype), var=running_var.reshape(shape).astype(x.dtype)
        )
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return xhat * _channel_view(gamma, x.ndim) + _channel_view(beta, x.ndim)


def instance_norm(x: Tensor, eps: float = IN_EPS) -> Tensor:
    """Per-sample, per-channel normalization over the spatial extent (no affine)."""
    xb, squeeze = _batched(x)
    if xb.shape[2] * xb.shape[3] < 2:
        raise ValueError("instance_norm needs at least 2 spatial positions")
    y, _, _ = _standardize(xb, (2, 3), eps)
    return y.reshape(y.shape[1:]) if squeeze else y


def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def l2_normalize(d: Tensor, axis: int = -1) -> Tensor:
    a = d.data
    norm = np.sqrt((a * a).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise ValueError("cannot normalize a zero-norm descriptor")
    y = a / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return Tensor._from_op(y, (d,), backward, "l2_normalize")


def flatten(x: Tensor) -> Tensor:
    """Flatten everything but the batch axis."""
    return x.reshape(x.shape[0], -1)
