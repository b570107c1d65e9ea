"""Differentiable operators over NCHW tensors.

Every op takes and returns :class:`Tensor` objects and, when a tape is
active and some input requires gradients, records a node whose backward
closure produces the input gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, record_op

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _check_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} expects a B×C×H×W tensor, got shape {x.shape}")


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(xd: np.ndarray, k: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    """Patch matrix of shape (B·Ho·Wo, k·k·C); columns ordered (ky, kx, c)."""
    B, C, H, W = xd.shape
    Ho = conv_output_size(H, k, stride, padding)
    Wo = conv_output_size(W, k, stride, padding)
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if k == 1:
        win = xd[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, C)
    else:
        win = sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 5, 1)).reshape(B * Ho * Wo, k * k * C)
    return cols, Ho, Wo


def _gemm_to_nchw(cols: np.ndarray, wmat: np.ndarray, B: int, Ho: int, Wo: int) -> np.ndarray:
    out2d = cols @ wmat.T
    return out2d.reshape(B, Ho, Wo, wmat.shape[0]).transpose(0, 3, 1, 2)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, computed as im2col + GEMM."""
    _check_4d(x, "conv2d")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d weight must be Cout×Cin×k×k, got {weight.shape}")
    B, C, H, W = x.shape
    O, Cw, k, _ = weight.shape
    if Cw != C:
        raise ShapeError(
            f"conv2d channel mismatch: input has {C} channels, weight expects {Cw} "
            f"(input {x.shape}, weight {weight.shape})"
        )
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d bias must have shape ({O},), got {bias.shape}")
    if k < 1 or stride < 1 or padding < 0:
        raise ValueError(f"invalid conv2d geometry k={k} stride={stride} padding={padding}")
    Ho = conv_output_size(H, k, stride, padding)
    Wo = conv_output_size(W, k, stride, padding)
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(
            f"conv2d output would be {Ho}×{Wo} for input {H}×{W}, k={k}, stride={stride}, padding={padding}"
        )

    cols, _, _ = _im2col(x.data, k, stride, padding)
    wmat = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1)).reshape(O, -1)
    out2d = cols @ wmat.T
    if bias is not None:
        out2d += bias.data
    out = np.ascontiguousarray(out2d.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def backward_fn(g):
        g2d = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, O)
        gw = None
        if weight.requires_grad:
            gw = np.ascontiguousarray((g2d.T @ cols).reshape(O, k, k, C).transpose(0, 3, 1, 2))
        gb = g2d.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = _conv_input_grad(g, g2d, weight.data, wmat, x.shape, stride, padding)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record_op("conv2d", inputs, out, backward_fn, stride=stride, padding=padding)


def _conv_input_grad(g, g2d, w, wmat, in_shape, stride, padding):
    B, C, H, W = in_shape
    O, _, k, _ = w.shape
    Ho, Wo = g.shape[2:]
    full_pad = k - 1 - padding
    if stride == 1 and full_pad >= 0 and Ho + 2 * full_pad - k + 1 == H:
        # correlation of the output grad with the flipped, transposed kernel
        wflip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 2, 3, 0)).reshape(C, -1)
        gcols, _, _ = _im2col(g, k, 1, full_pad)
        return np.ascontiguousarray(_gemm_to_nchw(gcols, wflip, B, H, W))
    Hp, Wp = H + 2 * padding, W + 2 * padding
    span_h, span_w = (Ho - 1) * stride + 1, (Wo - 1) * stride + 1
    gcols = (g2d @ wmat).reshape(B, Ho, Wo, k, k, C)
    gxp = np.zeros((B, Hp, Wp, C), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            gxp[:, i : i + span_h : stride, j : j + span_w : stride, :] += gcols[:, :, :, i, j, :]
    gx = gxp.transpose(0, 3, 1, 2)
    if padding:
        gx = gx[:, :, padding : padding + H, padding : padding + W]
    return np.ascontiguousarray(gx)


def maxpool2d_indices(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """2×2/stride-2 max pooling that also returns the argmax positions.

    Indices are flat row-major offsets into each channel's H×W plane; ties
    resolve to the smallest offset.
    """
    _check_4d(x, "maxpool2d_indices")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2d_indices needs even spatial dims, got {H}×{W}")
    h, w = H // 2, W // 2
    win = x.data.reshape(B, C, h, 2, w, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, h, w, 4)
    local = win.argmax(axis=-1)
    values = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(h)[:, None] + local // 2
    cols = 2 * np.arange(w)[None, :] + local % 2
    indices = (rows * W + cols).astype(np.int64)

    def backward_fn(g):
        return (_scatter(g, indices, H, W),)

    out = record_op("maxpool2d_indices", (x,), np.ascontiguousarray(values), backward_fn, indices=indices)
    return out, indices


def _scatter(vals: np.ndarray, indices: np.ndarray, H: int, W: int) -> np.ndarray:
    B, C = vals.shape[:2]
    out = np.zeros((B, C, H * W), dtype=vals.dtype)
    np.put_along_axis(out, indices.reshape(B, C, -1), vals.reshape(B, C, -1), axis=2)
    return out.reshape(B, C, H, W)


def maxunpool2d(x: Tensor, indices: np.ndarray, out_hw: tuple[int, int]) -> Tensor:
    """Place each value at its remembered argmax position; everything else is 0."""
    _check_4d(x, "maxunpool2d")
    indices = np.asarray(indices)
    if indices.shape != x.shape:
        raise ShapeError(f"maxunpool2d indices shape {indices.shape} != input shape {x.shape}")
    H, W = out_hw
    if indices.size and (indices.min() < 0 or indices.max() >= H * W):
        raise IndexError(f"maxunpool2d index out of bounds for output plane {H}×{W}")
    B, C = x.shape[:2]
    flat_idx = indices.reshape(B, C, -1)

    def backward_fn(g):
        return (np.take_along_axis(g.reshape(B, C, H * W), flat_idx, axis=2).reshape(x.shape),)

    return record_op("maxunpool2d", (x,), _scatter(x.data, indices, H, W), backward_fn, out_hw=(H, W))


@dataclass
class RunningStats:
    """Per-channel running mean/variance kept by a batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: RunningStats | None = None,
    mode: str = "train",
    eps: float = BN_EPS,
) -> Tensor:
    _check_4d(x, "batchnorm2d")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm2d affine params must have shape ({C},), got {gamma.shape} and {beta.shape}")
    g_ = gamma.data.reshape(1, C, 1, 1)
    if mode == "train":
        n = B * H * W
        if n < 2:
            raise ShapeError("batchnorm2d in train mode needs at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if state is not None:
            m = state.momentum
            state.mean[...] = (1 - m) * state.mean + m * mean
            state.var[...] = (1 - m) * state.var + m * var * (n / (n - 1))
    elif mode == "eval":
        if state is None:
            raise ValueError("batchnorm2d eval mode requires running stats")
        mean, var = state.mean.astype(x.dtype), state.var.astype(x.dtype)
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(1, C, 1, 1)
    xhat = (x.data - mean.reshape(1, C, 1, 1)) * inv_std
    out = xhat * g_ + beta.data.reshape(1, C, 1, 1)

    def backward_fn(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * g_
        if mode == "train":
            gx = inv_std * (
                gxhat
                - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxhat * inv_std
        return gx, ggamma, gbeta

    return record_op("batchnorm2d", (x, gamma, beta), out, backward_fn, mode=mode, eps=eps)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record_op("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clipped so results stay strictly inside (0, 1)."""
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    fi = np.finfo(x.dtype)
    np.clip(s, fi.tiny, 1.0 - fi.epsneg, out=s)
    return record_op("sigmoid", (x,), s, lambda g: (g * s * (1 - s),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def upsample_nearest2x(x: Tensor) -> Tensor:
    _check_4d(x, "upsample_nearest2x")
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward_fn(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return record_op("upsample_nearest2x", (x,), out, backward_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_4d(a, "concat_channels")
    _check_4d(b, "concat_channels")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels needs matching batch and spatial dims, got {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return record_op("concat_channels", (a, b), out, lambda g: (g[:, :ca], g[:, ca:]))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return record_op("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    return record_op("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return record_op("sum", (x,), np.asarray(x.data.sum(), dtype=x.dtype), lambda g: (np.broadcast_to(g, shape),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return record_op(
        "mean", (x,), np.asarray(x.data.mean(), dtype=x.dtype), lambda g: (np.broadcast_to(g / n, shape),)
    )


__all__ = [
    "BN_EPS",
    "BN_MOMENTUM",
    "RunningStats",
    "activation",
    "add",
    "as_tensor",
    "batchnorm2d",
    "concat_channels",
    "conv2d",
    "conv_output_size",
    "maxpool2d_indices",
    "maxunpool2d",
    "mean_all",
    "mul",
    "relu",
    "sigmoid",
    "sum_all",
    "upsample_nearest2x",
]
