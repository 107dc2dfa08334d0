"""Numerical kernels: convolution, pooling, activations, affine maps, softmax.

Tensors are plain ``numpy.ndarray`` objects of dtype float32, row-major,
channel-first. Every kernel accepts either a single example (``[C, H, W]`` or
``[D]``) or a batch (``[N, C, H, W]`` or ``[N, D]``) and returns the same rank
it was given. Reductions accumulate in float64 and round back to float32.

Convolution is correlation (no kernel flip).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class DimensionError(ValueError):
    """Raised when tensor extents are incompatible; the message names the axis."""


@dataclass(frozen=True)
class ConvParams:
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be non-negative, got {self.padding}")

    def out_extent(self, size: int, kernel: int) -> int:
        return (size + 2 * self.padding - kernel) // self.stride + 1


def _as_batch(x: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise DimensionError(f"expected rank {rank} or {rank + 1} tensor, got shape {x.shape}")


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    # xp: [N, C, Hp, Wp] -> [N, C*k*k, oh*ow]
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, oh * ow)


def _check_conv(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, params: ConvParams):
    if weights.ndim != 4:
        raise DimensionError(f"weights must be [C_out, C_in, k, k], got shape {weights.shape}")
    c_out, c_in, kh, kw = weights.shape
    if kh != kw:
        raise DimensionError(f"kernel height {kh} != kernel width {kw}")
    if x.shape[1] != c_in:
        raise DimensionError(
            f"input channel axis has extent {x.shape[1]} but weights expect C_in={c_in}"
        )
    if bias.shape != (c_out,):
        raise DimensionError(f"bias axis has extent {bias.shape}, expected ({c_out},)")
    h, w = x.shape[2:]
    oh, ow = params.out_extent(h, kh), params.out_extent(w, kw)
    if oh < 1:
        raise DimensionError(f"height axis: input {h} with kernel {kh} leaves no output rows")
    if ow < 1:
        raise DimensionError(f"width axis: input {w} with kernel {kw} leaves no output columns")
    return c_out, kh, oh, ow


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
                   params: ConvParams = ConvParams()) -> np.ndarray:
    xb, single = _as_batch(np.asarray(x), 3)
    c_out, k, oh, ow = _check_conv(xb, weights, bias, params)
    cols = _im2col(_pad(xb, params.padding), k, params.stride, oh, ow)
    w2 = weights.reshape(c_out, -1).astype(np.float64)
    # broadcast matmul runs one gemm per example, so results do not depend on batch size
    out = np.matmul(w2, cols.astype(np.float64))
    out += bias.astype(np.float64)[:, None]
    out = out.reshape(xb.shape[0], c_out, oh, ow).astype(DTYPE)
    return out[0] if single else out


def conv2d_backward(x: np.ndarray, weights: np.ndarray, params: ConvParams,
                    upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d_forward` w.r.t. input, weights and bias."""
    xb, single = _as_batch(np.asarray(x), 3)
    gb, _ = _as_batch(np.asarray(upstream), 3)
    c_out, k, oh, ow = _check_conv(xb, weights, np.zeros(weights.shape[0], DTYPE), params)
    n = xb.shape[0]
    if gb.shape != (n, c_out, oh, ow):
        raise DimensionError(
            f"upstream gradient has shape {gb.shape[1:]}, expected {(c_out, oh, ow)}"
        )
    s, p = params.stride, params.padding
    cols = _im2col(_pad(xb, p), k, s, oh, ow).astype(np.float64)
    g = gb.reshape(n, c_out, oh * ow).astype(np.float64)

    grad_w = np.einsum("nop,nqp->oq", g, cols).reshape(weights.shape)
    grad_b = g.sum(axis=(0, 2))

    w2 = weights.reshape(c_out, -1).astype(np.float64)
    gcols = np.matmul(w2.T, g).reshape(n, xb.shape[1], k, k, oh, ow)
    hp, wp = xb.shape[2] + 2 * p, xb.shape[3] + 2 * p
    gxp = np.zeros((n, xb.shape[1], hp, wp), np.float64)
    for u in range(k):
        for v in range(k):
            gxp[:, :, u : u + s * oh : s, v : v + s * ow : s] += gcols[:, :, u, v]
    gx = gxp[:, :, p : hp - p, p : wp - p].astype(DTYPE)
    return (gx[0] if single else gx), grad_w.astype(DTYPE), grad_b.astype(DTYPE)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(DTYPE, copy=False)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return np.where(x > 0, upstream, 0).astype(DTYPE, copy=False)


def maxpool_forward(x: np.ndarray, window: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Max pooling; returns ``(out, argmax)`` where argmax indexes the flattened window."""
    xb, single = _as_batch(np.asarray(x), 3)
    h, w = xb.shape[2:]
    if window > h:
        raise DimensionError(f"height axis: pool window {window} exceeds input extent {h}")
    if window > w:
        raise DimensionError(f"width axis: pool window {window} exceeds input extent {w}")
    oh, ow = (h - window) // stride + 1, (w - window) // stride + 1
    win = sliding_window_view(xb, (window, window), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    flat = win.reshape(*win.shape[:4], window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    if single:
        return out[0], arg[0]
    return out, arg


def maxpool_backward(input_shape: tuple, argmax: np.ndarray, window: int, stride: int,
                     upstream: np.ndarray) -> np.ndarray:
    single = len(input_shape) == 3
    arg = argmax[None] if single else argmax
    g = upstream[None] if single else upstream
    shape = (1, *input_shape) if single else tuple(input_shape)
    oh, ow = arg.shape[2:]
    dx = np.zeros(shape, DTYPE)
    for u in range(window):
        for v in range(window):
            hit = arg == u * window + v
            dx[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride] += np.where(hit, g, 0)
    return dx[0] if single else dx


def affine_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``x @ weights.T + bias`` with weights shaped ``[out, in]``."""
    if x.shape[-1] != weights.shape[1]:
        raise DimensionError(
            f"feature axis has extent {x.shape[-1]} but weights expect {weights.shape[1]}"
        )
    if bias.shape != (weights.shape[0],):
        raise DimensionError(f"bias axis has extent {bias.shape}, expected ({weights.shape[0]},)")
    out = x.astype(np.float64) @ weights.T.astype(np.float64) + bias
    return out.astype(DTYPE)


def affine_backward(x: np.ndarray, weights: np.ndarray, upstream: np.ndarray):
    x64 = np.atleast_2d(x).astype(np.float64)
    g64 = np.atleast_2d(upstream).astype(np.float64)
    gx = (g64 @ weights.astype(np.float64)).astype(DTYPE)
    if x.ndim == 1:
        gx = gx[0]
    return gx, (g64.T @ x64).astype(DTYPE), g64.sum(axis=0).astype(DTYPE)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy loss and its gradient w.r.t. the logits.

    ``labels`` is an int for a single logit vector or an integer array for a batch.
    """
    single = np.ndim(logits) == 1
    z = np.atleast_2d(np.asarray(logits, np.float64))
    y = np.atleast_1d(np.asarray(labels, np.int64))
    if y.shape[0] != z.shape[0]:
        raise DimensionError(f"batch axis: {z.shape[0]} logit rows vs {y.shape[0]} labels")
    if np.any(y < 0) or np.any(y >= z.shape[1]):
        raise DimensionError(f"class axis: labels must lie in [0, {z.shape[1]})")
    probs = softmax(z)
    n = z.shape[0]
    loss = float(-np.log(np.maximum(probs[np.arange(n), y], 1e-300)).mean())
    grad = probs
    grad[np.arange(n), y] -= 1.0
    grad = (grad / n).astype(DTYPE)
    return loss, (grad[0] if single else grad)
