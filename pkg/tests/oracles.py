"""Slow, obviously-correct reference implementations used as test oracles.

Nothing here calls into the optimized kernels it checks.
"""
import math

import numpy as np


def conv_loops(x, w, b, stride, pad):
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.zeros((c_in, h + 2 * pad, wd + 2 * pad))
    xp[:, pad : pad + h, pad : pad + wd] = x
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((c_out, oh, ow))
    for c in range(c_out):
        for y in range(oh):
            for xx in range(ow):
                acc = float(b[c])
                for d in range(c_in):
                    for u in range(k):
                        for v in range(k):
                            acc += float(w[c, d, u, v]) * xp[d, y * stride + u, xx * stride + v]
                out[c, y, xx] = acc
    return out


def maxpool_loops(x, window, stride):
    c, h, w = x.shape
    oh, ow = (h - window) // stride + 1, (w - window) // stride + 1
    out = np.zeros((c, oh, ow))
    for ch in range(c):
        for y in range(oh):
            for xx in range(ow):
                out[ch, y, xx] = max(
                    x[ch, y * stride + u, xx * stride + v]
                    for u in range(window)
                    for v in range(window)
                )
    return out


def affine_loops(x, w, b):
    out = np.zeros(w.shape[0])
    for i in range(w.shape[0]):
        out[i] = float(b[i]) + sum(float(w[i, j]) * float(x[j]) for j in range(w.shape[1]))
    return out


def central_diff(f, arr, eps=1e-3):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``arr`` (in place)."""
    grad = np.zeros(arr.shape, np.float64)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        grad.reshape(-1)[i] = (hi - lo) / (2 * eps)
    return grad


def rel_error(a, b):
    """Max-norm relative error of ``a`` against reference ``b``."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    scale = max(np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / scale)


def masked_logits(net, x, layer_id, channel):
    """Forward pass that zeroes one conv output channel instead of removing it.

    Uses layer parameters directly with numpy loops over examples and its own
    correlation, independent of ``Network.forward`` and the im2col kernels.
    """
    from carprune.network import Affine, Conv, Flatten, MaxPool, ReLU, ResidualBlock

    def conv(layer, a):
        w = layer.weights.astype(np.float64)
        s, p = layer.params.stride, layer.params.padding
        k = layer.kernel
        ap = np.pad(a, ((0, 0), (p, p), (p, p)))
        oh = (ap.shape[1] - k) // s + 1
        ow = (ap.shape[2] - k) // s + 1
        out = np.empty((w.shape[0], oh, ow))
        for y in range(oh):
            for xx in range(ow):
                patch = ap[:, y * s : y * s + k, xx * s : xx * s + k]
                out[:, y, xx] = np.tensordot(w, patch, axes=3) + layer.bias
        if layer.id == layer_id:
            out[channel] = 0.0
        return out

    def run(layers, a):
        for layer in layers:
            if isinstance(layer, Conv):
                a = conv(layer, a)
            elif isinstance(layer, ReLU):
                a = np.maximum(a, 0)
            elif isinstance(layer, MaxPool):
                c, h, w = a.shape
                win, st = layer.window, layer.stride
                oh, ow = (h - win) // st + 1, (w - win) // st + 1
                a = np.array([[[a[ch, y * st : y * st + win, xx * st : xx * st + win].max()
                                for xx in range(ow)] for y in range(oh)] for ch in range(c)])
            elif isinstance(layer, Flatten):
                a = a.reshape(-1)
            elif isinstance(layer, Affine):
                a = layer.weights.astype(np.float64) @ a + layer.bias
            elif isinstance(layer, ResidualBlock):
                a = np.maximum(a + run(layer.branch, a), 0)
        return a

    return np.stack([run(net.layers, np.asarray(xi, np.float64)) for xi in x])


def best_random_assignment_wcss(values, k, restarts, seed):
    """Best within-cluster sum of squares over random label assignments."""
    rng = np.random.default_rng(seed)
    v = np.asarray(values, np.float64)
    best = math.inf
    for _ in range(restarts):
        labels = rng.integers(0, k, v.size)
        wcss = 0.0
        for c in range(k):
            members = v[labels == c]
            if members.size:
                wcss += float(((members - members.mean()) ** 2).sum())
        best = min(best, wcss)
    return best
