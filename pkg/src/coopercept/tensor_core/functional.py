"""Convolution, normalization and resampling ops with hand-written backward passes."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor


def _patches(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """View of padded input as [N, Ho, Wo, C, k, k] windows."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    return as_strided(xp, shape=(n, ho, wo, c, k, k),
                      strides=(sn, sh * stride, sw * stride, sc, sh, sw), writeable=False)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x [N,C,H,W] with weight [O,C,k,k]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input has {c} channels, weight expects {ci}")
    if k != k2:
        raise ValueError(f"conv2d needs a square kernel, got {k}x{k2}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError(f"kernel {k} does not fit input {h}x{w} with padding {padding}")
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = _patches(np.ascontiguousarray(xp), k, stride, ho, wo).reshape(n * ho * wo, c * k * k)
    w2 = weight.data.reshape(o, c * k * k)
    out = cols @ w2.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(n, ho, wo, c, k, k)
            gxp = np.zeros(xp.shape, dtype=xd.dtype)
            for ky in range(k):
                for kx in range(k):
                    gxp[:, :, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride] += \
                        gcols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = (gx, gw)
        if bias is not None:
            grads += (g2.sum(axis=0, dtype=np.float64).astype(g.dtype),)
        return grads
    return Tensor._make(np.ascontiguousarray(out), parents, back)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Transposed convolution; weight is [C_in, C_out, k, k], no padding.

    Output spatial size is (H - 1) * stride + k.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv_transpose2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    ci, o, k, _ = weight.shape
    if ci != c:
        raise ValueError(f"conv_transpose2d channel mismatch: input has {c} channels, weight expects {ci}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    ho, wo = (h - 1) * stride + k, (w - 1) * stride + k
    x2 = x.data.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    w2 = weight.data.reshape(c, o * k * k)
    cols = (x2 @ w2).reshape(n, h, w, o, k, k)
    out = np.zeros((n, o, ho, wo), dtype=x.data.dtype)
    for ky in range(k):
        for kx in range(k):
            out[:, :, ky:ky + stride * h:stride, kx:kx + stride * w:stride] += \
                cols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gcols = np.empty((n, h, w, o, k, k), dtype=g.dtype)
        for ky in range(k):
            for kx in range(k):
                gcols[:, :, :, :, ky, kx] = \
                    g[:, :, ky:ky + stride * h:stride, kx:kx + stride * w:stride].transpose(0, 2, 3, 1)
        gcols = gcols.reshape(n * h * w, o * k * k)
        gx = (gcols @ w2.T).reshape(n, h, w, c).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (x2.T @ gcols).reshape(weight.shape) if weight.requires_grad else None
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype),)
        return grads
    return Tensor._make(out, parents, back)


class RunningStats:
    """Per-channel running mean/variance buffers for batch norm."""

    def __init__(self, channels: int, momentum: float = 0.1, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats, training: bool,
               eps: float = 1e-5, mask: np.ndarray | None = None) -> Tensor:
    """Batch norm over every axis except axis 1.

    With ``mask`` (broadcastable to x, size 1 along axis 1), statistics use only
    the masked entries and the output is zero outside the mask.
    """
    xd = x.data
    c = xd.shape[1]
    axes = tuple(i for i in range(xd.ndim) if i != 1)
    bshape = [1] * xd.ndim
    bshape[1] = c
    m = None if mask is None else np.broadcast_to(mask, xd.shape[:1] + (1,) + xd.shape[2:]).astype(xd.dtype)
    if m is None:
        count = xd.size // c
    else:
        count = int(m.sum(dtype=np.float64))
    if training:
        if count < 2:
            raise ValueError(f"batch norm in training mode needs at least 2 values per channel, got {count}")
        # elementwise work in the input dtype, accumulation in float64
        if m is None:
            mu = xd.sum(axis=axes, dtype=np.float64) / count
            dev = xd - mu.astype(xd.dtype).reshape(bshape)
        else:
            mu = (xd * m).sum(axis=axes, dtype=np.float64) / count
            dev = (xd - mu.astype(xd.dtype).reshape(bshape)) * m
        var = np.square(dev).sum(axis=axes, dtype=np.float64) / count
        mom = stats.momentum
        stats.mean[:] = (1 - mom) * stats.mean + mom * mu
        stats.var[:] = (1 - mom) * stats.var + mom * var * count / (count - 1)
    else:
        mu, var = stats.mean.astype(np.float64), stats.var.astype(np.float64)
    invstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.astype(xd.dtype).reshape(bshape)) * invstd.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    if m is not None:
        out = out * m
        xhat = xhat * m

    def back(g):
        if m is not None:
            g = g * m
        ggamma = (g * xhat).sum(axis=axes, dtype=np.float64)
        gbeta = g.sum(axis=axes, dtype=np.float64)
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if training:
                s1 = gxhat.sum(axis=axes, dtype=np.float64).reshape(bshape)
                s2 = (gxhat * xhat).sum(axis=axes, dtype=np.float64).reshape(bshape)
                gx = (invstd.reshape(bshape) / count) * (count * gxhat - s1 - xhat * s2)
                if m is not None:
                    gx = gx * m
            else:
                gx = gxhat * invstd.reshape(bshape)
            gx = gx.astype(xd.dtype)
        return gx, ggamma.astype(xd.dtype), gbeta.astype(xd.dtype)
    return Tensor._make(out, (x, gamma, beta), back)


class BilinearSampler:
    """Precomputed bilinear sampling of a [C, H, W] grid at fractional (row, col) positions.

    Positions outside [0, H-1] x [0, W-1] (beyond a small tolerance) sample 0 and
    are flagged invalid in ``valid``.
    """

    def __init__(self, rows: np.ndarray, cols: np.ndarray, src_h: int, src_w: int, tol: float = 1e-6):
        rows = np.asarray(rows, dtype=np.float64)
        cols = np.asarray(cols, dtype=np.float64)
        self.out_shape = rows.shape
        self.src_shape = (src_h, src_w)
        self.valid = ((rows >= -tol) & (rows <= src_h - 1 + tol)
                      & (cols >= -tol) & (cols <= src_w - 1 + tol))
        r = np.clip(rows, 0, src_h - 1)
        c = np.clip(cols, 0, src_w - 1)
        r0 = np.floor(r).astype(np.int64)
        c0 = np.floor(c).astype(np.int64)
        fr, fc = r - r0, c - c0
        r1 = np.minimum(r0 + 1, src_h - 1)
        c1 = np.minimum(c0 + 1, src_w - 1)
        v = self.valid.astype(np.float64)
        self.index = [(r0 * src_w + c0).ravel(), (r0 * src_w + c1).ravel(),
                      (r1 * src_w + c0).ravel(), (r1 * src_w + c1).ravel()]
        self.weight = [((1 - fr) * (1 - fc) * v).ravel(), ((1 - fr) * fc * v).ravel(),
                       (fr * (1 - fc) * v).ravel(), (fr * fc * v).ravel()]

    def __call__(self, feat: Tensor) -> Tensor:
        c, h, w = feat.shape
        if (h, w) != self.src_shape:
            raise ValueError(f"sampler built for {self.src_shape}, got feature {h}x{w}")
        flat = feat.data.reshape(c, h * w)
        dtype = feat.data.dtype
        weights = [wt.astype(dtype) for wt in self.weight]
        out = np.zeros((c, self.index[0].size), dtype=dtype)
        for idx, wt in zip(self.index, weights):
            out += flat[:, idx] * wt
        out = out.reshape((c,) + self.out_shape)

        def back(g):
            g2 = g.reshape(c, -1)
            offsets = np.arange(c)[:, None] * (h * w)
            gin = np.zeros(c * h * w, dtype=np.float64)
            for idx, wt in zip(self.index, weights):
                gin += np.bincount((offsets + idx).ravel(), weights=(g2 * wt).ravel(),
                                   minlength=c * h * w)
            return (gin.astype(dtype).reshape(c, h, w),)
        return Tensor._make(out, (feat,), back)
