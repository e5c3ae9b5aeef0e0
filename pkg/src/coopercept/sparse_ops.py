"""Sparse 2D feature maps and regular (non-submanifold) sparse 3x3 convolution.

A :class:`SparseMap2D` stores only active grid cells. Sparse ops here are
forward-only; training runs the equivalent masked dense path (see
:func:`conv_output_mask`) so gradients come from the dense tensor core.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import Tensor
from .tensor_core.functional import RunningStats


@dataclass
class SparseMap2D:
    grid_h: int
    grid_w: int
    channels: int
    sites: np.ndarray   # [n, 2] int64 (row, col), strictly lexicographically increasing
    values: np.ndarray  # [n, channels]

    def __post_init__(self):
        self.sites = np.asarray(self.sites, dtype=np.int64).reshape(-1, 2)
        self.values = np.asarray(self.values).reshape(len(self.sites), self.channels)
        if len(self.sites):
            r, c = self.sites[:, 0], self.sites[:, 1]
            if r.min() < 0 or c.min() < 0 or r.max() >= self.grid_h or c.max() >= self.grid_w:
                raise ValueError("sparse site outside grid")
            lin = r * self.grid_w + c
            assert np.all(np.diff(lin) > 0), "sites must be sorted and unique"

    @property
    def n_active(self) -> int:
        return len(self.sites)

    @property
    def density(self) -> float:
        return self.n_active / float(self.grid_h * self.grid_w)

    def linear_index(self) -> np.ndarray:
        return self.sites[:, 0] * self.grid_w + self.sites[:, 1]

    def mask(self) -> np.ndarray:
        m = np.zeros((self.grid_h, self.grid_w), dtype=bool)
        m[self.sites[:, 0], self.sites[:, 1]] = True
        return m

    @classmethod
    def empty(cls, h: int, w: int, c: int, dtype=np.float32) -> "SparseMap2D":
        return cls(h, w, c, np.zeros((0, 2), np.int64), np.zeros((0, c), dtype))


def sparse_from_rows(h: int, w: int, rows: np.ndarray, cols: np.ndarray, values: np.ndarray) -> SparseMap2D:
    """Build a map from unsorted unique coordinates."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    order = np.argsort(rows * w + cols, kind="stable")
    values = np.asarray(values)
    return SparseMap2D(h, w, values.shape[1] if values.ndim == 2 else 0,
                       np.stack([rows[order], cols[order]], axis=1), values[order])


def densify(s: SparseMap2D) -> Tensor:
    dense = np.zeros((1, s.channels, s.grid_h, s.grid_w), dtype=s.values.dtype if s.n_active else np.float32)
    if s.n_active:
        dense[0][:, s.sites[:, 0], s.sites[:, 1]] = s.values.T
    return Tensor(dense)


def sparsify(dense) -> SparseMap2D:
    """Active sites are cells with any non-zero channel."""
    arr = dense.data if isinstance(dense, Tensor) else np.asarray(dense)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError("sparsify expects a single-sample tensor")
        arr = arr[0]
    c, h, w = arr.shape
    rows, cols = np.nonzero(np.any(arr != 0, axis=0))
    return SparseMap2D(h, w, c, np.stack([rows, cols], axis=1), arr[:, rows, cols].T)


def conv_out_size(size: int, stride: int) -> int:
    return (size + 2 - 3) // stride + 1


def _check_stride(stride: int) -> None:
    if stride not in (1, 2):
        raise ValueError(f"sparse conv supports stride 1 or 2, got {stride}")


def output_sites(sites: np.ndarray, h: int, w: int, stride: int) -> np.ndarray:
    """Linear indices (sorted) of outputs whose 3x3 receptive field touches an input site."""
    _check_stride(stride)
    ho, wo = conv_out_size(h, stride), conv_out_size(w, stride)
    if len(sites) == 0:
        return np.zeros(0, dtype=np.int64)
    cand = []
    for k in range(3):
        for j in range(3):
            # input row r feeds output row o when o * stride - 1 + k == r
            orow = sites[:, 0] + 1 - k
            ocol = sites[:, 1] + 1 - j
            ok = (orow % stride == 0) & (ocol % stride == 0)
            orow, ocol = orow[ok] // stride, ocol[ok] // stride
            ok = (orow >= 0) & (orow < ho) & (ocol >= 0) & (ocol < wo)
            cand.append(orow[ok] * wo + ocol[ok])
    return np.unique(np.concatenate(cand))


def conv_output_mask(mask: np.ndarray, stride: int) -> np.ndarray:
    """Activity mask after one regular sparse 3x3 conv (pad 1) of a [H, W] mask.

    Same rule as :func:`output_sites`, done as an OR over the 9 shifted taps.
    """
    _check_stride(stride)
    h, w = mask.shape
    ho, wo = conv_out_size(h, stride), conv_out_size(w, stride)
    p = np.pad(np.asarray(mask, bool), 1)
    out = np.zeros((ho, wo), dtype=bool)
    for k in range(3):
        for j in range(3):
            out |= p[k:k + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    return out


def sparse_conv2d(s: SparseMap2D, weight, bias=None, stride: int = 1) -> SparseMap2D:
    """Regular sparse 3x3 convolution with padding 1.

    Output values equal dense conv restricted to active outputs; bias is added
    on active outputs only.
    """
    _check_stride(stride)
    wt = weight.data if isinstance(weight, Tensor) else np.asarray(weight)
    o, c, k, k2 = wt.shape
    if (k, k2) != (3, 3):
        raise ValueError(f"sparse conv is 3x3 only, got {k}x{k2}")
    if c != s.channels:
        raise ValueError(f"sparse conv channel mismatch: map has {s.channels}, weight expects {c}")
    h, w = s.grid_h, s.grid_w
    ho, wo = conv_out_size(h, stride), conv_out_size(w, stride)
    dtype = wt.dtype
    lin = output_sites(s.sites, h, w, stride)
    if len(lin) == 0:
        return SparseMap2D.empty(ho, wo, o, dtype)
    orow, ocol = lin // wo, lin % wo
    # padded index map: -1 marks inactive, the extra row of `vals` is zeros
    idx = np.full((h + 2, w + 2), s.n_active, dtype=np.int64)
    idx[s.sites[:, 0] + 1, s.sites[:, 1] + 1] = np.arange(s.n_active)
    vals = np.concatenate([s.values.astype(dtype, copy=False), np.zeros((1, c), dtype)], axis=0)
    taps = np.empty((len(lin), 9), dtype=np.int64)
    for k_ in range(3):
        for j in range(3):
            taps[:, k_ * 3 + j] = idx[orow * stride + k_, ocol * stride + j]
    gathered = vals[taps].reshape(len(lin), 9 * c)
    w2 = wt.transpose(2, 3, 1, 0).reshape(9 * c, o)
    out = gathered @ w2
    if bias is not None:
        out += (bias.data if isinstance(bias, Tensor) else np.asarray(bias)).astype(dtype)
    return SparseMap2D(ho, wo, o, np.stack([orow, ocol], axis=1), out)


def sparse_relu(s: SparseMap2D) -> SparseMap2D:
    return SparseMap2D(s.grid_h, s.grid_w, s.channels, s.sites, np.maximum(s.values, 0))


def sparse_batch_norm(s: SparseMap2D, gamma, beta, stats: RunningStats, training: bool,
                      eps: float = 1e-5) -> SparseMap2D:
    """Batch norm with statistics over active sites only."""
    g = gamma.data if isinstance(gamma, Tensor) else np.asarray(gamma)
    b = beta.data if isinstance(beta, Tensor) else np.asarray(beta)
    if training:
        if s.n_active < 2:
            raise ValueError(f"sparse batch norm in training mode needs >= 2 active sites, got {s.n_active}")
        v64 = s.values.astype(np.float64)
        mu = v64.mean(axis=0)
        var = v64.var(axis=0)
        n = s.n_active
        stats.mean[:] = (1 - stats.momentum) * stats.mean + stats.momentum * mu
        stats.var[:] = (1 - stats.momentum) * stats.var + stats.momentum * var * n / (n - 1)
    else:
        if s.n_active == 0:
            return s
        mu, var = stats.mean.astype(np.float64), stats.var.astype(np.float64)
    dtype = s.values.dtype
    invstd = (1.0 / np.sqrt(var + eps)).astype(dtype)
    out = (s.values - mu.astype(dtype)) * invstd * g + b
    return SparseMap2D(s.grid_h, s.grid_w, s.channels, s.sites, out.astype(dtype))
