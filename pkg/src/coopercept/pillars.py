"""Point cloud -> stacked pillars -> per-pillar embedding -> BEV pseudo-image.

Each point carries D = 8 features: (x, y, z), its offset to the pillar mean
and its planar offset to the pillar centre. There is no intensity channel
because the simulated sensor has none.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import VoxelConfig
from .sparse_ops import SparseMap2D
from .tensor_core import BatchNorm, Linear, Module, Tensor, max_, relu, reshape, rowwise_linear, scatter_rows, transpose

POINT_FEATURES = 8
SAMPLING_SEED = 0


@dataclass
class PillarBatch:
    features: np.ndarray   # [P, M, 8] float32, zero on padding
    coords: np.ndarray     # [P, 2] int64 (row, col), sorted, unique
    mask: np.ndarray       # [P, M] bool, True for real points
    grid_h: int
    grid_w: int

    @property
    def n_pillars(self) -> int:
        return len(self.coords)

    def counts(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def pillar_index(points: np.ndarray, cfg: VoxelConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(in-range mask, row, col) for every point; row/col only meaningful where in range."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    ok = ((p[:, 0] >= cfg.x_range[0]) & (p[:, 0] < cfg.x_range[1])
          & (p[:, 1] >= cfg.y_range[0]) & (p[:, 1] < cfg.y_range[1])
          & (p[:, 2] >= cfg.z_range[0]) & (p[:, 2] < cfg.z_range[1]))
    col = np.floor((p[:, 0] - cfg.x_range[0]) / cfg.voxel_xy).astype(np.int64)
    row = np.floor((p[:, 1] - cfg.y_range[0]) / cfg.voxel_xy).astype(np.int64)
    # guard against x == x_max - tiny rounding up to the next column
    col = np.clip(col, 0, cfg.grid_w - 1)
    row = np.clip(row, 0, cfg.grid_h - 1)
    return ok, row, col


def pillarize(cloud: np.ndarray, cfg: VoxelConfig, seed: int = SAMPLING_SEED) -> PillarBatch:
    m = cfg.max_points_per_pillar
    h, w = cfg.grid_h, cfg.grid_w
    pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    ok, row, col = pillar_index(pts, cfg)
    pts, lin = pts[ok], row[ok] * w + col[ok]
    if len(pts) == 0:
        return PillarBatch(np.zeros((0, m, POINT_FEATURES), np.float32), np.zeros((0, 2), np.int64),
                           np.zeros((0, m), bool), h, w)
    # canonical order (pillar, x, y, z) makes everything below independent of input order
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0], lin))
    pts, lin = pts[order], lin[order]
    uniq, start, count = np.unique(lin, return_index=True, return_counts=True)
    if len(uniq) > cfg.max_pillars:
        keep = np.lexsort((uniq, -count))[:cfg.max_pillars]   # most points first, ties by index
        keep.sort()
        uniq, start, count = uniq[keep], start[keep], count[keep]
    p = len(uniq)
    feats = np.zeros((p, m, POINT_FEATURES), np.float64)
    mask = np.zeros((p, m), bool)
    # flat layout: each kept pillar's points in canonical order
    offset = np.cumsum(count) - count
    group = np.repeat(np.arange(p), count)
    rank = np.arange(int(count.sum())) - np.repeat(offset, count)
    src = np.repeat(start, count) + rank
    keep = rank < m
    # pillars over capacity keep a fixed-seed random subset, in canonical order
    for i in np.nonzero(count > m)[0]:
        sl = slice(offset[i], offset[i] + count[i])
        chosen = np.zeros(count[i], bool)
        chosen[np.random.default_rng([seed, int(uniq[i])]).choice(count[i], size=m, replace=False)] = True
        keep[sl] = chosen
        rank[sl] = np.cumsum(chosen) - 1
    feats[group[keep], rank[keep], :3] = pts[src[keep]]
    mask[group[keep], rank[keep]] = True
    n_per = mask.sum(axis=1, keepdims=True)
    mean = feats[:, :, :3].sum(axis=1) / n_per
    rows, cols = uniq // w, uniq % w
    centre = np.stack([cfg.x_range[0] + (cols + 0.5) * cfg.voxel_xy,
                       cfg.y_range[0] + (rows + 0.5) * cfg.voxel_xy], axis=1)
    feats[:, :, 3:6] = feats[:, :, :3] - mean[:, None, :]
    feats[:, :, 6:8] = feats[:, :, :2] - centre[:, None, :]
    feats[~mask] = 0.0
    return PillarBatch(feats.astype(np.float32), np.stack([rows, cols], axis=1), mask, h, w)


class PillarFeatureNet(Module):
    """Shared linear -> BN over real points -> ReLU -> max over each pillar's points."""

    def __init__(self, out_channels: int, in_features: int = POINT_FEATURES):
        self.linear = Linear(in_features, out_channels, bias=False)
        self.norm = BatchNorm(out_channels)
        self.out_channels = out_channels

    def forward(self, batch: PillarBatch) -> Tensor:
        p, m = batch.mask.shape
        dtype = self.linear.weight.data.dtype
        if p == 0:
            return Tensor(np.zeros((0, self.out_channels), dtype=dtype))
        # embed only the real points, then lay them back out as [P, M, C] for the max
        slots = np.flatnonzero(batch.mask)
        x = Tensor(batch.features.reshape(p * m, -1)[slots].astype(dtype))
        # not BLAS: a point's embedding must not depend on how many points share the batch
        y = relu(self.norm(rowwise_linear(x, self.linear.weight)))                                                # [n_points, C]
        y = reshape(scatter_rows(y, slots, p * m), (p, m, self.out_channels))
        return max_(y, axis=1, mask=np.broadcast_to(batch.mask[:, :, None], y.shape))


def pfn_encode(batch: PillarBatch, pfn: PillarFeatureNet) -> Tensor:
    return pfn(batch)


def _check_coords(coords: np.ndarray, h: int, w: int) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    if len(coords):
        if coords.min() < 0 or coords[:, 0].max() >= h or coords[:, 1].max() >= w:
            raise ValueError(f"pillar coordinate outside the {h}x{w} grid")
        lin = coords[:, 0] * w + coords[:, 1]
        if len(np.unique(lin)) != len(lin):
            raise ValueError("duplicate pillar coordinates")
    return coords


def scatter_to_pseudo_image(features, coords: np.ndarray, cfg: VoxelConfig) -> SparseMap2D:
    h, w = cfg.grid_h, cfg.grid_w
    coords = _check_coords(coords, h, w)
    vals = features.data if isinstance(features, Tensor) else np.asarray(features)
    vals = vals.reshape(len(coords), -1) if len(coords) else vals.reshape(0, vals.shape[-1] if vals.ndim == 2 else 0)
    order = np.argsort(coords[:, 0] * w + coords[:, 1], kind="stable")
    return SparseMap2D(h, w, vals.shape[1], coords[order], vals[order])


def scatter_dense(features: Tensor, coords: np.ndarray, h: int, w: int) -> tuple[Tensor, np.ndarray]:
    """Differentiable scatter to a [1, C, H, W] tensor, plus the [H, W] occupancy mask."""
    coords = _check_coords(coords, h, w)
    c = features.shape[1]
    flat = scatter_rows(features, coords[:, 0] * w + coords[:, 1], h * w)     # [H*W, C]
    dense = reshape(transpose(flat, (1, 0)), (1, c, h, w))
    mask = np.zeros((h, w), bool)
    mask[coords[:, 0], coords[:, 1]] = True
    return dense, mask
