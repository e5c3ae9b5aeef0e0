"""Warping received features into the ego grid and per-location attention fusion.

Attention runs independently at every BEV cell: the tokens are the agents'
channel vectors at that cell, so the sequence length is the number of agents.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .config import MsaConfig, VoxelConfig
from .geometry import invert_transform
from .tensor_core import (BilinearSampler, Linear, Module, Tensor, concat, div, getitem, matmul, mul,
                          reshape, softmax, sum_, transpose)


@dataclass(frozen=True)
class GridSpec:
    """Metric layout of a feature grid: cell (r, c) is centred at
    (x0 + (c + 0.5) * cell, y0 + (r + 0.5) * cell)."""
    x0: float
    y0: float
    cell: float
    h: int
    w: int

    @classmethod
    def from_voxel(cls, voxel: VoxelConfig, stride: int = 4) -> "GridSpec":
        if voxel.grid_h % stride or voxel.grid_w % stride:
            raise ValueError(f"grid {voxel.grid_h}x{voxel.grid_w} not divisible by stride {stride}")
        return cls(voxel.x_range[0], voxel.y_range[0], voxel.voxel_xy * stride,
                   voxel.grid_h // stride, voxel.grid_w // stride)

    def centres(self) -> tuple[np.ndarray, np.ndarray]:
        rr, cc = np.meshgrid(np.arange(self.h), np.arange(self.w), indexing="ij")
        return self.x0 + (cc + 0.5) * self.cell, self.y0 + (rr + 0.5) * self.cell


def warp_sampler(m: np.ndarray, grid: GridSpec) -> BilinearSampler:
    """Sampler pulling sender-grid values to ego cells; ``m`` maps sender -> ego coordinates."""
    inv = invert_transform(np.asarray(m, dtype=np.float64))
    x, y = grid.centres()
    xs = inv[0, 0] * x + inv[0, 1] * y + inv[0, 2]
    ys = inv[1, 0] * x + inv[1, 1] * y + inv[1, 2]
    cols = (xs - grid.x0) / grid.cell - 0.5
    rows = (ys - grid.y0) / grid.cell - 0.5
    return BilinearSampler(rows, cols, grid.h, grid.w)


def warp_feature(f: Tensor, m: np.ndarray, grid: GridSpec) -> tuple[Tensor, np.ndarray]:
    """Inverse-warp a [1, C, H, W] sender feature into the ego grid.

    Cells whose source position falls outside the sender grid are 0 with mask False.
    """
    if f.ndim != 4 or f.shape[0] != 1 or f.shape[2:] != (grid.h, grid.w):
        raise ValueError(f"expected [1, C, {grid.h}, {grid.w}] feature, got {f.shape}")
    sampler = warp_sampler(m, grid)
    out = sampler(reshape(f, f.shape[1:]))
    return reshape(out, f.shape), sampler.valid.copy()


@dataclass
class AgentTokenGrid:
    tokens: Tensor          # [A, C, H, W]; token 0 is the ego
    mask: np.ndarray        # [A, H, W] bool
    agent_ids: list[int]

    def __post_init__(self):
        a = self.tokens.shape[0]
        if a < 1 or len(self.agent_ids) != a or self.mask.shape != (a,) + self.tokens.shape[2:]:
            raise ValueError("token grid needs >= 1 agent with one id and one mask per token")
        if not self.mask[0].all():
            raise ValueError("the ego token must be valid everywhere")

    @classmethod
    def build(cls, ego_id: int, ego_feat: Tensor, others: list[tuple[int, Tensor, np.ndarray]]) -> "AgentTokenGrid":
        """Ego first, then the other agents sorted by id (fixes the summation order)."""
        others = sorted(others, key=lambda t: t[0])
        feats = [ego_feat] + [f for _, f, _ in others]
        tokens = concat(feats, axis=0) if len(feats) > 1 else ego_feat
        mask = np.stack([np.ones(ego_feat.shape[2:], bool)] + [m for _, _, m in others])
        return cls(tokens, mask, [ego_id] + [i for i, _, _ in others])


class MsaFusion(Module):
    """pre-linear -> per-head scaled dot-product attention over agents -> post-linear."""

    def __init__(self, in_channels: int, cfg: MsaConfig):
        self.cfg = cfg
        d, heads, hd = cfg.model_dim, cfg.heads, cfg.resolved_head_dim
        if hd < 1:
            raise ValueError("head dimension must be >= 1")
        self.heads, self.head_dim = heads, hd
        self.pre = Linear(in_channels, d)
        self.q = Linear(d, heads * hd, bias=False)
        self.k = Linear(d, heads * hd, bias=False)
        self.v = Linear(d, heads * hd, bias=False)
        self.post = Linear(heads * hd, d)

    @property
    def out_channels(self) -> int:
        return self.cfg.model_dim

    def _tokens(self, grid: AgentTokenGrid) -> tuple[Tensor, int, int]:
        a, c, h, w = grid.tokens.shape
        x = reshape(transpose(grid.tokens, (2, 3, 0, 1)), (h * w, a, c))    # [L, A, C]
        return self.pre(x), h, w

    def attention(self, grid: AgentTokenGrid) -> tuple[Tensor, Tensor, int, int]:
        """Returns (attention [L, heads, Aq, A], values [L, heads, A, hd], h, w).

        Only the ego query row is evaluated unless the config asks for the token mean.
        """
        x, h, w = self._tokens(grid)
        l, a, _ = x.shape
        nh, hd = self.heads, self.head_dim
        xq = x if self.cfg.query == "mean" else getitem(x, (slice(None), slice(0, 1)))
        aq = xq.shape[1]
        q = transpose(reshape(self.q(xq), (l, aq, nh, hd)), (0, 2, 1, 3))
        k = transpose(reshape(self.k(x), (l, a, nh, hd)), (0, 2, 3, 1))
        v = transpose(reshape(self.v(x), (l, a, nh, hd)), (0, 2, 1, 3))
        scores = mul(matmul(q, k), 1.0 / math.sqrt(hd))                      # [L, nh, Aq, A]
        key_mask = np.broadcast_to(grid.mask.reshape(a, l).T[:, None, None, :], scores.shape)
        return softmax(scores, axis=-1, mask=key_mask), v, h, w

    def forward(self, grid: AgentTokenGrid) -> Tensor:
        """Fused [1, model_dim, H, W] feature."""
        if self.cfg.fusion == "mean":
            return self._mean_fuse(grid)
        attn, v, h, w = self.attention(grid)
        l, nh, aq, _ = attn.shape
        out = transpose(matmul(attn, v), (0, 2, 1, 3))                       # [L, Aq, nh, hd]
        out = self.post(reshape(out, (l, aq, nh * self.head_dim)))          # [L, Aq, D]
        if self.cfg.query == "mean":
            m = grid.mask.reshape(aq, l).T.astype(out.data.dtype)[:, :, None]
            out = div(sum_(mul(out, m), axis=1), m.sum(axis=1))
        else:
            out = reshape(out, (l, self.out_channels))
        return reshape(transpose(out, (1, 0)), (1, self.out_channels, h, w))

    def _mean_fuse(self, grid: AgentTokenGrid) -> Tensor:
        """Ablation baseline: average of the valid agents' projected tokens."""
        x, h, w = self._tokens(grid)
        l, a, d = x.shape
        m = grid.mask.reshape(a, l).T.astype(x.data.dtype)[:, :, None]
        out = div(sum_(mul(x, m), axis=1), m.sum(axis=1))
        return reshape(transpose(out, (1, 0)), (1, d, h, w))

    def ego_attention_map(self, grid: AgentTokenGrid) -> np.ndarray:
        """Mean-over-heads weight of the ego query row, [A, H, W]."""
        a = grid.tokens.shape[0]
        if self.cfg.fusion == "mean":
            m = grid.mask.astype(np.float64)
            return m / m.sum(axis=0, keepdims=True)
        attn, _, h, w = self.attention(grid)
        return attn.data[:, :, 0, :].astype(np.float64).mean(axis=1).T.reshape(a, h, w)


def msa_fuse(grid: AgentTokenGrid, fusion: MsaFusion) -> Tensor:
    return fusion(grid)


def export_attention(grid: AgentTokenGrid, fusion: MsaFusion, path) -> np.ndarray:
    weights = fusion.ego_attention_map(grid)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["agent_id", "row", "col", "weight"])
        for k, aid in enumerate(grid.agent_ids):
            for r in range(weights.shape[1]):
                for c in range(weights.shape[2]):
                    out.writerow([aid, r, c, repr(float(weights[k, r, c]))])
    return weights
