"""Sparse pillar encoder and upsampling neck, in teacher and student depths.

Stages 1-4 are regular sparse 3x3 conv blocks, stage 5 is dense. Every stage
after the first opens with a stride-2 conv, so stage k runs at 1/2^(k-1) of
the pseudo-image resolution. The neck upsamples stage 5 by 2, concatenates it
with stage 4 and upsamples the result by 2 again, giving features at 1/4
resolution with ``c5 / 2 + c4`` channels.

Two execution paths share the same parameters:

* ``forward`` runs dense tensors with an activity mask (conv -> masked BN ->
  ReLU). This is what training uses; gradients come from the tensor core.
* ``forward_sparse`` runs the sparse kernels on a :class:`SparseMap2D`
  (inference only) and is numerically the same computation.
"""
from __future__ import annotations

import numpy as np

from .config import BackboneConfig, VoxelConfig
from .pillars import PillarBatch, PillarFeatureNet, scatter_dense, scatter_to_pseudo_image
from .sparse_ops import (SparseMap2D, conv_output_mask, densify, sparse_batch_norm, sparse_conv2d, sparse_relu)
from .tensor_core import BatchNorm, Conv2d, ConvTranspose2d, Module, Tensor, concat, getitem, no_grad, relu


class ConvBN(Module):
    def __init__(self, cin: int, cout: int, stride: int, sparse: bool):
        self.conv = Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.norm = BatchNorm(cout)
        self.stride = stride
        self.sparse = sparse

    def forward(self, x: Tensor, mask: np.ndarray | None):
        y = self.conv(x)
        if self.sparse:
            mask = np.stack([conv_output_mask(m, self.stride) for m in mask])     # [N, H, W]
            return relu(self.norm(y, mask[:, None])), mask
        return relu(self.norm(y)), None

    def forward_sparse(self, s: SparseMap2D) -> SparseMap2D:
        s = sparse_conv2d(s, self.conv.weight, None, self.stride)
        return sparse_relu(sparse_batch_norm(s, self.norm.gamma, self.norm.beta, self.norm.stats,
                                             training=False, eps=self.norm.eps))


class Stage(Module):
    def __init__(self, cin: int, cout: int, blocks: int, first_stride: int, sparse: bool):
        self.blocks = [ConvBN(cin if i == 0 else cout, cout, first_stride if i == 0 else 1, sparse)
                       for i in range(blocks)]

    def forward(self, x, mask):
        for b in self.blocks:
            x, mask = b(x, mask)
        return x, mask

    def forward_sparse(self, s):
        for b in self.blocks:
            s = b.forward_sparse(s)
        return s


class UpBN(Module):
    def __init__(self, cin: int, cout: int):
        self.deconv = ConvTranspose2d(cin, cout, 2, 2, bias=False)
        self.norm = BatchNorm(cout)

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.norm(self.deconv(x)))


class SparsePillarBackbone(Module):
    """Encoder (5 stages) plus neck; input [1, c1, H, W] -> output [1, c5/2 + c4, H/4, W/4]."""

    def __init__(self, cfg: BackboneConfig):
        self.cfg = cfg
        ch = cfg.stage_channels
        n = len(ch)
        self.stages = []
        for i in range(n):
            sparse = cfg.use_sparse and i < cfg.sparse_stages
            self.stages.append(Stage(ch[i - 1] if i else ch[0], ch[i], cfg.blocks_per_stage[i],
                                     1 if i == 0 else 2, sparse))
        self.up1 = UpBN(ch[-1], ch[-1] // 2)
        self.up2 = UpBN(cfg.out_channels, cfg.out_channels)

    @property
    def in_channels(self) -> int:
        return self.cfg.stage_channels[0]

    @property
    def out_channels(self) -> int:
        return self.cfg.out_channels

    @property
    def downsample(self) -> int:
        return 2 ** (len(self.cfg.stage_channels) - 1)

    def _check_input(self, c: int, h: int, w: int) -> None:
        if c != self.in_channels:
            raise ValueError(f"backbone expects {self.in_channels} input channels, got {c}")
        if h % self.downsample or w % self.downsample:
            raise ValueError(f"grid {h}x{w} must be divisible by {self.downsample}")

    def _neck(self, s4: Tensor, s5: Tensor) -> Tensor:
        return self.up2(concat([self.up1(s5), s4], axis=1))

    def forward(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Masked dense path. ``mask`` is the [N, H, W] (or [H, W]) activity of the input."""
        n, c, h, w = x.shape
        self._check_input(c, h, w)
        if mask is None:
            mask = np.any(x.data != 0, axis=1)
        mask = np.asarray(mask, bool).reshape(n, h, w)
        feats = []
        for st in self.stages:
            x, mask = st(x, mask)
            feats.append(x)
        return self._neck(feats[-2], feats[-1])

    def forward_sparse(self, s: SparseMap2D) -> Tensor:
        """Inference through the sparse kernels; stages past ``sparse_stages`` run dense."""
        self._check_input(s.channels, s.grid_h, s.grid_w)
        if self.training:
            raise RuntimeError("forward_sparse is inference-only; call .eval() first")
        with no_grad():
            feats = []
            x = None
            for i, st in enumerate(self.stages):
                if st.blocks[0].sparse and x is None:
                    s = st.forward_sparse(s)
                    feats.append(densify(s))
                else:
                    x = densify(s) if x is None else x
                    x, _ = st(x, None)
                    feats.append(x)
            return self._neck(feats[-2], feats[-1])


class PointEncoder(Module):
    """Pillar feature net followed by the backbone: one agent's cloud -> BEV feature map."""

    def __init__(self, cfg: BackboneConfig, voxel: VoxelConfig):
        self.pfn = PillarFeatureNet(cfg.stage_channels[0])
        self.backbone = SparsePillarBackbone(cfg)
        self.voxel = voxel

    @property
    def out_channels(self) -> int:
        return self.backbone.out_channels

    def pseudo_image(self, pillars: PillarBatch | list[PillarBatch]) -> tuple[Tensor, np.ndarray]:
        """[N, C, H, W] pseudo-images and [N, H, W] masks; the PFN sees all agents' pillars at once."""
        batches = [pillars] if isinstance(pillars, PillarBatch) else list(pillars)
        h, w = self.voxel.grid_h, self.voxel.grid_w
        if len(batches) == 1:
            x, mask = scatter_dense(self.pfn(batches[0]), batches[0].coords, h, w)
            return x, mask[None]
        joined = PillarBatch(np.concatenate([b.features for b in batches]), np.concatenate([b.coords for b in batches]),
                             np.concatenate([b.mask for b in batches]), h, w)
        feats = self.pfn(joined)
        bounds = np.cumsum([0] + [b.n_pillars for b in batches])
        images, masks = [], []
        for b, lo, hi in zip(batches, bounds[:-1], bounds[1:]):
            x, m = scatter_dense(getitem(feats, slice(lo, hi)), b.coords, h, w)
            images.append(x)
            masks.append(m)
        return concat(images, axis=0), np.stack(masks)

    def forward(self, pillars: PillarBatch | list[PillarBatch]) -> Tensor:
        x, mask = self.pseudo_image(pillars)
        return self.backbone(x, mask)

    def forward_sparse(self, pillars: PillarBatch) -> Tensor:
        with no_grad():
            s = scatter_to_pseudo_image(self.pfn(pillars), pillars.coords, self.voxel)
        return self.backbone.forward_sparse(s)


def student_forward(pseudo_image: SparseMap2D, backbone: SparsePillarBackbone) -> Tensor:
    return backbone.forward_sparse(pseudo_image)


def teacher_forward(pseudo_image: SparseMap2D, backbone: SparsePillarBackbone) -> Tensor:
    if backbone.cfg.variant != "teacher":
        raise ValueError("teacher_forward needs a teacher-variant backbone")
    return backbone.forward_sparse(pseudo_image)
