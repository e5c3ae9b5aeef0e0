"""Anchors, target assignment, detection heads, box coding, losses and decoding.

Two anchors per feature cell (yaw 0 and pi/2). The class map has one
objectness logit per anchor; the regression map has 7 residuals per anchor:

    (dx / d_a, dy / d_a, dz / h_a, log w/w_a, log l/l_a, log h/h_a, dtheta)

with d_a the anchor's BEV diagonal and dtheta the heading offset folded into
(-pi/2, pi/2]. Boxes are symmetric under a half turn, so folding loses nothing
for BEV IoU.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .config import AnchorConfig
from .fusion import GridSpec
from .geometry import Box7, Detection, nms_bev, rotated_iou_bev
from .tensor_core import (Conv2d, Module, Tensor, abs_, getitem, log_sigmoid, mean, mul, power, sigmoid,
                          sum_, where, reshape, transpose)

BOX_DIM = 7
POSITIVE, NEGATIVE, IGNORE = 1, 0, -1
FOCAL_PRIOR = 0.01


# -- anchors -----------------------------------------------------------------
def make_anchors(grid: GridSpec, cfg: AnchorConfig) -> np.ndarray:
    """[H * W * n_yaw, 7] anchors in (row, col, yaw) order."""
    x, y = grid.centres()
    n = len(cfg.yaws)
    out = np.zeros((grid.h, grid.w, n, BOX_DIM))
    out[..., 0] = x[..., None]
    out[..., 1] = y[..., None]
    out[..., 2] = cfg.z_center
    out[..., 3], out[..., 4], out[..., 5] = cfg.w, cfg.l, cfg.h
    out[..., 6] = np.asarray(cfg.yaws)
    return out.reshape(-1, BOX_DIM)


def fold_angle(a):
    """Map angles to (-pi/2, pi/2]."""
    return np.pi / 2 - np.mod(np.pi / 2 - np.asarray(a, dtype=np.float64), np.pi)


def encode(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    b, a = np.atleast_2d(boxes).astype(np.float64), np.atleast_2d(anchors).astype(np.float64)
    diag = np.hypot(a[:, 3], a[:, 4])
    return np.stack([(b[:, 0] - a[:, 0]) / diag, (b[:, 1] - a[:, 1]) / diag, (b[:, 2] - a[:, 2]) / a[:, 5],
                     np.log(b[:, 3] / a[:, 3]), np.log(b[:, 4] / a[:, 4]), np.log(b[:, 5] / a[:, 5]),
                     fold_angle(b[:, 6] - a[:, 6])], axis=1)


def decode_boxes(res: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    t, a = np.atleast_2d(res).astype(np.float64), np.atleast_2d(anchors).astype(np.float64)
    diag = np.hypot(a[:, 3], a[:, 4])
    # exp clipped so wild untrained outputs stay finite
    e = np.exp(np.clip(t[:, 3:6], -10, 10))
    theta = np.array([math.remainder(v, 2 * math.pi) for v in a[:, 6] + t[:, 6]])
    return np.stack([a[:, 0] + t[:, 0] * diag, a[:, 1] + t[:, 1] * diag, a[:, 2] + t[:, 2] * a[:, 5],
                     a[:, 3] * e[:, 0], a[:, 4] * e[:, 1], a[:, 5] * e[:, 2], theta], axis=1)


# -- targets -------------------------------------------------------------------
@dataclass
class TargetAssignment:
    labels: np.ndarray       # [N] int8: 1 positive, 0 negative, -1 ignore
    reg_targets: np.ndarray  # [N, 7], zero except on positives
    matched: np.ndarray      # [N] index of the matched gt, -1 if none

    @property
    def n_pos(self) -> int:
        return int(np.sum(self.labels == POSITIVE))


def anchor_iou_table(anchors: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """BEV IoU [N, M]; pairs whose circumscribed circles are apart are skipped."""
    out = np.zeros((len(anchors), len(gt)))
    if len(gt) == 0:
        return out
    ra = 0.5 * np.hypot(anchors[:, 3], anchors[:, 4])
    for j, g in enumerate(gt):
        rg = 0.5 * math.hypot(g[3], g[4])
        near = np.nonzero(np.hypot(anchors[:, 0] - g[0], anchors[:, 1] - g[1]) < ra + rg)[0]
        gb = Box7.from_array(g)
        for i in near:
            out[i, j] = rotated_iou_bev(Box7.from_array(anchors[i]), gb)
    return out


def assign_targets(anchors: np.ndarray, gt_boxes, cfg: AnchorConfig) -> TargetAssignment:
    gt = np.array([b.as_array() if isinstance(b, Box7) else b for b in gt_boxes], dtype=np.float64).reshape(-1, 7)
    n = len(anchors)
    labels = np.full(n, NEGATIVE, np.int8)
    matched = np.full(n, -1, np.int64)
    reg = np.zeros((n, BOX_DIM))
    if len(gt):
        iou = anchor_iou_table(anchors, gt)
        best_gt = iou.argmax(axis=1)
        best_iou = iou[np.arange(n), best_gt]
        labels[(best_iou >= cfg.neg_iou) & (best_iou < cfg.pos_iou)] = IGNORE
        pos = best_iou >= cfg.pos_iou
        matched[pos] = best_gt[pos]
        # every gt keeps its best anchor (first on ties) even below the positive threshold
        for j in range(len(gt)):
            i = int(iou[:, j].argmax())
            if iou[i, j] > 0:
                pos[i] = True
                matched[i] = j
        labels[pos] = POSITIVE
        reg[pos] = encode(gt[matched[pos]], anchors[pos])
    return TargetAssignment(labels, reg, matched)


# -- heads ------------------------------------------------------------------------
class DetectionHead(Module):
    """Two 1x1 convs: objectness per anchor and 7 residuals per anchor."""

    def __init__(self, in_channels: int, n_anchors: int = 2):
        self.n_anchors = n_anchors
        self.cls = Conv2d(in_channels, n_anchors, 1)
        self.reg = Conv2d(in_channels, n_anchors * BOX_DIM, 1)
        # prior-probability bias: a fresh head predicts background everywhere
        self.cls.bias.init = f"const:{-math.log((1 - FOCAL_PRIOR) / FOCAL_PRIOR)}"
        self.cls.weight.init = "normal:0.01"
        self.reg.weight.init = "normal:0.01"

    def forward(self, m: Tensor) -> tuple[Tensor, Tensor]:
        return self.cls(m), self.reg(m)


def head_forward(m: Tensor, head: DetectionHead) -> tuple[Tensor, Tensor]:
    return head(m)


def flatten_outputs(y_cls: Tensor, y_reg: Tensor) -> tuple[Tensor, Tensor]:
    """[1, A, H, W], [1, 7A, H, W] -> [H*W*A], [H*W*A, 7] matching :func:`make_anchors` order."""
    _, a, h, w = y_cls.shape
    cls = reshape(transpose(y_cls, (0, 2, 3, 1)), (h * w * a,))
    reg = reshape(transpose(reshape(y_reg, (1, a, BOX_DIM, h, w)), (0, 3, 4, 1, 2)), (h * w * a, BOX_DIM))
    return cls, reg


# -- losses ------------------------------------------------------------------------
def focal_loss(logits: Tensor, labels: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Mean over non-ignored anchors of -alpha_t (1 - p_t)^gamma log p_t."""
    keep = labels != IGNORE
    if not keep.any():
        return mul(sum_(logits), 0.0)
    idx = np.nonzero(keep)[0]
    x = getitem(logits, idx)
    pos = labels[idx] == POSITIVE
    sign = np.where(pos, 1.0, -1.0).astype(x.data.dtype)
    log_pt = log_sigmoid(mul(x, sign))                     # log p_t
    pt = sigmoid(mul(x, sign))
    alpha_t = np.where(pos, alpha, 1.0 - alpha).astype(x.data.dtype)
    modulator = power(1.0 - pt, gamma) if gamma != 0 else 1.0
    return mean(mul(mul(modulator, log_pt), -alpha_t))


def smooth_l1(pred: Tensor, target: np.ndarray, labels: np.ndarray | None = None, beta: float = 1.0) -> Tensor:
    """Per-anchor sum of smooth-L1 over residual components, averaged over positives."""
    if labels is None:
        idx = np.arange(pred.shape[0])
    else:
        idx = np.nonzero(labels == POSITIVE)[0]
    if len(idx) == 0:
        return mul(sum_(pred), 0.0)
    d = getitem(pred, idx) - np.asarray(target)[idx].astype(pred.data.dtype)
    ad = abs_(d)
    small = ad.data < beta
    per = where(small, mul(power(d, 2.0), 0.5 / beta), ad - 0.5 * beta)
    total = sum_(per)
    return mul(total, 1.0 / len(idx))


def detection_loss(y_cls: Tensor, y_reg: Tensor, targets: TargetAssignment, cfg: AnchorConfig) -> tuple[Tensor, Tensor]:
    cls, reg = flatten_outputs(y_cls, y_reg)
    return (focal_loss(cls, targets.labels, cfg.focal_alpha, cfg.focal_gamma),
            smooth_l1(reg, targets.reg_targets, targets.labels))


# -- decoding ------------------------------------------------------------------------
def decode(y_cls: Tensor, y_reg: Tensor, anchors: np.ndarray, score_thresh: float, nms_thresh: float,
           agent_id: int = 0, skip: np.ndarray | None = None) -> list[Detection]:
    """Boxes from anchors scoring at least ``score_thresh``, after NMS. ``skip`` masks anchors out."""
    cls, reg = flatten_outputs(y_cls, y_reg)
    logits = cls.data.astype(np.float64)
    scores = 0.5 * (1.0 + np.tanh(0.5 * logits))           # overflow-free sigmoid
    ok = scores >= score_thresh
    if skip is not None:
        ok &= ~skip
    keep = np.nonzero(ok)[0]
    if len(keep) == 0:
        return []
    boxes = decode_boxes(reg.data[keep], anchors[keep])
    dets = []
    for b, s in zip(boxes, scores[keep]):
        if np.all(np.isfinite(b)) and b[3] > 0 and b[4] > 0 and b[5] > 0:
            dets.append(Detection(Box7.from_array(b), float(min(max(s, 0.0), 1.0)), agent_id))
    return nms_bev(dets, nms_thresh)


def write_detections_csv(path, rows: list[tuple[str, Detection]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_id", "agent_id", "x", "y", "z", "w", "l", "h", "theta", "score"])
        for frame_id, d in rows:
            b = d.box
            w.writerow([frame_id, d.agent_id] + [repr(float(v)) for v in (b.x, b.y, b.z, b.w, b.l, b.h, b.theta,
                                                                          d.score)])


def read_detections_csv(path) -> list[tuple[str, Detection]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(r["frame_id"], Detection(Box7(*(float(r[k]) for k in ("x", "y", "z", "w", "l", "h", "theta"))),
                                      float(r["score"]), int(r["agent_id"]))) for r in rows]
