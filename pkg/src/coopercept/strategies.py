"""Fusion strategies compared on the same frames: none, early, late and ahd (intermediate).

Every strategy returns ego-frame detections cropped to the evaluation range,
plus a :class:`BandwidthReport` of what crossed the channel.
"""
from __future__ import annotations

import numpy as np

from .comms import BYTES_PER_FLOAT, BandwidthReport
from .detection import decode, make_anchors
from .distill import CoopModel, Sample, cooperative_forward, single_view_forward, teacher_forward_pass
from .fusion import GridSpec
from .geometry import Detection, nms_bev, rotated_iou_bev, transform_box
from .tensor_core import no_grad

STRATEGIES = ("none", "early", "late", "ahd")
LATE_FLOATS_PER_DET = 8          # x, y, z, w, l, h, theta, score
POINT_BYTES = 3 * BYTES_PER_FLOAT


def _anchors(model: CoopModel) -> np.ndarray:
    cache = getattr(model, "_anchor_cache", None)
    if cache is None:
        cache = make_anchors(GridSpec.from_voxel(model.preset.voxel, model.preset.feature_stride), model.preset.anchors)
        object.__setattr__(model, "_anchor_cache", cache)
    return cache


def _in_range(d: Detection, voxel) -> bool:
    return voxel.x_range[0] <= d.box.x < voxel.x_range[1] and voxel.y_range[0] <= d.box.y < voxel.y_range[1]


def _decode(model: CoopModel, y_cls, y_reg, agent_id: int, skip: np.ndarray | None = None) -> list[Detection]:
    a = model.preset.anchors
    return decode(y_cls, y_reg, _anchors(model), a.score_thresh, a.nms_iou, agent_id, skip)


def _finish(model: CoopModel, sample: Sample, dets: list[Detection]) -> list[Detection]:
    """Crop to the evaluation range and drop boxes touching the ego's own car.

    Each agent's own car is a don't-care region: its anchors are ignored in
    training and skipped when decoding. Neighbours still see the ego's car, so a
    box they send that overlaps it is about the ego itself.
    """
    out = [d for d in dets if _in_range(d, model.preset.voxel)]
    if sample.ego_box is not None:
        out = [d for d in out if rotated_iou_bev(d.box, sample.ego_box) == 0.0]
    return out


def run_strategy(sample: Sample, model: CoopModel, strategy: str,
                 report: BandwidthReport | None = None) -> tuple[list[Detection], BandwidthReport]:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    report = BandwidthReport() if report is None else report
    model.eval()
    with no_grad():
        if strategy == "none":
            y_cls, y_reg, _ = single_view_forward(model, sample.ego.pillars)
            dets = _decode(model, y_cls, y_reg, sample.ego_id, sample.ego.own_zone)
        elif strategy == "ahd":
            y_cls, y_reg, _ = cooperative_forward(model, sample, report)
            dets = _decode(model, y_cls, y_reg, sample.ego_id, sample.ego.own_zone)
        elif strategy == "early":
            for a in sample.agents[1:]:
                report.add(sample.frame_id, a.agent_id, sample.ego_id, a.n_points * POINT_BYTES, "early")
            y_cls, y_reg, _ = teacher_forward_pass(model, sample.mix_pillars)
            dets = _decode(model, y_cls, y_reg, sample.ego_id, sample.ego.own_zone)
        else:
            dets = _late(model, sample, report)
    return _finish(model, sample, dets), report


def _late(model: CoopModel, sample: Sample, report: BandwidthReport) -> list[Detection]:
    y_cls, y_reg, _ = single_view_forward(model, sample.ego.pillars)
    dets = _decode(model, y_cls, y_reg, sample.ego_id, sample.ego.own_zone)
    for a in sample.agents[1:]:
        y_cls, y_reg, _ = single_view_forward(model, a.pillars)
        own = _decode(model, y_cls, y_reg, a.agent_id, a.own_zone)
        report.add(sample.frame_id, a.agent_id, sample.ego_id,
                   len(own) * LATE_FLOATS_PER_DET * BYTES_PER_FLOAT, "late")
        m = sample.transforms[a.agent_id]
        dets += [Detection(transform_box(d.box, m), d.score, a.agent_id) for d in own]
    return nms_bev(dets, model.preset.anchors.nms_iou)
