"""Planar poses, oriented boxes, rotated BEV IoU and NMS.

Conventions: right-handed, x forward, yaw about +z. A box's length ``l`` runs
along its heading, width ``w`` across it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def normalize_angle(a: float) -> float:
    """Wrap to (-pi, pi]; values already in range are returned unchanged."""
    if -math.pi < a <= math.pi:
        return float(a)
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    z: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    def matrix(self) -> np.ndarray:
        """3x3 homogeneous transform agent frame -> world frame."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])

    def distance_to(self, other: "Pose") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.z, self.yaw]


@dataclass(frozen=True)
class Box7:
    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    theta: float

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got w={self.w} l={self.l} h={self.h}")
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.w, self.l, self.h, self.theta])

    @classmethod
    def from_array(cls, a) -> "Box7":
        return cls(*(float(v) for v in a))

    def corners_bev(self) -> np.ndarray:
        """Footprint corners, counter-clockwise, shape [4, 2]."""
        return box_corners(self.x, self.y, self.w, self.l, self.theta)


@dataclass(frozen=True)
class Detection:
    box: Box7
    score: float
    agent_id: int = 0
    extra: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


def box_corners(x, y, w, l, theta) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    local = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


# -- transforms -----------------------------------------------------------------
def relative_transform(ego: Pose, other: Pose) -> np.ndarray:
    """Matrix mapping coordinates in ``other``'s frame into ``ego``'s frame."""
    return invert_transform(ego.matrix()) @ other.matrix()


def invert_transform(t: np.ndarray) -> np.ndarray:
    rot = t[:2, :2]
    if abs(np.linalg.det(rot)) < 1e-12:
        raise np.linalg.LinAlgError("transform is singular")
    inv = np.eye(3)
    inv[:2, :2] = rot.T if np.allclose(rot @ rot.T, np.eye(2), atol=1e-9) else np.linalg.inv(rot)
    inv[:2, 2] = -inv[:2, :2] @ t[:2, 2]
    return inv


def transform_points(points: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Apply a planar transform to the x, y columns of an [N, >=3] array; z is kept."""
    pts = np.asarray(points)
    out = pts.astype(np.float64, copy=True)
    if len(out):
        out[:, :2] = pts[:, :2] @ t[:2, :2].T + t[:2, 2]
    return out


def transform_box(box: Box7, t: np.ndarray) -> Box7:
    cx, cy = t[:2, :2] @ np.array([box.x, box.y]) + t[:2, 2]
    dyaw = math.atan2(t[1, 0], t[0, 0])
    return Box7(float(cx), float(cy), box.z, box.w, box.l, box.h, box.theta + dyaw)


def points_in_box(points: np.ndarray, box: Box7, margin: float = 1e-3) -> np.ndarray:
    """Boolean mask of points inside ``box`` (grown by ``margin`` on every face)."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    c, s = math.cos(box.theta), math.sin(box.theta)
    dx, dy = p[:, 0] - box.x, p[:, 1] - box.y
    return ((np.abs(dx * c + dy * s) <= box.l / 2 + margin) & (np.abs(-dx * s + dy * c) <= box.w / 2 + margin)
            & (np.abs(p[:, 2] - box.z) <= box.h / 2 + margin))


# -- rotated IoU -----------------------------------------------------------------
def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: part of ``subject`` inside convex CCW polygon ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp, out = out, []
        prev = inp[-1]
        prev_side = ex * (prev[1] - ay) - ey * (prev[0] - ax)
        for cur in inp:
            side = ex * (cur[1] - ay) - ey * (cur[0] - ax)
            if side >= 0:
                if prev_side < 0:
                    out.append(_intersect(prev, cur, prev_side, side))
                out.append(cur)
            elif prev_side >= 0:
                out.append(_intersect(prev, cur, prev_side, side))
            prev, prev_side = cur, side
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def rotated_iou_bev(a: Box7, b: Box7) -> float:
    area_a, area_b = a.w * a.l, b.w * b.l
    if area_a < 1e-12 or area_b < 1e-12:
        return 0.0
    # circumscribed circles do not touch -> disjoint
    ra = 0.5 * math.hypot(a.w, a.l)
    rb = 0.5 * math.hypot(b.w, b.l)
    if math.hypot(a.x - b.x, a.y - b.y) >= ra + rb:
        return 0.0
    inter = polygon_area(clip_polygon(a.corners_bev(), b.corners_bev()))
    union = area_a + area_b - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def iou_matrix(boxes_a: list[Box7], boxes_b: list[Box7]) -> np.ndarray:
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = rotated_iou_bev(a, b)
    return out


# -- NMS -----------------------------------------------------------------------
def detection_order(dets: list[Detection]) -> list[int]:
    """Indices sorted by score desc, then x asc, then y asc."""
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].box.x, dets[i].box.y))


def nms_bev(dets: list[Detection], iou_thresh: float, score_thresh: float = 0.0) -> list[Detection]:
    """Greedy suppression: a box is dropped if IoU > ``iou_thresh`` with any kept box."""
    cand = [d for d in dets if d.score >= score_thresh]
    keep: list[Detection] = []
    for i in detection_order(cand):
        d = cand[i]
        if all(rotated_iou_bev(d.box, k.box) <= iou_thresh for k in keep):
            keep.append(d)
    return keep
