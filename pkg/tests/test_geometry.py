import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coopercept.geometry import (Box7, Detection, Pose, invert_transform, nms_bev, normalize_angle,
                                 relative_transform, rotated_iou_bev, transform_box, transform_points)


def mc_iou(a: Box7, b: Box7, n: int, rng) -> float:
    """Monte-Carlo IoU oracle: stratified (jittered-grid) samples over the joint bounding
    rectangle, membership tested per box in its local frame."""
    pts_all = np.vstack([a.corners_bev(), b.corners_bev()])
    lo, hi = pts_all.min(axis=0), pts_all.max(axis=0)
    side = int(round(math.sqrt(n)))
    gy, gx = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    cells = np.stack([gx.ravel(), gy.ravel()], axis=1)
    p = lo + (cells + rng.uniform(size=cells.shape)) / side * (hi - lo)

    def inside(box):
        d = p - [box.x, box.y]
        c, s = math.cos(box.theta), math.sin(box.theta)
        u = d[:, 0] * c + d[:, 1] * s
        v = -d[:, 0] * s + d[:, 1] * c
        return (np.abs(u) <= box.l / 2) & (np.abs(v) <= box.w / 2)
    ia, ib = inside(a), inside(b)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def random_box(rng, spread=2.0):
    return Box7(rng.uniform(-spread, spread), rng.uniform(-spread, spread), 0.0,
                rng.uniform(0.5, 3.0), rng.uniform(0.5, 5.0), 1.5, rng.uniform(-math.pi, math.pi))


boxes = st.builds(lambda x, y, w, l, t: Box7(x, y, 0.0, w, l, 1.0, t),
                  st.floats(-3, 3), st.floats(-3, 3), st.floats(0.2, 4), st.floats(0.2, 6), st.floats(-4, 4))


class TestPose:
    def test_yaw_normalized(self):
        assert Pose(0, 0, 0, 3 * math.pi).yaw == pytest.approx(math.pi)
        assert Pose(0, 0, 0, -math.pi).yaw == pytest.approx(math.pi)
        assert normalize_angle(0.5) == 0.5

    def test_identity(self):
        p = Pose(3.0, -2.0, 1.0, 0.7)
        np.testing.assert_allclose(relative_transform(p, p), np.eye(3), atol=1e-12)

    def test_known_case(self):
        ego = Pose(0, 0, 0, 0)
        other = Pose(10, 0, 0, math.pi / 2)
        t = relative_transform(ego, other)
        # composition oracle: world <- other, then ego <- world
        c, s = math.cos(math.pi / 2), math.sin(math.pi / 2)
        world = np.array([10 + c * 1 - s * 0, 0 + s * 1 + c * 0])
        np.testing.assert_allclose(transform_points(np.array([[1.0, 0.0, 0.0]]), t)[0, :2], world, atol=1e-12)
        np.testing.assert_allclose(world, [10.0, 1.0], atol=1e-12)

    @given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-4, 4), st.floats(-50, 50), st.floats(-50, 50), st.floats(-4, 4))
    def test_inverse_pair(self, x1, y1, a1, x2, y2, a2):
        a, b = Pose(x1, y1, 0, a1), Pose(x2, y2, 0, a2)
        np.testing.assert_allclose(relative_transform(a, b) @ relative_transform(b, a), np.eye(3), atol=1e-9)

    def test_associative(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a, b, c = (Pose(*rng.uniform(-30, 30, 2), 0, rng.uniform(-3, 3)) for _ in range(3))
            lhs = (relative_transform(a, b) @ relative_transform(b, c))
            np.testing.assert_allclose(lhs, relative_transform(a, c), atol=1e-9)


class TestTransformPoints:
    def test_identity(self):
        pts = np.random.default_rng(0).normal(size=(10, 3))
        np.testing.assert_array_equal(transform_points(pts, np.eye(3)), pts)

    def test_translation(self):
        t = np.array([[1, 0, 1], [0, 1, 2], [0, 0, 1]], dtype=float)
        np.testing.assert_array_equal(transform_points(np.zeros((1, 3)), t), [[1, 2, 0]])

    def test_round_trip(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(50, 3)) * 20
        t = relative_transform(Pose(1, 2, 0, 0.3), Pose(-5, 7, 0, 2.0))
        back = transform_points(transform_points(pts, t), invert_transform(t))
        np.testing.assert_allclose(back, pts, atol=1e-9)
        assert back.shape == pts.shape

    def test_singular_rejected(self):
        with pytest.raises(np.linalg.LinAlgError):
            invert_transform(np.zeros((3, 3)))

    def test_transform_box(self):
        t = relative_transform(Pose(0, 0, 0, 0), Pose(10, 0, 0, math.pi / 2))
        b = transform_box(Box7(1, 0, 0.8, 1.6, 3.9, 1.5, 0.0), t)
        assert (b.x, b.y) == pytest.approx((10, 1))
        assert b.theta == pytest.approx(math.pi / 2)


class TestIoU:
    def test_identical(self):
        b = Box7(1, 2, 0, 1.6, 3.9, 1.5, 0.4)
        assert rotated_iou_bev(b, b) == pytest.approx(1.0)

    def test_half_offset_unit_squares(self):
        a = Box7(0, 0, 0, 1, 1, 1, 0)
        b = Box7(0.5, 0, 0, 1, 1, 1, 0)
        assert rotated_iou_bev(a, b) == pytest.approx(1 / 3)

    def test_disjoint(self):
        assert rotated_iou_bev(Box7(0, 0, 0, 1, 1, 1, 0), Box7(5, 5, 0, 1, 1, 1, 0)) == 0.0

    def test_rotated_square_inside(self):
        # square rotated 45deg inside a bigger axis-aligned one
        small = Box7(0, 0, 0, 1, 1, 1, math.pi / 4)
        big = Box7(0, 0, 0, 2, 2, 1, 0)
        assert rotated_iou_bev(small, big) == pytest.approx(0.25)

    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            Box7(0, 0, 0, 0.0, 1, 1, 0)

    @given(boxes, boxes)
    @settings(max_examples=200)
    def test_symmetric(self, a, b):
        assert abs(rotated_iou_bev(a, b) - rotated_iou_bev(b, a)) < 1e-12
        assert rotated_iou_bev(a, a) == pytest.approx(1.0)

    @given(boxes, st.floats(-0.5, 0.5), st.floats(-0.5, 0.5))
    @settings(max_examples=100)
    def test_shrink_never_increases(self, big, dx, dy):
        inner = Box7(big.x + dx * big.l * 0.2, big.y + dy * big.w * 0.2, 0, big.w * 0.5, big.l * 0.5, 1, big.theta)
        assert rotated_iou_bev(inner, big) <= rotated_iou_bev(big, big) + 1e-12
        inner2 = Box7(inner.x, inner.y, 0, inner.w * 0.5, inner.l * 0.5, 1, inner.theta)
        assert rotated_iou_bev(inner2, big) <= rotated_iou_bev(inner, big) + 1e-12

    def test_monte_carlo_oracle(self):
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(100):
            a, b = random_box(rng, 1.0), random_box(rng, 1.0)
            worst = max(worst, abs(rotated_iou_bev(a, b) - mc_iou(a, b, 10**6, rng)))
        assert worst < 2e-3


def reference_nms(dets, iou_thresh, score_thresh):
    """Quadratic reference: full IoU table, forward suppression in priority order."""
    dets = [d for d in dets if d.score >= score_thresh]
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].box.x, dets[i].box.y))
    table = [[rotated_iou_bev(dets[i].box, dets[j].box) for j in range(len(dets))] for i in range(len(dets))]
    suppressed = [False] * len(dets)
    out = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        out.append(dets[i])
        for j in order[pos + 1:]:
            if table[i][j] > iou_thresh:
                suppressed[j] = True
    return out


class TestNms:
    def test_overlapping_pair(self):
        a = Detection(Box7(0, 0, 0, 1.6, 3.9, 1.5, 0), 0.9)
        b = Detection(Box7(0.1, 0, 0, 1.6, 3.9, 1.5, 0), 0.8)
        assert rotated_iou_bev(a.box, b.box) > 0.9
        assert nms_bev([b, a], 0.5) == [a]

    def test_disjoint_kept(self):
        dets = [Detection(Box7(10 * i, 0, 0, 1.6, 3.9, 1.5, 0), 0.5 + 0.01 * i) for i in range(4)]
        assert len(nms_bev(dets, 0.1)) == 4

    def test_score_threshold(self):
        dets = [Detection(Box7(0, 0, 0, 1, 1, 1, 0), 0.1)]
        assert nms_bev(dets, 0.5, score_thresh=0.2) == []

    def test_matches_reference(self):
        rng = np.random.default_rng(7)
        for case in range(200):
            n = int(rng.integers(0, 11))
            dets = [Detection(random_box(rng, 3.0), float(rng.choice([0.3, 0.5, 0.7, rng.uniform()])))
                    for _ in range(n)]
            thr = float(rng.uniform(0.05, 0.7))
            assert nms_bev(dets, thr, 0.2) == reference_nms(dets, thr, 0.2), case
