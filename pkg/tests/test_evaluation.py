import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coopercept.config import TINY, KdConfig, TrainConfig, replace
from coopercept.distill import build_samples, fit
from coopercept.evaluation import (ABLATION_TOGGLES, ablation_config, average_precision, evaluate_strategy,
                                   run_ablation, sweep_temperature, voc_ap, write_results_csv, write_summary)
from coopercept.geometry import Box7, Detection, rotated_iou_bev
from coopercept.lidar_sim import generate_scene


def box(x, y=0.0, theta=0.0):
    return Box7(x, y, 0.8, 1.6, 3.9, 1.5, theta)


def det(b, score):
    return Detection(b, score, 0)


def brute_force_ap(dets, gts, thresh):
    """Quadratic reference: re-run matching for every cutoff k and integrate the upper envelope by hand."""
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return 0.0
    # descending score; ties broken by x then y (the documented detection order)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1].score, dets[i][1].box.x, dets[i][1].box.y))
    points = []
    for k in range(1, len(order) + 1):
        used = set()
        tp = 0
        for i in order[:k]:
            frame, d = dets[i]
            cands = gts.get(frame, [])
            if not cands:
                continue
            ious = [rotated_iou_bev(d.box, g) for g in cands]
            j = max(range(len(cands)), key=lambda j: (ious[j], -j))
            if ious[j] >= thresh and (frame, j) not in used:
                used.add((frame, j))
                tp += 1
        points.append((tp / n_gt, tp / k))
    ap, prev_r = 0.0, 0.0
    for r, _ in points:
        if r > prev_r:
            ap += (r - prev_r) * max(p for rr, p in points if rr >= r)
            prev_r = r
    return ap


def random_case(rng):
    n_frames = int(rng.integers(1, 4))
    gts, dets = {}, []
    for f in range(n_frames):
        g = [box(rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(-3, 3)) for _ in range(rng.integers(0, 4))]
        gts[str(f)] = g
        for b in g:
            for _ in range(rng.integers(0, 3)):
                dets.append((str(f), det(Box7(b.x + rng.normal(0, 0.6), b.y + rng.normal(0, 0.6), b.z, b.w, b.l, b.h,
                                              b.theta + rng.normal(0, 0.2)), float(rng.choice([0.3, 0.5, 0.7, 0.9])))))
        for _ in range(rng.integers(0, 3)):
            dets.append((str(f), det(box(rng.uniform(-20, 20), rng.uniform(-20, 20)), float(rng.uniform(0, 1)))))
    return dets, gts


class TestAp:
    def test_perfect(self):
        r = average_precision([("a", det(box(0), 0.9))], {"a": [box(0)]}, 0.7)
        assert r.ap == 1.0 and (r.tp, r.fp, r.fn) == (1, 0, 0)

    def test_no_overlap(self):
        r = average_precision([("a", det(box(50), 0.9))], {"a": [box(0)]}, 0.5)
        assert r.ap == 0.0 and (r.tp, r.fp, r.fn) == (0, 1, 1)

    def test_crafted(self):
        gts = {"a": [box(0), box(10)]}
        dets = [("a", det(box(0), 0.9)), ("a", det(box(30), 0.8)), ("a", det(box(10), 0.7))]
        r = average_precision(dets, gts, 0.5)
        assert r.ap == pytest.approx(0.5 * 1.0 + 0.5 * (2 / 3), abs=1e-12)
        assert r.ap == pytest.approx(0.8333, abs=1e-4)
        assert r.ap == pytest.approx(brute_force_ap(dets, gts, 0.5), abs=1e-12)
        assert r.recompute() == r.ap

    def test_duplicates_are_false_positives(self):
        r = average_precision([("a", det(box(0), 0.9)), ("a", det(box(0), 0.8))], {"a": [box(0)]}, 0.5)
        assert (r.tp, r.fp) == (1, 1) and r.ap == 1.0

    def test_frames_are_separate(self):
        r = average_precision([("b", det(box(0), 0.9))], {"a": [box(0)], "b": []}, 0.5)
        assert r.ap == 0.0

    def test_no_gt(self):
        assert average_precision([("a", det(box(0), 0.9))], {"a": []}, 0.5).ap == 0.0
        assert average_precision([], {"a": [box(0)]}, 0.5).ap == 0.0

    def test_matches_brute_force_200_cases(self):
        for seed in range(200):
            rng = np.random.default_rng(seed)
            dets, gts = random_case(rng)
            for t in (0.5, 0.7):
                assert average_precision(dets, gts, t).ap == brute_force_ap(dets, gts, t), seed

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_strict_threshold_lower(self, seed):
        dets, gts = random_case(np.random.default_rng(seed))
        assert average_precision(dets, gts, 0.7).ap <= average_precision(dets, gts, 0.5).ap

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_monotone_score_transform(self, seed):
        dets, gts = random_case(np.random.default_rng(seed))
        moved = [(f, Detection(d.box, d.score ** 3 * 0.5, d.agent_id)) for f, d in dets]
        assert average_precision(moved, gts, 0.5).ap == average_precision(dets, gts, 0.5).ap

    def test_voc_envelope(self):
        assert voc_ap(np.array([1.0, 0.5, 2 / 3]), np.array([0.5, 0.5, 1.0])) == pytest.approx(5 / 6)
        assert voc_ap(np.array([]), np.array([])) == 0.0


@pytest.fixture(scope="module")
def data():
    samples = build_samples([generate_scene(TINY.scene, seed=s) for s in range(3)], TINY)
    return samples[:2], samples[2:]


TRAIN = TrainConfig(epochs=1, lr=1e-3)


class TestDrivers:
    def test_untrained_ap_zero(self, data):
        from coopercept.distill import CoopModel
        m = CoopModel(TINY).init_weights(0).eval()
        r = evaluate_strategy(data[1], m, "ahd")
        assert r.ap50.ap == 0.0 and r.ap70.ap == 0.0 and r.detections == []

    def test_summary_and_csv(self, data, tmp_path):
        from coopercept.distill import CoopModel
        m = CoopModel(TINY).init_weights(0).eval()
        res = [evaluate_strategy(data[1], m, k) for k in ("none", "ahd")]
        write_summary(tmp_path / "s.json", res)
        doc = json.loads((tmp_path / "s.json").read_text())
        assert [set(d) for d in doc] == [{"strategy", "iou", "ap", "bytes_per_frame"}] * 4
        write_results_csv(tmp_path / "r.csv", res)
        assert (tmp_path / "r.csv").read_text().startswith("strategy,ap50,ap70")

    def test_sweep_single_row_and_deterministic(self, data, tmp_path):
        a = sweep_temperature(*data, TINY, TRAIN, temps=[5], path=tmp_path / "t.csv")
        b = sweep_temperature(*data, TINY, TRAIN, temps=[5])
        assert len(a) == 1 and a == b
        assert (tmp_path / "t.csv").read_text().splitlines()[0] == "temperature,ap50,ap70"

    def test_ablation_baseline_identity(self, data):
        kd = KdConfig()
        rows = run_ablation(*data, TINY, TRAIN, [{}], kd=kd)
        st_ = fit(data[0], TINY, replace(kd, lambda_kd=0.0), TRAIN, 0, use_sparse=False,
                  msa=replace(TINY.msa, fusion="mean"))
        r = evaluate_strategy(data[1], st_.model, "ahd")
        assert rows == [{"sparse_pillar": False, "ahd": False, "msa": False, "ap50": r.ap50.ap, "ap70": r.ap70.ap}]

    def test_kd_off_equals_lambda_zero(self):
        kd0 = replace(KdConfig(), lambda_kd=0.0)
        on = {"sparse_pillar": True, "ahd": True, "msa": True}
        assert ablation_config(kd0, TINY, on) == ablation_config(KdConfig(), TINY, {**on, "ahd": False})

    def test_unknown_toggle(self):
        with pytest.raises(ValueError, match="toggle"):
            ablation_config(KdConfig(), TINY, {"fancy": True})
        assert ABLATION_TOGGLES == ("sparse_pillar", "ahd", "msa")
