"""Average precision on rotated BEV IoU and the experiment drivers built on it."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .comms import BandwidthReport
from .config import KdConfig, MsaConfig, Preset, TrainConfig, replace
from .distill import CoopModel, Sample, fit
from .geometry import Box7, Detection, detection_order, rotated_iou_bev
from .strategies import run_strategy


@dataclass
class ApResult:
    iou_thresh: float
    ap: float
    precision: np.ndarray = field(repr=False)
    recall: np.ndarray = field(repr=False)
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def recompute(self) -> float:
        return voc_ap(self.precision, self.recall)


def voc_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    """Area under the monotone precision envelope, summed over every recall step."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(dets: Sequence[tuple[str, Detection]], gts: dict[str, list[Box7]],
                      iou_thresh: float) -> ApResult:
    """Greedy matching in descending score order; a detection takes its highest-IoU gt
    in the same frame and is a true positive if that IoU >= thresh and the gt is still free."""
    n_gt = sum(len(v) for v in gts.values())
    order = detection_order([d for _, d in dets])
    taken = {k: np.zeros(len(v), bool) for k, v in gts.items()}
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        frame, d = dets[i]
        boxes = gts.get(frame, [])
        if not boxes:
            continue
        ious = [rotated_iou_bev(d.box, g) for g in boxes]
        j = int(np.argmax(ious))
        if ious[j] >= iou_thresh and not taken[frame][j]:
            taken[frame][j] = True
            tp[rank] = 1
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / n_gt if n_gt else np.zeros_like(ctp)
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    ap = voc_ap(precision, recall) if n_gt else 0.0
    ntp = int(tp.sum())
    return ApResult(iou_thresh, ap, precision, recall, ntp, len(dets) - ntp, n_gt - ntp)


# -- experiment drivers -----------------------------------------------------------------------
@dataclass
class StrategyResult:
    strategy: str
    ap50: ApResult
    ap70: ApResult
    bandwidth: BandwidthReport
    detections: list[tuple[str, Detection]]
    n_frames: int

    @property
    def bytes_per_frame(self) -> float:
        return self.bandwidth.total_bytes / max(1, self.n_frames)


def evaluate_strategy(samples: list[Sample], model: CoopModel, strategy: str) -> StrategyResult:
    report = BandwidthReport()
    dets: list[tuple[str, Detection]] = []
    for s in samples:
        out, _ = run_strategy(s, model, strategy, report)
        dets += [(s.frame_id, d) for d in out]
    gts = {s.frame_id: s.gt for s in samples}
    return StrategyResult(strategy, average_precision(dets, gts, 0.5), average_precision(dets, gts, 0.7),
                          report, dets, len(samples))


def write_summary(path, results: list[StrategyResult]) -> None:
    doc = []
    for r in results:
        for ap in (r.ap50, r.ap70):
            doc.append({"strategy": r.strategy, "iou": ap.iou_thresh, "ap": ap.ap, "bytes_per_frame": r.bytes_per_frame})
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


def write_results_csv(path, results: list[StrategyResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "ap50", "ap70", "tp70", "fp70", "fn70", "bytes_per_frame"])
        for r in results:
            w.writerow([r.strategy, repr(r.ap50.ap), repr(r.ap70.ap), r.ap70.tp, r.ap70.fp, r.ap70.fn,
                        repr(r.bytes_per_frame)])


def sweep_temperature(train: list[Sample], test: list[Sample], preset: Preset, train_cfg: TrainConfig,
                      temps: Sequence[float] = (1, 2, 5, 10, 15, 20), seed: int = 0, kd: KdConfig | None = None,
                      path=None) -> list[dict]:
    """AP of the cooperative student trained at each distillation temperature (same seed)."""
    kd = kd or KdConfig()
    rows = []
    for t in temps:
        state = fit(train, preset, replace(kd, temperature=float(t)), train_cfg, seed)
        r = evaluate_strategy(test, state.model, "ahd")
        rows.append({"temperature": float(t), "ap50": r.ap50.ap, "ap70": r.ap70.ap})
    if path is not None:
        _write_rows(path, rows)
    return rows


ABLATION_TOGGLES = ("sparse_pillar", "ahd", "msa")


def ablation_config(kd: KdConfig, preset: Preset, toggles: dict[str, bool]) -> tuple[KdConfig, bool, MsaConfig]:
    unknown = set(toggles) - set(ABLATION_TOGGLES)
    if unknown:
        raise ValueError(f"unknown ablation toggle(s): {sorted(unknown)}")
    kd = kd if toggles.get("ahd", False) else replace(kd, lambda_kd=0.0)
    msa = preset.msa if toggles.get("msa", False) else replace(preset.msa, fusion="mean")
    return kd, bool(toggles.get("sparse_pillar", False)), msa


def run_ablation(train: list[Sample], test: list[Sample], preset: Preset, train_cfg: TrainConfig,
                 combos: Sequence[dict[str, bool]], seed: int = 0, kd: KdConfig | None = None,
                 path=None) -> list[dict]:
    """One AP row per toggle combination; all-off is dense backbone, no KD, mean fusion."""
    kd = kd or KdConfig()
    rows = []
    for combo in combos:
        k, sparse, msa = ablation_config(kd, preset, combo)
        state = fit(train, preset, k, train_cfg, seed, use_sparse=sparse, msa=msa)
        r = evaluate_strategy(test, state.model, "ahd")
        rows.append({**{t: bool(combo.get(t, False)) for t in ABLATION_TOGGLES}, "ap50": r.ap50.ap, "ap70": r.ap70.ap})
    if path is not None:
        _write_rows(path, rows)
    return rows


def _write_rows(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
