"""Asymmetric teacher/student distillation and the joint training loop.

The teacher encodes the fused multi-agent cloud (in the ego frame); the
student encodes each agent's own cloud. The student's ego feature is pulled
towards the teacher's by a temperature-softened KL term, while the full
cooperative pipeline (codec, warp, attention, heads) is trained on detection.
The teacher is trained jointly, from scratch, through its own detection head.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .backbone import PointEncoder
from .comms import BandwidthReport, Codec, broadcast, compress, decompress, neighbours
from .config import KdConfig, MsaConfig, Preset, TrainConfig, replace
from .detection import (IGNORE, NEGATIVE, DetectionHead, TargetAssignment, anchor_iou_table, assign_targets,
                        detection_loss, make_anchors)
from .fusion import AgentTokenGrid, GridSpec, MsaFusion, warp_feature
from .geometry import Box7, invert_transform, points_in_box, relative_transform, transform_box, transform_points
from .lidar_sim import SceneFrame
from .pillars import PillarBatch, pillar_index, pillarize
from .tensor_core import (Adam, Module, NonFiniteError, Tensor, getitem, log_softmax, mean, mul,
                          reshape, softmax, step_decay_lr, sum_, transpose)

log = logging.getLogger(__name__)


# -- point aggregation -----------------------------------------------------------
def crop_to_range(points: np.ndarray, voxel) -> np.ndarray:
    ok, _, _ = pillar_index(points, voxel)
    return points[ok]


def aggregate_point_clouds(frame: SceneFrame, ego_id: int, voxel, comm_range_m: float = float("inf")) -> np.ndarray:
    """Union of in-range agents' clouds in the ego frame, cropped to the detection range."""
    ego = frame.agent(ego_id)
    parts = []
    for a in sorted(frame.agents, key=lambda a: (a.agent_id != ego_id, a.agent_id)):
        if a.agent_id != ego_id and ego.pose.distance_to(a.pose) > comm_range_m:
            continue
        pts = a.cloud if a.agent_id == ego_id else transform_points(a.cloud, relative_transform(ego.pose, a.pose))
        parts.append(crop_to_range(np.asarray(pts, dtype=np.float32), voxel))
    return np.concatenate(parts).astype(np.float32) if parts else np.zeros((0, 3), np.float32)


# -- KD loss -----------------------------------------------------------------------
def kd_loss(f_t: Tensor, f_s: Tensor, temperature: float, mode: str = "channel") -> Tensor:
    """KL(softmax(F_t / T) || softmax(F_s / T)); the teacher side carries no gradient.

    ``channel``: distributions over channels at each location, KL averaged over locations.
    ``spatial``: distributions over locations for each channel, averaged over channels.
    """
    if f_t.shape != f_s.shape:
        raise ValueError(f"teacher {f_t.shape} and student {f_s.shape} features differ in shape")
    n, c, h, w = f_s.shape
    if mode == "channel":
        t = np.moveaxis(f_t.data, 1, -1).reshape(-1, c)
        s = reshape(transpose(f_s, (0, 2, 3, 1)), (n * h * w, c))
    elif mode == "spatial":
        t = f_t.data.reshape(n * c, h * w)
        s = reshape(f_s, (n * c, h * w))
    else:
        raise ValueError(f"unknown KD mode {mode!r}")
    teacher = Tensor(t.astype(f_s.data.dtype))
    p = softmax(teacher, axis=1, temperature=temperature).data
    log_p = log_softmax(teacher, axis=1, temperature=temperature).data
    log_q = log_softmax(s, axis=1, temperature=temperature)
    # sum_j p_j (log p_j - log q_j), constant part folded in as a plain array
    per = sum_(mul(log_q, -p), axis=1) + (p * log_p).sum(axis=1, dtype=np.float64).astype(p.dtype)
    return mean(per)


def total_loss(det, kd, cfg: KdConfig):
    return cfg.lambda_det * det + cfg.lambda_kd * kd


# -- models ------------------------------------------------------------------------
class CoopModel(Module):
    """All trainable parts: student pipeline (encoder, codec, fusion, head) and teacher (encoder, head)."""

    def __init__(self, preset: Preset, use_sparse: bool = True, msa: MsaConfig | None = None):
        self.preset = preset
        self.student = PointEncoder(preset.backbone("student", use_sparse=use_sparse), preset.voxel)
        self.teacher = PointEncoder(preset.backbone("teacher", use_sparse=use_sparse), preset.voxel)
        c = self.student.out_channels
        self.codec = Codec(c, preset.channel.compression_rate)
        self.fusion = MsaFusion(c, msa or preset.msa)
        n_anchors = len(preset.anchors.yaws)
        self.head = DetectionHead(self.fusion.out_channels, n_anchors)
        self.teacher_head = DetectionHead(c, n_anchors)

    def student_modules(self) -> list[tuple[str, Module]]:
        return [("student", self.student), ("codec", self.codec), ("fusion", self.fusion), ("head", self.head)]

    def teacher_modules(self) -> list[tuple[str, Module]]:
        return [("teacher", self.teacher), ("teacher_head", self.teacher_head)]

    def init_weights(self, seed: int, teacher_seed: int | None = None) -> "CoopModel":
        for name, m in self.student_modules():
            m.initialize(seed, name + ".")
        for name, m in self.teacher_modules():
            m.initialize(seed if teacher_seed is None else teacher_seed, name + ".")
        return self


@dataclass
class AgentInput:
    agent_id: int
    pose: object
    pillars: PillarBatch
    n_points: int                 # raw points in the agent's cloud (what early fusion would send)
    own_zone: np.ndarray | None = None   # anchors touching the agent's own car (its frame): never decoded


@dataclass
class Sample:
    """Everything the pipelines need from one frame, precomputed once."""
    frame_id: str
    ego_id: int
    agents: list[AgentInput]      # ego first, then in-range neighbours by id
    mix_pillars: PillarBatch
    gt: list[Box7]                # ego frame, evaluation range, >= 1 fused point, ego's own box removed
    targets: TargetAssignment
    transforms: dict[int, np.ndarray] = field(default_factory=dict)   # neighbour -> ego
    ego_box: Box7 | None = None   # the ego's own vehicle in its frame; a don't-care region

    @property
    def ego(self) -> AgentInput:
        return self.agents[0]


def ego_frame_gt(frame: SceneFrame, ego_id: int, voxel, mix: np.ndarray) -> list[Box7]:
    ego = frame.agent(ego_id)
    own = frame.own_box_index(ego_id)
    to_ego = invert_transform(ego.pose.matrix())
    out = []
    for i, b in enumerate(frame.gt_boxes):
        if i == own:
            continue
        eb = transform_box(b, to_ego)
        if not (voxel.x_range[0] <= eb.x < voxel.x_range[1] and voxel.y_range[0] <= eb.y < voxel.y_range[1]):
            continue
        if points_in_box(mix, eb, margin=0.05).any():
            out.append(eb)
    return out


def own_zone(frame: SceneFrame, agent_id: int, anchors: np.ndarray) -> np.ndarray | None:
    """Anchors whose footprint touches the agent's own car, in the agent's frame (None for roadside units)."""
    own = frame.own_box_index(agent_id)
    if own is None:
        return None
    box = transform_box(frame.gt_boxes[own], invert_transform(frame.agent(agent_id).pose.matrix()))
    return anchor_iou_table(anchors, box.as_array()[None])[:, 0] > 0


def prepare_sample(frame: SceneFrame, preset: Preset, anchors: np.ndarray, ego_id: int | None = None,
                   comm_range_m: float | None = None) -> Sample:
    ego_id = frame.ego.agent_id if ego_id is None else ego_id
    rng_m = preset.channel.comm_range_m if comm_range_m is None else comm_range_m
    channel = replace(preset.channel, comm_range_m=rng_m)
    poses = {a.agent_id: a.pose for a in frame.agents}
    ids = [ego_id] + neighbours(poses, ego_id, channel)
    agents = [AgentInput(i, poses[i], pillarize(frame.agent(i).cloud, preset.voxel), len(frame.agent(i).cloud),
                         own_zone(frame, i, anchors)) for i in ids]
    mix = aggregate_point_clouds(frame, ego_id, preset.voxel, rng_m)
    gt = ego_frame_gt(frame, ego_id, preset.voxel, mix)
    ego_pose = poses[ego_id]
    own = frame.own_box_index(ego_id)
    ego_box = None if own is None else transform_box(frame.gt_boxes[own], invert_transform(ego_pose.matrix()))
    targets = assign_targets(anchors, gt, preset.anchors)
    if agents[0].own_zone is not None:
        # neighbours see the ego's car, but it is not a detection target: never penalize either way
        targets.labels[agents[0].own_zone & (targets.labels == NEGATIVE)] = IGNORE
    return Sample(frame.frame_id, ego_id, agents, pillarize(mix, preset.voxel), gt, targets,
                  {i: relative_transform(ego_pose, poses[i]) for i in ids[1:]}, ego_box)


# -- forward passes ----------------------------------------------------------------
def cooperative_forward(model: CoopModel, sample: Sample, report: BandwidthReport | None = None,
                        agent_ids: list[int] | None = None):
    """Ego pipeline: per-agent student features, codec, broadcast, warp, fusion, heads.

    Returns (y_cls, y_reg, ego student feature).
    """
    agents = sample.agents if agent_ids is None else [a for a in sample.agents if a.agent_id in agent_ids]
    feats = model.student([a.pillars for a in agents])
    ego_feat = getitem(feats, slice(0, 1)) if len(agents) > 1 else feats
    grid_spec = GridSpec.from_voxel(model.preset.voxel, model.preset.feature_stride)
    payloads = {a.agent_id: compress(getitem(feats, slice(k, k + 1)), model.codec)
                for k, a in enumerate(agents) if k > 0}
    poses = {a.agent_id: a.pose for a in agents}
    # everyone in `agents` is already known to be in range
    channel = replace(model.preset.channel, comm_range_m=float("inf"))
    others = []
    for msg in broadcast(poses, sample.ego_id, channel, payloads, report, sample.frame_id, "ahd"):
        warped, valid = warp_feature(decompress(msg.payload, model.codec), sample.transforms[msg.sender_id], grid_spec)
        others.append((msg.sender_id, warped, valid))
    fused = model.fusion(AgentTokenGrid.build(sample.ego_id, ego_feat, others))
    y_cls, y_reg = model.head(fused)
    return y_cls, y_reg, ego_feat


def single_view_forward(model: CoopModel, pillars: PillarBatch):
    """Student pipeline on one agent with nobody to talk to."""
    feat = model.student(pillars)
    y_cls, y_reg = model.head(model.fusion(AgentTokenGrid.build(0, feat, [])))
    return y_cls, y_reg, feat


def teacher_forward_pass(model: CoopModel, pillars: PillarBatch):
    feat = model.teacher(pillars)
    y_cls, y_reg = model.teacher_head(feat)
    return y_cls, y_reg, feat


# -- training ---------------------------------------------------------------------------
@dataclass
class TrainState:
    model: CoopModel
    optimizer: Adam
    epoch: int = 0
    seed: int = 0
    teacher_seed: int = 0
    history: list[dict] = field(default_factory=list)

    @classmethod
    def create(cls, preset: Preset, train: TrainConfig, seed: int = 0, teacher_seed: int | None = None,
               use_sparse: bool = True, msa: MsaConfig | None = None) -> "TrainState":
        ts = seed if teacher_seed is None else teacher_seed
        model = CoopModel(preset, use_sparse, msa).init_weights(seed, ts)
        params = [p for _, m in model.student_modules() + model.teacher_modules() for p in m.parameters()]
        return cls(model, Adam(params, train.lr, train.betas, train.eps), 0, seed, ts)


def _frame_losses(model: CoopModel, s: Sample, kd: KdConfig, train_teacher: bool):
    y_cls, y_reg, f_s = cooperative_forward(model, s)
    l_cls, l_reg = detection_loss(y_cls, y_reg, s.targets, model.preset.anchors)
    l_det = l_cls + l_reg
    l_kd = None
    l_teacher = None
    if train_teacher or kd.lambda_kd > 0:
        t_cls, t_reg, f_t = teacher_forward_pass(model, s.mix_pillars)
        if train_teacher:
            tc, tr = detection_loss(t_cls, t_reg, s.targets, model.preset.anchors)
            l_teacher = tc + tr
        l_kd = kd_loss(f_t.detach(), f_s, kd.temperature, kd.mode)
    loss = mul(l_det, kd.lambda_det)
    if l_kd is not None and kd.lambda_kd > 0:
        loss = loss + mul(l_kd, kd.lambda_kd)
    return loss, l_det, l_kd, l_teacher


def train_epoch(samples: list[Sample], state: TrainState, kd: KdConfig, train: TrainConfig) -> dict:
    """One pass over ``samples`` (shuffled by seed and epoch); one Adam step per batch."""
    if not samples:
        raise ValueError("train_epoch needs at least one frame")
    model = state.model.train()
    lr = step_decay_lr(train.lr, state.epoch, train.lr_step, train.lr_gamma)
    state.optimizer.lr = lr
    order = np.random.default_rng([state.seed, state.epoch]).permutation(len(samples))
    sums = {"l_det": 0.0, "l_kd": 0.0, "l_total": 0.0, "l_teacher": 0.0}
    bs = max(1, train.batch_size)
    for start in range(0, len(order), bs):
        state.optimizer.zero_grad()
        batch = order[start:start + bs]
        for i in batch:
            s = samples[i]
            loss, l_det, l_kd, l_teacher = _frame_losses(model, s, kd, train.train_teacher)
            objective = loss if l_teacher is None else loss + l_teacher
            if len(batch) > 1:
                objective = mul(objective, 1.0 / len(batch))
            try:
                objective.backward()
            except NonFiniteError as e:
                raise NonFiniteError(f"non-finite loss at epoch {state.epoch}, frame {s.frame_id}: "
                                     f"l_det={l_det.item()!r} l_kd={None if l_kd is None else l_kd.item()!r}") from e
            sums["l_det"] += l_det.item()
            sums["l_kd"] += 0.0 if l_kd is None else l_kd.item()
            sums["l_total"] += loss.item()
            sums["l_teacher"] += 0.0 if l_teacher is None else l_teacher.item()
        state.optimizer.step()
    n = len(samples)
    metrics = {"epoch": state.epoch, **{k: v / n for k, v in sums.items()}, "lr": lr}
    state.history.append(metrics)
    log.info("epoch %d  l_det %.5f  l_kd %.5f  l_total %.5f  lr %g", state.epoch, metrics["l_det"],
             metrics["l_kd"], metrics["l_total"], lr)
    state.epoch += 1
    return metrics


METRIC_FIELDS = ["epoch", "l_det", "l_kd", "l_total", "lr"]


def write_metrics_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for m in history:
            w.writerow([m["epoch"]] + [repr(float(m[k])) for k in METRIC_FIELDS[1:]])


def build_samples(frames: list[SceneFrame], preset: Preset, threads: int = 1) -> list[Sample]:
    """Per-frame preprocessing; frames are independent, so ``threads > 1`` maps them on a pool (order kept)."""
    anchors = make_anchors(GridSpec.from_voxel(preset.voxel, preset.feature_stride), preset.anchors)
    if threads <= 1 or len(frames) < 2:
        return [prepare_sample(f, preset, anchors) for f in frames]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda f: prepare_sample(f, preset, anchors), frames))


def fit(samples: list[Sample], preset: Preset, kd: KdConfig, train: TrainConfig, seed: int = 0,
        teacher_seed: int | None = None, use_sparse: bool = True, msa: MsaConfig | None = None) -> TrainState:
    state = TrainState.create(preset, train, seed, teacher_seed, use_sparse, msa)
    for _ in range(train.epochs):
        train_epoch(samples, state, kd, train)
    state.model.eval()
    return state
