"""Synthetic multi-agent LiDAR scenes and the JSON frame format.

Agent frames sit on the ground directly below the sensor (z measured from the
ground plane), rotated by the agent's yaw. ``Pose.z`` is the sensor mounting
height. Vehicles carry 16-ring sensors; roadside units are mounted higher and
carry 32 rings, so their clouds are denser.
"""
from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import SceneGenConfig
from .geometry import Box7, Pose, invert_transform, rotated_iou_bev

FRAME_VERSION = 1
VEHICLE, INFRA = "V", "I"


@dataclass
class Agent:
    agent_id: int
    kind: str
    pose: Pose
    cloud: np.ndarray = field(repr=False)  # [N, 3] float32, agent frame

    def __post_init__(self):
        if self.kind not in (VEHICLE, INFRA):
            raise ValueError(f"agent kind must be 'V' or 'I', got {self.kind!r}")
        self.cloud = np.asarray(self.cloud, dtype=np.float32).reshape(-1, 3)

    def __eq__(self, other):
        return (isinstance(other, Agent) and self.agent_id == other.agent_id and self.kind == other.kind
                and self.pose == other.pose and np.array_equal(self.cloud, other.cloud))


@dataclass
class SceneFrame:
    frame_id: str
    agents: list[Agent]
    gt_boxes: list[Box7]   # world frame

    def __post_init__(self):
        if not self.agents:
            raise ValueError("a frame needs at least one agent")
        ids = [a.agent_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ValueError("agent ids must be unique")

    def agent(self, agent_id: int) -> Agent:
        for a in self.agents:
            if a.agent_id == agent_id:
                return a
        raise KeyError(f"no agent {agent_id} in frame {self.frame_id}")

    @property
    def ego(self) -> Agent:
        return self.agents[0]

    def own_box_index(self, agent_id: int) -> int | None:
        """Index of the gt box the agent rides on (vehicles), else None."""
        a = self.agent(agent_id)
        if a.kind != VEHICLE:
            return None
        for i, b in enumerate(self.gt_boxes):
            if _point_in_box(a.pose.x, a.pose.y, b):
                return i
        return None


def _point_in_box(x: float, y: float, b: Box7) -> bool:
    c, s = math.cos(b.theta), math.sin(b.theta)
    dx, dy = x - b.x, y - b.y
    return abs(dx * c + dy * s) <= b.l / 2 and abs(-dx * s + dy * c) <= b.w / 2


# -- ray casting -------------------------------------------------------------------
def ray_directions(azimuth_res_deg: float, elevations_deg) -> np.ndarray:
    """Unit ray directions [n_az * n_rings, 3], ring-major."""
    az = np.deg2rad(np.arange(0.0, 360.0, azimuth_res_deg))
    el = np.deg2rad(np.asarray(elevations_deg, dtype=np.float64))
    ce, se = np.cos(el)[:, None], np.sin(el)[:, None]
    d = np.stack([ce * np.cos(az)[None], ce * np.sin(az)[None], np.broadcast_to(se, (len(el), len(az)))], axis=-1)
    return d.reshape(-1, 3)


def cast_rays(origin: np.ndarray, dirs: np.ndarray, boxes: list[Box7], max_range: float,
              ground: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit of each ray against the ground plane z=0 and oriented boxes.

    Returns (points [M, 3] float64, hit_id [M]) for rays that hit within
    ``max_range``; hit_id is the box index or -1 for ground.
    """
    origin = np.asarray(origin, dtype=np.float64)
    n = len(dirs)
    best_t = np.full(n, np.inf)
    best_id = np.full(n, -2, dtype=np.int64)
    if ground:
        dz = dirs[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(dz < 0, -origin[2] / dz, np.inf)
        hit = (t > 0) & (t < best_t)
        best_t[hit], best_id[hit] = t[hit], -1
    for i, b in enumerate(boxes):
        c, s = math.cos(b.theta), math.sin(b.theta)
        # ray in the box's local frame
        ox, oy = origin[0] - b.x, origin[1] - b.y
        lo = np.array([c * ox + s * oy, -s * ox + c * oy, origin[2] - b.z])
        ld = np.stack([c * dirs[:, 0] + s * dirs[:, 1], -s * dirs[:, 0] + c * dirs[:, 1], dirs[:, 2]], axis=1)
        half = np.array([b.l / 2, b.w / 2, b.h / 2])
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / ld
            t1 = (-half - lo) * inv
            t2 = (half - lo) * inv
        # parallel rays: inside the slab -> (-inf, inf), outside -> empty
        par = ld == 0
        inside = np.abs(lo) <= half
        t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
        t2 = np.where(par, np.where(inside, np.inf, -np.inf), t2)
        tnear = np.max(np.minimum(t1, t2), axis=1)
        tfar = np.min(np.maximum(t1, t2), axis=1)
        ok = (tnear <= tfar) & (tnear > 0) & (tnear < best_t)
        best_t[ok], best_id[ok] = tnear[ok], i
    keep = np.isfinite(best_t) & (best_t <= max_range)
    pts = origin + best_t[keep, None] * dirs[keep]
    return pts, best_id[keep]


def agent_lidar(pose: Pose, kind: str, boxes_world: list[Box7], cfg: SceneGenConfig,
                exclude: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Scan the scene from an agent; returns float64 points in the agent frame and hit ids."""
    if kind == VEHICLE:
        rings, fov = cfg.vehicle_rings, cfg.vehicle_fov
    else:
        rings, fov = cfg.rsu_rings, cfg.rsu_fov
    dirs = ray_directions(cfg.azimuth_res_deg, np.linspace(fov[0], fov[1], rings))
    to_agent = invert_transform(pose.matrix())
    local_boxes, ids = [], []
    for i, b in enumerate(boxes_world):
        if i == exclude:
            continue
        cx, cy = to_agent[:2, :2] @ [b.x, b.y] + to_agent[:2, 2]
        local_boxes.append(Box7(cx, cy, b.z, b.w, b.l, b.h, b.theta - pose.yaw))
        ids.append(i)
    pts, hit = cast_rays(np.array([0.0, 0.0, pose.z]), dirs, local_boxes, cfg.max_range)
    ids = np.array(ids + [-1], dtype=np.int64)
    return pts, np.where(hit >= 0, ids[np.clip(hit, 0, None)], -1)


# -- scene generation ------------------------------------------------------------------
class PlacementError(RuntimeError):
    pass


def _sample_vehicle(rng, cx, cy, base_yaw) -> Box7:
    w, l, h = rng.uniform(1.7, 2.1), rng.uniform(3.9, 4.9), rng.uniform(1.4, 1.9)
    yaw = base_yaw + rng.choice([0.0, math.pi / 2, math.pi, -math.pi / 2]) + rng.normal(0, 0.05)
    return Box7(cx, cy, h / 2, w, l, h, yaw)


def _overlaps(b: Box7, others: list[Box7], margin: float = 0.5) -> bool:
    grown = Box7(b.x, b.y, b.z, b.w + 2 * margin, b.l + 2 * margin, b.h, b.theta)
    return any(rotated_iou_bev(grown, o) > 0 for o in others)


def generate_scene(cfg: SceneGenConfig, seed: int, frame_id: str | None = None) -> SceneFrame:
    """Random road scene: vehicles, cooperating agents and their LiDAR scans. Deterministic per seed."""
    rng = np.random.default_rng(seed)
    origin = rng.uniform(-50, 50, size=2)
    base_yaw = rng.uniform(-math.pi, math.pi)
    n_veh = int(rng.integers(cfg.n_vehicles[0], cfg.n_vehicles[1] + 1))
    rot = np.array([[math.cos(base_yaw), -math.sin(base_yaw)], [math.sin(base_yaw), math.cos(base_yaw)]])

    boxes: list[Box7] = []
    for i in range(n_veh):
        for _ in range(cfg.max_retries):
            if i == 0:
                local = np.zeros(2)
            elif i < cfg.n_agents[1]:
                # candidates for cooperating agents stay close to the ego
                r = rng.uniform(4.0, cfg.agent_radius)
                a = rng.uniform(-math.pi, math.pi)
                local = np.array([r * math.cos(a), r * math.sin(a)])
            else:
                local = rng.uniform(-cfg.half_extent, cfg.half_extent, size=2)
            cx, cy = origin + rot @ local
            cand = _sample_vehicle(rng, float(cx), float(cy), base_yaw)
            if i == 0:
                cand = Box7(cand.x, cand.y, cand.z, cand.w, cand.l, cand.h, base_yaw)
            if not _overlaps(cand, boxes):
                boxes.append(cand)
                break
        else:
            raise PlacementError(f"could not place vehicle {i} after {cfg.max_retries} tries")

    agents_spec: list[tuple[str, Pose, int | None]] = []
    if boxes:
        ego_box = boxes[0]
        agents_spec.append((VEHICLE, Pose(ego_box.x, ego_box.y, cfg.vehicle_height, ego_box.theta), 0))
        n_agents = int(rng.integers(cfg.n_agents[0], cfg.n_agents[1] + 1))
        use_rsu = n_agents > 1 and rng.random() < cfg.rsu_prob
        near = [i for i in range(1, len(boxes))
                if math.hypot(boxes[i].x - ego_box.x, boxes[i].y - ego_box.y) <= cfg.agent_radius]
        n_veh_agents = min(len(near), n_agents - 1 - int(use_rsu))
        for i in sorted(rng.choice(near, size=n_veh_agents, replace=False).tolist()) if n_veh_agents > 0 else []:
            b = boxes[i]
            agents_spec.append((VEHICLE, Pose(b.x, b.y, cfg.vehicle_height, b.theta), i))
        if use_rsu or len(agents_spec) < n_agents:
            pose = _place_rsu(rng, ego_box, boxes, cfg)
            if pose is not None:
                agents_spec.append((INFRA, pose, None))
    else:
        agents_spec.append((INFRA, Pose(float(origin[0]), float(origin[1]), cfg.rsu_height, base_yaw), None))

    agents = []
    for agent_id, (kind, pose, own) in enumerate(agents_spec):
        pts, _ = agent_lidar(pose, kind, boxes, cfg, exclude=own)
        if cfg.jitter > 0:
            pts = pts + rng.normal(0, cfg.jitter, size=pts.shape)
        agents.append(Agent(agent_id, kind, pose, pts.astype(np.float32)))
    return SceneFrame(frame_id if frame_id is not None else f"{seed:06d}", agents, boxes)


def _place_rsu(rng, ego_box: Box7, boxes: list[Box7], cfg: SceneGenConfig) -> Pose | None:
    for _ in range(cfg.max_retries):
        r = rng.uniform(3.0, cfg.agent_radius)
        a = rng.uniform(-math.pi, math.pi)
        x, y = ego_box.x + r * math.cos(a), ego_box.y + r * math.sin(a)
        if not any(_point_in_box(x, y, Box7(b.x, b.y, b.z, b.w + 1, b.l + 1, b.h, b.theta)) for b in boxes):
            return Pose(x, y, cfg.rsu_height, rng.uniform(-math.pi, math.pi))
    return None


# -- frame IO -------------------------------------------------------------------------
class FrameFormatError(ValueError):
    pass


def frame_to_dict(frame: SceneFrame) -> dict:
    return {
        "version": FRAME_VERSION,
        "frame_id": frame.frame_id,
        "agents": [{
            "id": a.agent_id,
            "kind": a.kind,
            "pose": a.pose.as_list(),
            "points": base64.b64encode(np.ascontiguousarray(a.cloud, dtype="<f4").tobytes()).decode("ascii"),
        } for a in frame.agents],
        "gt_boxes": [b.as_array().tolist() for b in frame.gt_boxes],
    }


def save_frame(frame: SceneFrame, path) -> None:
    Path(path).write_text(json.dumps(frame_to_dict(frame)))


def frame_from_dict(doc) -> SceneFrame:
    def need(obj, key, where):
        if not isinstance(obj, dict) or key not in obj:
            raise FrameFormatError(f"missing field {where}{key}")
        return obj[key]

    if need(doc, "version", "") != FRAME_VERSION:
        raise FrameFormatError(f"field version: unsupported value {doc['version']!r}")
    agents_doc = need(doc, "agents", "")
    if not isinstance(agents_doc, list) or not agents_doc:
        raise FrameFormatError("field agents: a frame needs at least one agent")
    agents = []
    for i, ad in enumerate(agents_doc):
        where = f"agents[{i}]."
        pose = need(ad, "pose", where)
        if not isinstance(pose, list) or len(pose) != 4:
            raise FrameFormatError(f"field {where}pose: expected [x, y, z, yaw]")
        try:
            raw = base64.b64decode(need(ad, "points", where), validate=True)
        except (ValueError, TypeError) as exc:
            raise FrameFormatError(f"field {where}points: bad base64 ({exc})") from None
        if len(raw) % 12:
            raise FrameFormatError(f"field {where}points: {len(raw)} bytes is not a whole number of xyz triplets")
        cloud = np.frombuffer(raw, dtype="<f4").reshape(-1, 3).astype(np.float32)
        try:
            agents.append(Agent(int(need(ad, "id", where)), need(ad, "kind", where), Pose(*map(float, pose)), cloud))
        except ValueError as exc:
            raise FrameFormatError(f"field {where[:-1]}: {exc}") from None
    boxes = []
    for j, bd in enumerate(need(doc, "gt_boxes", "")):
        if not isinstance(bd, list) or len(bd) != 7:
            raise FrameFormatError(f"field gt_boxes[{j}]: expected 7 numbers")
        try:
            boxes.append(Box7(*map(float, bd)))
        except ValueError as exc:
            raise FrameFormatError(f"field gt_boxes[{j}]: {exc}") from None
    return SceneFrame(str(need(doc, "frame_id", "")), agents, boxes)


def load_frame(path) -> SceneFrame:
    text = Path(path).read_bytes()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FrameFormatError(f"malformed frame file {path}: {exc.msg} at byte offset {exc.pos}") from None
    except UnicodeDecodeError as exc:
        raise FrameFormatError(f"malformed frame file {path}: bad utf-8 at byte offset {exc.start}") from None
    return frame_from_dict(doc)
