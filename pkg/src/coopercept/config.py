"""Configuration dataclasses and the ``paper`` / ``tiny`` presets."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace


@dataclass(frozen=True)
class VoxelConfig:
    x_range: tuple[float, float] = (-140.8, 140.8)
    y_range: tuple[float, float] = (-38.4, 38.4)
    z_range: tuple[float, float] = (-1.0, 3.0)
    voxel_xy: float = 0.4
    voxel_z: float = 4.0
    max_points_per_pillar: int = 32
    max_pillars: int = 12000

    def __post_init__(self):
        for lo_hi, size, axis in ((self.x_range, self.voxel_xy, "x"), (self.y_range, self.voxel_xy, "y"),
                                  (self.z_range, self.voxel_z, "z")):
            n = (lo_hi[1] - lo_hi[0]) / size
            if lo_hi[1] <= lo_hi[0] or abs(n - round(n)) > 1e-9 * max(1.0, n):
                raise ValueError(f"{axis} range {lo_hi} is not a positive multiple of voxel size {size}")

    @property
    def grid_w(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.voxel_xy))

    @property
    def grid_h(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.voxel_xy))


@dataclass(frozen=True)
class BackboneConfig:
    variant: str = "student"
    stage_channels: tuple[int, ...] = (32, 64, 128, 256, 256)
    blocks_per_stage: tuple[int, ...] = (2, 2, 2, 2, 2)
    sparse_stages: int = 4          # leading stages that use sparse conv; the rest are dense
    use_sparse: bool = True         # False -> plain dense conv everywhere (ablation baseline)

    def __post_init__(self):
        if len(self.stage_channels) < 2 or len(self.stage_channels) != len(self.blocks_per_stage):
            raise ValueError("need >= 2 stages with one block count per stage")
        if self.variant not in ("teacher", "student"):
            raise ValueError(f"unknown backbone variant {self.variant!r}")

    @property
    def out_channels(self) -> int:
        return self.stage_channels[-1] // 2 + self.stage_channels[-2]


TEACHER_BLOCKS = (2, 3, 3, 3, 3)
STUDENT_BLOCKS = (2, 2, 2, 2, 2)


@dataclass(frozen=True)
class ChannelConfig:
    comm_range_m: float = 70.0
    compression_rate: int = 32

    def __post_init__(self):
        if self.comm_range_m < 0:
            raise ValueError("comm_range_m must be >= 0")
        if self.compression_rate < 1:
            raise ValueError("compression_rate must be >= 1")


@dataclass(frozen=True)
class MsaConfig:
    model_dim: int = 256
    heads: int = 3
    head_dim: int = 0               # 0 -> model_dim // heads
    fusion: str = "msa"             # "msa" or "mean" (ablation)
    query: str = "ego"              # "ego" row or "mean" over tokens

    @property
    def resolved_head_dim(self) -> int:
        return self.head_dim or self.model_dim // self.heads


@dataclass(frozen=True)
class AnchorConfig:
    w: float = 1.6
    l: float = 3.9
    h: float = 1.56
    yaws: tuple[float, ...] = (0.0, math.pi / 2)
    z_center: float = 0.78
    pos_iou: float = 0.6
    neg_iou: float = 0.45
    score_thresh: float = 0.2
    nms_iou: float = 0.15
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


@dataclass(frozen=True)
class KdConfig:
    temperature: float = 10.0
    lambda_det: float = 1.0
    lambda_kd: float = 1.0
    mode: str = "channel"           # softmax over channels per location, or "spatial"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.lambda_det < 0 or self.lambda_kd < 0:
            raise ValueError("loss weights must be >= 0")
        if self.mode not in ("channel", "spatial"):
            raise ValueError(f"unknown KD mode {self.mode!r}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 60
    lr_step: int = 20
    lr_gamma: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 1             # frames per Adam step
    train_teacher: bool = True      # teacher learns through its own head alongside the student


@dataclass(frozen=True)
class SceneGenConfig:
    n_vehicles: tuple[int, int] = (4, 8)       # inclusive range of vehicles (agents included)
    n_agents: tuple[int, int] = (2, 5)         # inclusive range of cooperating agents
    rsu_prob: float = 0.5                      # chance one agent is a roadside unit
    half_extent: float = 12.0                  # vehicles placed in [-e, e]^2 around the ego
    agent_radius: float = 8.0                  # non-ego agents within this distance of the ego
    azimuth_res_deg: float = 0.5
    vehicle_rings: int = 16
    rsu_rings: int = 32
    vehicle_fov: tuple[float, float] = (-25.0, 5.0)
    rsu_fov: tuple[float, float] = (-40.0, 5.0)
    vehicle_height: float = 1.8
    rsu_height: float = 5.0
    max_range: float = 100.0
    jitter: float = 0.0
    max_retries: int = 200


@dataclass(frozen=True)
class Preset:
    name: str
    voxel: VoxelConfig
    stage_channels: tuple[int, ...]
    channel: ChannelConfig
    msa: MsaConfig
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    scene: SceneGenConfig = field(default_factory=SceneGenConfig)

    def backbone(self, variant: str, **overrides) -> BackboneConfig:
        blocks = TEACHER_BLOCKS if variant == "teacher" else STUDENT_BLOCKS
        return BackboneConfig(variant=variant, stage_channels=self.stage_channels,
                              blocks_per_stage=blocks[:len(self.stage_channels)], **overrides)

    @property
    def feature_stride(self) -> int:
        return 4

    @property
    def feature_cell(self) -> float:
        return self.voxel.voxel_xy * self.feature_stride


PAPER = Preset(
    name="paper",
    voxel=VoxelConfig(),
    stage_channels=(32, 64, 128, 256, 256),
    channel=ChannelConfig(70.0, 32),
    msa=MsaConfig(model_dim=256, heads=3),
)

TINY = Preset(
    name="tiny",
    voxel=VoxelConfig(x_range=(-9.6, 9.6), y_range=(-9.6, 9.6), z_range=(-1.0, 3.0),
                      voxel_xy=0.4, voxel_z=4.0, max_points_per_pillar=32, max_pillars=2304),
    stage_channels=(8, 16, 32, 32, 32),
    channel=ChannelConfig(70.0, 16),
    msa=MsaConfig(model_dim=24, heads=3),
)

PRESETS = {"paper": PAPER, "tiny": TINY}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def to_dict(obj) -> dict:
    return asdict(obj) if is_dataclass(obj) else dict(obj)


def from_dict(cls, data: dict):
    """Build a (possibly nested) frozen dataclass, rejecting unknown keys."""
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise KeyError(f"unknown key(s) for {cls.__name__}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = known[name].type
        sub = _DATACLASSES.get(ftype if isinstance(ftype, str) else getattr(ftype, "__name__", ""))
        if sub is not None and isinstance(value, dict):
            value = from_dict(sub, value)
        elif isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[name] = value
    return cls(**kwargs)


_DATACLASSES = {c.__name__: c for c in (VoxelConfig, BackboneConfig, ChannelConfig, MsaConfig, AnchorConfig,
                                        KdConfig, TrainConfig, SceneGenConfig)}

__all__ = ["VoxelConfig", "BackboneConfig", "ChannelConfig", "MsaConfig", "AnchorConfig", "KdConfig",
           "TrainConfig", "SceneGenConfig", "Preset", "PAPER", "TINY", "PRESETS", "get_preset",
           "to_dict", "from_dict", "replace", "TEACHER_BLOCKS", "STUDENT_BLOCKS"]
