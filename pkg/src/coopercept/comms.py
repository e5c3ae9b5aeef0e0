"""Channel-wise feature codec, range-gated broadcast and bandwidth accounting.

The channel is synchronous, lossless and has no latency. Payload sizes are
accounted as float32 regardless of the compute dtype.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping

from .config import ChannelConfig
from .geometry import Pose
from .tensor_core import Conv2d, Module, Tensor

BYTES_PER_FLOAT = 4


class Codec(Module):
    """1x1 conv encoder C -> C/r and decoder C/r -> C."""

    def __init__(self, channels: int, rate: int):
        if rate < 1 or channels % rate:
            raise ValueError(f"compression rate {rate} does not divide {channels} channels")
        self.channels, self.rate = channels, rate
        self.encoder = Conv2d(channels, channels // rate, 1)
        self.decoder = Conv2d(channels // rate, channels, 1)

    @property
    def code_channels(self) -> int:
        return self.channels // self.rate


def compress(f: Tensor, codec: Codec) -> Tensor:
    if f.shape[1] != codec.channels:
        raise ValueError(f"codec built for {codec.channels} channels, feature has {f.shape[1]}")
    return codec.encoder(f)


def decompress(payload: Tensor, codec: Codec) -> Tensor:
    if payload.ndim != 4 or payload.shape[1] != codec.code_channels:
        raise ValueError(f"payload must be [N, {codec.code_channels}, H, W], got {payload.shape}")
    return codec.decoder(payload)


def payload_nbytes(shape) -> int:
    n = 1
    for d in shape[1:] if len(shape) == 4 else shape:
        n *= int(d)
    return n * BYTES_PER_FLOAT


@dataclass
class FeatureMessage:
    sender_id: int
    sender_pose: Pose
    payload: Tensor
    payload_bytes: int = 0

    def __post_init__(self):
        self.payload_bytes = payload_nbytes(self.payload.shape)


@dataclass
class BandwidthReport:
    rows: list[tuple[str, int, int, int, str]] = field(default_factory=list)

    def add(self, frame_id: str, sender: int, receiver: int, nbytes: int, strategy: str) -> None:
        self.rows.append((str(frame_id), int(sender), int(receiver), int(nbytes), strategy))

    def extend(self, other: "BandwidthReport") -> None:
        self.rows.extend(other.rows)

    @property
    def total_bytes(self) -> int:
        return sum(r[3] for r in self.rows)

    def bytes_per_frame(self) -> float:
        frames = {r[0] for r in self.rows}
        return self.total_bytes / len(frames) if frames else 0.0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame_id", "sender", "receiver", "bytes", "strategy"])
            w.writerows(self.rows)

    @classmethod
    def from_csv(cls, path) -> "BandwidthReport":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([(r["frame_id"], int(r["sender"]), int(r["receiver"]), int(r["bytes"]), r["strategy"])
                    for r in rows])


def in_range(ego: Pose, other: Pose, comm_range_m: float) -> bool:
    """Closed ball: an agent at exactly ``comm_range_m`` is in range."""
    return ego.distance_to(other) <= comm_range_m


def neighbours(poses: Mapping[int, Pose], ego_id: int, channel: ChannelConfig) -> list[int]:
    """Ids of agents (ego excluded) within range of the ego, ascending."""
    ego = poses[ego_id]
    return sorted(i for i, p in poses.items() if i != ego_id and in_range(ego, p, channel.comm_range_m))


def broadcast(poses: Mapping[int, Pose], ego_id: int, channel: ChannelConfig,
              payloads: Mapping[int, Tensor], report: BandwidthReport | None = None,
              frame_id: str = "", strategy: str = "ahd") -> list[FeatureMessage]:
    """Messages the ego receives, ordered by sender id; bytes are logged to ``report``."""
    msgs = []
    for i in neighbours(poses, ego_id, channel):
        msg = FeatureMessage(i, poses[i], payloads[i])
        if report is not None:
            report.add(frame_id, i, ego_id, msg.payload_bytes, strategy)
        msgs.append(msg)
    return msgs
