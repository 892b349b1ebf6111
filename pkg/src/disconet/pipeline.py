"""Per-scene inputs and the teacher / student forward passes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import Box
from .channel import ChannelLog, broadcast_round
from .geometry import BEVGridSpec, Pose, merge_point_clouds, relative_pose, voxelize, warp_feature_map
from .graph import Collaboration, transmit
from .networks import FEATURE_STAGE, Compressor, DetectionRaster, PerceptionNet
from .nn import Module
from .scene import Scene, local_ground_truth
from .evaluation import encode_targets
from .tensor import Tensor, stack, take


@dataclass
class SceneSample:
    """Everything training and evaluation need from one scene, per agent."""

    poses: list[Pose]
    single: np.ndarray     # (M, C, K, K) uint8, own scan
    holistic: np.ndarray   # (M, C, K, K) uint8, all scans in the agent frame
    gt: list[list[Box]]
    cls: np.ndarray        # (M, 1, K, K)
    reg: np.ndarray        # (M, 6, K, K)

    @property
    def agent_count(self) -> int:
        return len(self.poses)

    def inputs(self, holistic: bool = False, dtype=np.float64) -> Tensor:
        return Tensor((self.holistic if holistic else self.single).astype(dtype))


def holistic_points(scene: Scene, agent: int) -> np.ndarray:
    """All agents' points, merged globally, then expressed in ``agent``'s frame."""
    merged = merge_point_clouds(scene.observations())
    return scene.agents[agent].inverse().apply(merged)


def prepare_sample(scene: Scene, spec: BEVGridSpec) -> SceneSample:
    m = scene.agent_count
    single, holo, gts, cls, reg = [], [], [], [], []
    for i in range(m):
        single.append(voxelize(scene.points[i], spec).as_input().astype(np.uint8))
        holo.append(voxelize(holistic_points(scene, i), spec).as_input().astype(np.uint8))
        g = local_ground_truth(scene, i, spec)
        c, r, _ = encode_targets(g, spec)
        gts.append(g)
        cls.append(c)
        reg.append(r)
    return SceneSample(list(scene.agents), np.stack(single), np.stack(holo), gts, np.stack(cls), np.stack(reg))


@dataclass
class ForwardResult:
    feature: Tensor        # F, (M, C, Kb, Kb)
    fused: Tensor          # H, (M, C, Kb, Kb)
    maps: list[Tensor]     # M1..M4
    raster: DetectionRaster
    weights: list = field(default_factory=list)  # per receiver: list of edge weights or None
    log: ChannelLog | None = None

    def layer(self, name: str) -> Tensor:
        if name == "H":
            return self.fused
        return self.maps[int(name[1:]) - 1]


def teacher_forward(net: PerceptionNet, bevs: Tensor) -> ForwardResult:
    enc = net.encode(bevs)
    maps = net.decode(enc.feature, enc.skips)
    return ForwardResult(enc.feature, enc.feature, maps, net.detect_head(maps[-1]))


class StudentModel(Module):
    """Intermediate-collaboration detector: shared net, compressor and fusion rule."""

    def __init__(self, in_channels: int, widths, fusion: str = "disco", ratio: int = 1, seed: int = 0,
                 warp_mode: str = "bilinear"):
        rng = np.random.default_rng(seed + 7919)
        self.net = PerceptionNet(in_channels, widths, seed)
        channels = widths[FEATURE_STAGE]
        self.fusion = fusion
        self.ratio = ratio
        self.warp_mode = warp_mode
        if fusion != "none":
            self.compressor = Compressor(channels, ratio, rng=rng)
        self.collab = Collaboration(fusion, channels, rng=rng)

    def forward(self, bevs: Tensor, poses: list[Pose], spec: BEVGridSpec, collaborate: bool = True,
                log: ChannelLog | None = None) -> ForwardResult:
        enc = self.net.encode(bevs)
        feat = enc.feature
        m = feat.shape[0]
        fspec = spec.scaled(spec.size // feat.shape[-1])
        weights: list = [None] * m
        if not collaborate or self.fusion == "none" or m == 1:
            fused = feat
        else:
            own = [take(feat, i) for i in range(m)]
            msgs = [transmit(own[j], poses[j], self.compressor, j) for j in range(m)]
            inboxes, log = broadcast_round(msgs, log)
            # broadcast: every receiver decodes the same payload
            decoded = {}
            for inbox in inboxes:
                for msg in inbox:
                    if msg.sender not in decoded:
                        decoded[msg.sender] = (msg.pose, self.compressor.decompress(msg.payload))
            fused_list = []
            for i in range(m):
                maps = [own[i]]
                for msg in inboxes[i]:
                    pose_j, dec = decoded[msg.sender]
                    maps.append(warp_feature_map(dec, relative_pose(pose_j, poses[i]), fspec, self.warp_mode))
                h, w = self.collab.fuse(maps)
                fused_list.append(h)
                weights[i] = w
            fused = stack(fused_list, axis=0)
        maps = self.net.decode(fused, enc.skips)
        return ForwardResult(feat, fused, maps, self.net.detect_head(maps[-1]), weights, log)
