"""Procedural multi-agent driving scenes and occlusion-aware planar LiDAR."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import Box, rect_corners, rects_overlap
from .geometry import BEVGridSpec, Pose, wrap_angle

SCENE_FORMAT_VERSION = "disconet-scene/1"


class SceneGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class WorldBox:
    cx: float
    cy: float
    length: float
    width: float
    yaw: float
    zmin: float
    zmax: float

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise ValueError("box length and width must be positive")
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    def corners(self) -> np.ndarray:
        return rect_corners(self.cx, self.cy, self.length, self.width, self.yaw)


@dataclass
class SceneConfig:
    box_count: tuple[int, int] = (30, 40)
    map_half_extent: float = 48.0
    min_gap: float = 0.5
    agent_count: tuple[int, int] = (2, 5)
    agent_radius: float = 20.0
    agent_min_distance: float = 8.0
    length_range: tuple[float, float] = (3.8, 5.2)
    width_range: tuple[float, float] = (1.7, 2.1)
    height_range: tuple[float, float] = (1.4, 2.0)
    ground_z: float = -1.8
    yaw_jitter: float = 0.15
    rays: int = 720
    max_range: float = 70.0
    max_tries: int = 400


@dataclass
class AgentObservation:
    agent: int
    points: np.ndarray  # (N, 3) in the agent frame
    pose: Pose


@dataclass
class Scene:
    boxes: list[WorldBox]
    agents: list[Pose]
    agent_boxes: list[int]
    seed: int = 0
    points: list[np.ndarray] = field(default_factory=list)

    @property
    def agent_count(self) -> int:
        return len(self.agents)

    def observations(self) -> list[AgentObservation]:
        return [AgentObservation(i, p, self.agents[i]) for i, p in enumerate(self.points)]


def _random_box(rng: np.random.Generator, cfg: SceneConfig, cx: float, cy: float) -> WorldBox:
    heading = rng.integers(4) * (math.pi / 2) + rng.normal(0.0, cfg.yaw_jitter)
    h = rng.uniform(*cfg.height_range)
    return WorldBox(
        cx, cy,
        rng.uniform(*cfg.length_range),
        rng.uniform(*cfg.width_range),
        heading,
        cfg.ground_z,
        cfg.ground_z + h,
    )


def _fits(box: WorldBox, placed: list[WorldBox], gap: float) -> bool:
    reach = 0.5 * math.hypot(box.length, box.width) + gap
    grown = rect_corners(box.cx, box.cy, box.length + 2 * gap, box.width + 2 * gap, box.yaw)
    for other in placed:
        if math.hypot(box.cx - other.cx, box.cy - other.cy) > reach + 0.5 * math.hypot(other.length, other.width):
            continue
        if rects_overlap(grown, other.corners()):
            return False
    return True


def generate_scene(config: SceneConfig, seed: int, with_scans: bool = True) -> Scene:
    """Place non-overlapping vehicles and pick some of them as sensing agents.

    Deterministic in ``seed``.  Agents sit at the centres of their own boxes
    within ``agent_radius`` of the map origin.
    """
    rng = np.random.default_rng(seed)
    n_agents = int(rng.integers(config.agent_count[0], config.agent_count[1] + 1))
    n_boxes = int(rng.integers(config.box_count[0], config.box_count[1] + 1))
    if n_boxes < n_agents:
        raise SceneGenerationError(f"{n_boxes} boxes cannot host {n_agents} agents")
    boxes: list[WorldBox] = []
    agent_boxes: list[int] = []
    for _ in range(n_agents):
        for _ in range(config.max_tries):
            r = config.agent_radius * math.sqrt(rng.uniform())
            t = rng.uniform(-math.pi, math.pi)
            cand = _random_box(rng, config, r * math.cos(t), r * math.sin(t))
            far = all(
                math.hypot(cand.cx - boxes[k].cx, cand.cy - boxes[k].cy) >= config.agent_min_distance
                for k in agent_boxes
            )
            if far and _fits(cand, boxes, config.min_gap):
                agent_boxes.append(len(boxes))
                boxes.append(cand)
                break
        else:
            raise SceneGenerationError(f"could not place agent {len(agent_boxes)} after {config.max_tries} tries")
    L = config.map_half_extent
    while len(boxes) < n_boxes:
        for _ in range(config.max_tries):
            cand = _random_box(rng, config, rng.uniform(-L, L), rng.uniform(-L, L))
            if _fits(cand, boxes, config.min_gap):
                boxes.append(cand)
                break
        else:
            raise SceneGenerationError(f"could not place box {len(boxes)} after {config.max_tries} tries")
    agents = [Pose(boxes[k].cx, boxes[k].cy, boxes[k].yaw) for k in agent_boxes]
    scene = Scene(boxes, agents, agent_boxes, seed)
    if with_scans:
        scene.points = [
            simulate_scan(scene, i, config.rays, config.max_range).points for i in range(n_agents)
        ]
    return scene


def _edges(boxes: list[WorldBox]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not boxes:
        return np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0, dtype=np.int64)
    corners = np.stack([b.corners() for b in boxes])  # (B, 4, 2)
    a = corners.reshape(-1, 2)
    b = np.roll(corners, -1, axis=1).reshape(-1, 2)
    owner = np.repeat(np.arange(len(boxes)), 4)
    return a, b, owner


def cast_rays(origin: np.ndarray, angles: np.ndarray, boxes: list[WorldBox], max_range: float):
    """Nearest hit distance and box index per ray (``inf`` / -1 when nothing is hit)."""
    d = np.stack([np.cos(angles), np.sin(angles)], axis=1)  # (R, 2)
    a, b, owner = _edges(boxes)
    t_best = np.full(len(angles), np.inf)
    hit = np.full(len(angles), -1, dtype=np.int64)
    if len(a) == 0 or max_range <= 0:
        return t_best, hit
    e = b - a  # (E, 2)
    ao = a - origin  # (E, 2)
    denom = d[:, 0:1] * e[None, :, 1] - d[:, 1:2] * e[None, :, 0]  # cross(d, e)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (ao[None, :, 0] * e[None, :, 1] - ao[None, :, 1] * e[None, :, 0]) / denom
        s = (ao[None, :, 0] * d[:, 1:2] - ao[None, :, 1] * d[:, 0:1]) / denom
    valid = (np.abs(denom) > 1e-12) & (t > 0) & (s >= 0) & (s <= 1) & (t <= max_range)
    t = np.where(valid, t, np.inf)
    j = t.argmin(axis=1)
    t_best = t[np.arange(len(angles)), j]
    hit = np.where(np.isfinite(t_best), owner[j], -1)
    return t_best, hit


def simulate_scan(scene: Scene, agent: int, rays: int, max_range: float) -> AgentObservation:
    """Planar ray casting from the agent; hits are lifted to three heights on the struck box.

    The agent's own box is ignored entirely.
    """
    if not 0 <= agent < scene.agent_count:
        raise IndexError(f"agent {agent} out of range for {scene.agent_count} agents")
    if rays < 1:
        raise ValueError("rays must be >= 1")
    pose = scene.agents[agent]
    own = scene.agent_boxes[agent] if scene.agent_boxes else -1
    others = [b for k, b in enumerate(scene.boxes) if k != own]
    local_angles = 2.0 * np.pi * np.arange(rays) / rays
    t, hit = cast_rays(np.array([pose.x, pose.y]), local_angles + pose.yaw, others, max_range)
    ok = hit >= 0
    if not ok.any():
        return AgentObservation(agent, np.zeros((0, 3)), pose)
    r, ang, idx = t[ok], local_angles[ok], hit[ok]
    zmin = np.array([others[k].zmin for k in idx])
    zmax = np.array([others[k].zmax for k in idx])
    fracs = np.array([1 / 6, 1 / 2, 5 / 6])
    xy = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)
    z = zmin[:, None] + (zmax - zmin)[:, None] * fracs[None, :]  # (H, 3)
    pts = np.concatenate([np.repeat(xy, 3, axis=0), z.reshape(-1, 1)], axis=1)
    return AgentObservation(agent, pts, pose)


def local_ground_truth(scene: Scene, agent: int, region: BEVGridSpec) -> list[Box]:
    """Every box whose centre lies in the agent's region, expressed in the agent frame.

    Visibility plays no role; the agent's own box is excluded.
    """
    pose = scene.agents[agent]
    inv = pose.inverse()
    own = scene.agent_boxes[agent] if scene.agent_boxes else -1
    out = []
    for k, b in enumerate(scene.boxes):
        if k == own:
            continue
        (x, y), = inv.apply(np.array([[b.cx, b.cy]]))
        if bool(region.contains(x, y)):
            out.append(Box(float(x), float(y), b.length, b.width, wrap_angle(b.yaw - pose.yaw)))
    return out


# ---------------------------------------------------------------------------
# JSON scene files
# ---------------------------------------------------------------------------


def _num(v: float) -> float:
    return float(f"{v:.12g}")


def scene_to_dict(scene: Scene) -> dict:
    return {
        "version": SCENE_FORMAT_VERSION,
        "seed": int(scene.seed),
        "boxes": [
            {"cx": _num(b.cx), "cy": _num(b.cy), "l": _num(b.length), "w": _num(b.width),
             "yaw": _num(b.yaw), "zmin": _num(b.zmin), "zmax": _num(b.zmax)}
            for b in scene.boxes
        ],
        "agents": [
            {"x": _num(p.x), "y": _num(p.y), "yaw": _num(p.yaw), "box": int(k)}
            for p, k in zip(scene.agents, scene.agent_boxes)
        ],
        "points": [[{"x": _num(x), "y": _num(y), "z": _num(z)} for x, y, z in pts] for pts in scene.points],
    }


def scene_from_dict(doc: dict) -> Scene:
    if not str(doc.get("version", "")).startswith("disconet-scene/"):
        raise ValueError(f"unsupported scene version {doc.get('version')!r}")
    boxes = [WorldBox(b["cx"], b["cy"], b["l"], b["w"], b["yaw"], b["zmin"], b["zmax"]) for b in doc["boxes"]]
    agents = [Pose(a["x"], a["y"], a["yaw"]) for a in doc["agents"]]
    agent_boxes = []
    for a in doc["agents"]:
        if "box" in a:
            agent_boxes.append(int(a["box"]))
        else:
            d = [math.hypot(b.cx - a["x"], b.cy - a["y"]) for b in boxes]
            agent_boxes.append(int(np.argmin(d)))
    points = [
        np.array([[p["x"], p["y"], p["z"]] for p in pts], dtype=np.float64).reshape(-1, 3)
        for pts in doc.get("points", [])
    ]
    return Scene(boxes, agents, agent_boxes, int(doc.get("seed", 0)), points)


def save_scene(scene: Scene, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), separators=(",", ":")))


def load_scene(path: str | Path) -> Scene:
    return scene_from_dict(json.loads(Path(path).read_text()))
