"""Oriented BEV rectangles: corners, convex clipping, rotated IoU."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    """Oriented BEV box; ``score`` is 1.0 for ground truth."""

    cx: float
    cy: float
    length: float
    width: float
    yaw: float
    score: float = 1.0

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError(f"degenerate box: length={self.length}, width={self.width}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def area(self) -> float:
        return self.length * self.width

    def corners(self) -> np.ndarray:
        return rect_corners(self.cx, self.cy, self.length, self.width, self.yaw)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.length, self.width, self.yaw])


DetectionBox = Box


def rect_corners(cx: float, cy: float, length: float, width: float, yaw: float) -> np.ndarray:
    """Counter-clockwise corners, shape (4, 2)."""
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by a counter-clockwise convex ``clipper``."""
    out = [tuple(p) for p in subject]
    n = len(clipper)
    for k in range(n):
        if not out:
            break
        ax, ay = clipper[k]
        bx, by = clipper[(k + 1) % n]
        ex, ey = bx - ax, by - ay
        inp, out = out, []

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    t = sp / (sp - sc)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif sp >= 0:
                t = sp / (sp - sc)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, sp = cur, sc
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def intersection_area(a: np.ndarray, b: np.ndarray) -> float:
    return max(polygon_area(clip_convex(a, b)), 0.0)


def box_iou(a: Box, b: Box) -> float:
    """Rotated-rectangle IoU in the BEV plane."""
    # circumscribed circles cannot touch -> disjoint
    ra = 0.5 * math.hypot(a.length, a.width)
    rb = 0.5 * math.hypot(b.length, b.width)
    if math.hypot(a.cx - b.cx, a.cy - b.cy) >= ra + rb:
        return 0.0
    inter = intersection_area(a.corners(), b.corners())
    union = a.area + b.area - inter
    return float(min(max(inter / union, 0.0), 1.0))


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = box_iou(a, b)
    return out


def rects_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test on two convex quads (touching counts as overlap)."""
    for poly in (a, b):
        for k in range(4):
            e = poly[(k + 1) % 4] - poly[k]
            axis = np.array([-e[1], e[0]])
            pa, pb = a @ axis, b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True
