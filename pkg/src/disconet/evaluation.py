"""Detection raster coding, NMS and average precision."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .boxes import Box, box_iou
from .geometry import BEVGridSpec, Pose, wrap_angle

REPORT_HEADER = ["method", "ap50", "ap70", "tp50", "fp50", "fn50", "tp70", "fp70", "fn70"]
LOG_SIZE_CLAMP = 4.0


def canonical_yaw(yaw: float) -> float:
    """Fold a heading onto [-pi/4, 3pi/4); a rectangle is unchanged by a half turn."""
    y = wrap_angle(yaw)
    if y < -math.pi / 4:
        y += math.pi
    elif y >= 3 * math.pi / 4:
        y -= math.pi
    return y


def encode_targets(boxes: list[Box], spec: BEVGridSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rasterise ground truth on the header grid.

    Returns the (1, K, K) class target, the (6, K, K) regression target and
    the (1, K, K) positive mask.  A cell is positive when it holds a box centre.
    """
    k = spec.size
    cls = np.zeros((1, k, k))
    reg = np.zeros((6, k, k))
    for b in boxes:
        ix = int(math.floor((b.cx - spec.x_range[0]) / spec.cell))
        iy = int(math.floor((b.cy - spec.y_range[0]) / spec.cell))
        if not (0 <= ix < k and 0 <= iy < k):
            continue
        cx0 = spec.x_range[0] + (ix + 0.5) * spec.cell
        cy0 = spec.y_range[0] + (iy + 0.5) * spec.cell
        yaw = canonical_yaw(b.yaw)
        cls[0, ix, iy] = 1.0
        reg[:, ix, iy] = [
            (b.cx - cx0) / spec.cell,
            (b.cy - cy0) / spec.cell,
            math.log(b.length),
            math.log(b.width),
            math.sin(yaw),
            math.cos(yaw),
        ]
    return cls, reg, cls.copy()


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z)))


def decode_raster(logits: np.ndarray, regression: np.ndarray, spec: BEVGridSpec, score_threshold: float = 0.3,
                  max_boxes: int | None = None) -> list[Box]:
    """Turn one agent's (1, K, K) logits and (6, K, K) regression into boxes."""
    if not 0.0 <= score_threshold <= 1.0:
        raise ValueError(f"score threshold {score_threshold} outside [0, 1]")
    logits = np.asarray(logits).reshape(spec.size, spec.size)
    reg = np.asarray(regression).reshape(6, spec.size, spec.size)
    scores = sigmoid(logits)
    ix, iy = np.nonzero(scores >= score_threshold)
    s = scores[ix, iy]
    order = np.argsort(-s, kind="stable")
    if max_boxes is not None:
        order = order[:max_boxes]
    out = []
    for n in order:
        i, j = ix[n], iy[n]
        dx, dy, ll, lw, sn, cs = reg[:, i, j]
        cx = spec.x_range[0] + (i + 0.5 + dx) * spec.cell
        cy = spec.y_range[0] + (j + 0.5 + dy) * spec.cell
        length = math.exp(min(max(ll, -LOG_SIZE_CLAMP), LOG_SIZE_CLAMP))
        width = math.exp(min(max(lw, -LOG_SIZE_CLAMP), LOG_SIZE_CLAMP))
        out.append(Box(float(cx), float(cy), length, width, math.atan2(sn, cs), float(min(max(s[n], 0.0), 1.0))))
    return out


def nms(boxes: list[Box], iou_threshold: float = 0.3) -> list[Box]:
    """Greedy suppression in descending score order; equal scores keep input order."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"IoU threshold {iou_threshold} outside (0, 1]")
    order = sorted(range(len(boxes)), key=lambda i: -boxes[i].score)
    kept: list[Box] = []
    for i in order:
        b = boxes[i]
        if all(box_iou(b, k) <= iou_threshold for k in kept):
            kept.append(b)
    return kept


def transform_boxes(boxes: list[Box], pose: Pose) -> list[Box]:
    """Express boxes given in a local frame in the frame ``pose`` maps into."""
    if not boxes:
        return []
    centers = pose.apply(np.array([[b.cx, b.cy] for b in boxes]))
    return [
        Box(float(c[0]), float(c[1]), b.length, b.width, wrap_angle(b.yaw + pose.yaw), b.score)
        for b, c in zip(boxes, centers)
    ]


@dataclass
class MatchResult:
    scores: np.ndarray
    is_tp: np.ndarray
    num_gt: int
    per_scene: list[tuple[int, int, int]]  # (tp, fp, fn)

    @property
    def tp(self) -> int:
        return int(self.is_tp.sum())

    @property
    def fp(self) -> int:
        return int(len(self.is_tp) - self.is_tp.sum())

    @property
    def fn(self) -> int:
        return self.num_gt - self.tp


def match_detections(detections: list[list[Box]], gts: list[list[Box]], iou_threshold: float) -> MatchResult:
    """Global score-ranked greedy matching; a GT is claimed at most once."""
    if len(detections) != len(gts):
        raise ValueError("detections and ground truth must cover the same scenes")
    flat = [(d.score, s, k) for s, dets in enumerate(detections) for k, d in enumerate(dets)]
    flat.sort(key=lambda t: -t[0])
    claimed = [np.zeros(len(g), dtype=bool) for g in gts]
    is_tp = np.zeros(len(flat), dtype=bool)
    tp_s = np.zeros(len(gts), dtype=int)
    fp_s = np.zeros(len(gts), dtype=int)
    for n, (_, s, k) in enumerate(flat):
        det = detections[s][k]
        best, best_j = -1.0, -1
        for j, g in enumerate(gts[s]):
            if claimed[s][j]:
                continue
            iou = box_iou(det, g)
            if iou > best:
                best, best_j = iou, j
        if best_j >= 0 and best >= iou_threshold:
            claimed[s][best_j] = True
            is_tp[n] = True
            tp_s[s] += 1
        else:
            fp_s[s] += 1
    per_scene = [(int(tp_s[s]), int(fp_s[s]), len(gts[s]) - int(tp_s[s])) for s in range(len(gts))]
    scores = np.array([t[0] for t in flat])
    return MatchResult(scores, is_tp, sum(len(g) for g in gts), per_scene)


def ap_from_matches(m: MatchResult) -> float:
    """All-point interpolated AP from a ranked TP/FP sequence."""
    if m.num_gt == 0 or len(m.is_tp) == 0:
        return 0.0
    tp = np.cumsum(m.is_tp)
    fp = np.cumsum(~m.is_tp)
    rec = tp / m.num_gt
    prec = tp / np.maximum(tp + fp, 1)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def average_precision(detections: list[list[Box]], gts: list[list[Box]], iou_threshold: float) -> float:
    return ap_from_matches(match_detections(detections, gts, iou_threshold))


@dataclass
class EvalReport:
    method: str
    ap50: float
    ap70: float
    tp50: int = 0
    fp50: int = 0
    fn50: int = 0
    tp70: int = 0
    fp70: int = 0
    fn70: int = 0
    per_scene: list = field(default_factory=list)

    def row(self) -> list:
        return [self.method, f"{self.ap50:.6f}", f"{self.ap70:.6f}", self.tp50, self.fp50, self.fn50,
                self.tp70, self.fp70, self.fn70]


def build_report(method: str, detections: list[list[Box]], gts: list[list[Box]]) -> EvalReport:
    m50 = match_detections(detections, gts, 0.5)
    m70 = match_detections(detections, gts, 0.7)
    per_scene = [{"tp50": a[0], "fp50": a[1], "fn50": a[2], "tp70": b[0], "fp70": b[1], "fn70": b[2]}
                 for a, b in zip(m50.per_scene, m70.per_scene)]
    return EvalReport(method, ap_from_matches(m50), ap_from_matches(m70),
                      m50.tp, m50.fp, m50.fn, m70.tp, m70.fp, m70.fn, per_scene)


def reports_csv(reports: list[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


def read_reports_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def dump_detections(detections: list[list[Box]], path: str | Path) -> None:
    Path(path).write_text(json.dumps([[asdict(b) for b in dets] for dets in detections]))


def load_detections(path: str | Path) -> list[list[Box]]:
    return [[Box(**d) for d in dets] for dets in json.loads(Path(path).read_text())]
