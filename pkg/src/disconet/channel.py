"""Simulated broadcast channel: wire format, per-round delivery, byte accounting."""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose
from .graph import NeuralMessage
from .tensor import Tensor, straight_through

WIRE_VERSION = 1
_HEADER = struct.Struct("<H3fHHB")
HEADER_SIZE = _HEADER.size  # 19
TRADEOFF_HEADER = ["method", "ratio", "bytes_per_frame_per_agent", "ap50", "ap70"]


class WireFormatError(ValueError):
    def __init__(self, message: str, offset: int, field_name: str | None = None):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset
        self.field = field_name


def pack_message(msg: NeuralMessage) -> bytes:
    payload = msg.array()
    if payload.ndim != 3 or payload.shape[1] != payload.shape[2]:
        raise ValueError(f"payload must be (C, K, K), got {payload.shape}")
    c, k, _ = payload.shape
    header = _HEADER.pack(msg.sender, msg.pose.x, msg.pose.y, msg.pose.yaw, c, k, WIRE_VERSION)
    return header + np.ascontiguousarray(payload, dtype="<f4").tobytes()


def unpack_message(buf: bytes) -> NeuralMessage:
    if len(buf) < HEADER_SIZE:
        raise WireFormatError(f"header needs {HEADER_SIZE} bytes, got {len(buf)}", len(buf), "header")
    sender, x, y, yaw, c, k, version = _HEADER.unpack_from(buf, 0)
    if version != WIRE_VERSION:
        raise WireFormatError(f"unsupported format version {version}", HEADER_SIZE - 1, "format version")
    need = HEADER_SIZE + 4 * c * k * k
    if len(buf) < need:
        raise WireFormatError(f"payload truncated: need {need} bytes, got {len(buf)}", len(buf), "payload")
    if len(buf) > need:
        raise WireFormatError(f"{len(buf) - need} trailing bytes", need, "payload")
    payload = np.frombuffer(buf, dtype="<f4", count=c * k * k, offset=HEADER_SIZE).reshape(c, k, k)
    return NeuralMessage(sender, Pose(x, y, yaw), Tensor(payload.astype(np.float64)))


def message_wire_size(channels: int, k_bar: int) -> int:
    return HEADER_SIZE + 4 * channels * k_bar * k_bar


@dataclass
class LogEntry:
    round: int
    sender: int
    payload_bytes: int
    wire_bytes: int
    receivers: int


@dataclass
class ChannelLog:
    entries: list[LogEntry] = field(default_factory=list)
    rounds: int = 0

    def per_agent(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for e in self.entries:
            out[e.sender] = out.get(e.sender, 0) + e.wire_bytes
        return out

    def per_round(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for e in self.entries:
            out[e.round] = out.get(e.round, 0) + e.wire_bytes
        return out

    @property
    def total_wire_bytes(self) -> int:
        return sum(e.wire_bytes for e in self.entries)

    @property
    def total_payload_bytes(self) -> int:
        return sum(e.payload_bytes for e in self.entries)

    def payload_per_frame_per_agent(self) -> float:
        """Mean payload bytes one agent sends in one frame (0 without traffic)."""
        if not self.entries:
            return 0.0
        return self.total_payload_bytes / len(self.entries)

    def extend(self, other: "ChannelLog") -> None:
        base = self.rounds
        self.entries.extend(
            LogEntry(e.round + base, e.sender, e.payload_bytes, e.wire_bytes, e.receivers) for e in other.entries
        )
        self.rounds += other.rounds


def broadcast_round(messages: list[NeuralMessage], log: ChannelLog | None = None) -> tuple[list[list[NeuralMessage]], ChannelLog]:
    """Deliver every message to every other agent over one shared medium.

    Each message is serialised once (broadcast) and decoded at the receivers.
    Delivered payloads keep a gradient path to the sender's tensor so the
    channel can sit inside a training graph.
    """
    log = log if log is not None else ChannelLog()
    rnd = log.rounds
    m = len(messages)
    delivered = []
    if m == 1:
        # nobody is listening: nothing goes on the air
        log.rounds += 1
        return [[]], log
    for msg in messages:
        wire = pack_message(msg)
        got = unpack_message(wire)
        got.payload = straight_through(msg.payload, got.payload.data)
        delivered.append(got)
        log.entries.append(LogEntry(rnd, msg.sender, msg.byte_size, len(wire), m - 1))
    log.rounds += 1
    inboxes = [[delivered[j] for j in range(m) if j != i] for i in range(m)]
    return inboxes, log


def bandwidth_report(runs: list[dict], reports: dict, path: str | Path | None = None) -> list[dict]:
    """Trade-off rows ``{method, ratio, bytes_per_frame_per_agent, ap50, ap70}``.

    ``runs`` items carry ``run_id``, ``method``, ``ratio`` and ``log`` (a
    ChannelLog, or None for runs without communication); ``reports`` maps the
    same run ids to evaluation reports.
    """
    ids = {r["run_id"] for r in runs}
    if ids != set(reports):
        raise KeyError(f"run ids differ: logs {sorted(ids)} vs reports {sorted(reports)}")
    rows = []
    for r in runs:
        rep = reports[r["run_id"]]
        log = r.get("log")
        rows.append({
            "method": r["method"],
            "ratio": r.get("ratio", 0) or 0,
            "bytes_per_frame_per_agent": log.payload_per_frame_per_agent() if log is not None else 0.0,
            "ap50": rep.ap50,
            "ap70": rep.ap70,
        })
    rows.sort(key=lambda row: (row["bytes_per_frame_per_agent"], row["method"]))
    if path is not None:
        Path(path).write_text(tradeoff_csv(rows))
    return rows


def _fmt_bytes(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else f"{v:.3f}"


def tradeoff_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRADEOFF_HEADER)
    for r in rows:
        w.writerow([r["method"], r["ratio"], _fmt_bytes(r["bytes_per_frame_per_agent"]), f"{r['ap50']:.6f}", f"{r['ap70']:.6f}"])
    return buf.getvalue()
