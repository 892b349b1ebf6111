"""Collaboration graph: message transmission, matrix-valued edge weights, aggregation.

Also hosts the scalar-weight and parameter-free fusion baselines used in the
fusion ablation (sum, average, weighted average, max, cat).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Pose
from .networks import Compressor
from .nn import Conv2d, ConvBNReLU, Module
from .tensor import (
    ShapeError,
    Tensor,
    concat_channels,
    float32_roundtrip,
    max_over,
    mean,
    mul,
    reshape,
    softmax,
    stack,
    sum_over,
    take,
)

FUSION_KINDS = ("none", "sum", "average", "weighted_average", "max", "cat", "disco")


class ContractError(ValueError):
    """An input violates an operation's stated precondition."""


@dataclass
class NeuralMessage:
    sender: int
    pose: Pose
    payload: Tensor  # (C/r, K, K), float32-representable values

    @property
    def byte_size(self) -> int:
        return int(np.prod(self.payload.shape)) * 4

    def array(self) -> np.ndarray:
        return self.payload.data.astype(np.float32)


def transmit(feature: Tensor, pose: Pose, compressor: Compressor, sender: int = 0) -> NeuralMessage:
    """Compress one agent's feature map into the message it broadcasts."""
    return NeuralMessage(sender, pose, float32_roundtrip(compressor.compress(feature)))


class EdgeEncoder(Module):
    """Four 1x1 conv+BN+ReLU layers reducing 2C channels to one score channel."""

    def __init__(self, channels: int, *, rng):
        c2 = 2 * channels
        sched = [c2, max(c2 // 4, 1), max(c2 // 16, 1), max(c2 // 64, 1), 1]
        self.schedule = sched
        self.layers = [ConvBNReLU(a, b, 1, rng=rng) for a, b in zip(sched[:-1], sched[1:])]

    def forward(self, x: Tensor, trace: list | None = None) -> Tensor:
        for layer in self.layers:
            x = layer(x)
            if trace is not None:
                trace.append(x.shape)
        return x


def _pairs(received: list[Tensor], ego: Tensor) -> Tensor:
    shapes = {t.shape for t in received} | {ego.shape}
    if len(shapes) != 1:
        raise ShapeError(f"edge encoder inputs differ in shape: {sorted(shapes)}")
    return stack([concat_channels(f, ego) for f in received], axis=0)


def edge_weights(received: list[Tensor], ego: Tensor, encoder: EdgeEncoder, trace: list | None = None) -> list[Tensor]:
    """Per-cell attention of the receiver over every sender (itself included).

    ``received`` holds the M feature maps already warped into the receiver
    frame, each ``(C, K, K)``.  Returns M ``(K, K)`` maps summing to one at
    every cell.
    """
    scores = encoder(_pairs(received, ego), trace)  # (M, 1, K, K)
    w = softmax(scores, axis=0)
    return [reshape(take(w, j), w.shape[-2:]) for j in range(len(received))]


def aggregate(warped: list[Tensor], weights: list[Tensor], tol: float = 1e-6) -> Tensor:
    """H[c, n] = sum_j W_j[n] * F_j[c, n]."""
    if len(warped) != len(weights) or not warped:
        raise ShapeError("aggregate needs one weight map per feature map")
    total = np.sum([w.data for w in weights], axis=0)
    if np.max(np.abs(total - 1.0)) > tol:
        raise ContractError(f"edge weights are not normalised (max deviation {np.max(np.abs(total - 1.0)):.3g})")
    if len(warped) == 1:
        return mul(reshape(weights[0], (1,) + weights[0].shape), warped[0])
    terms = [mul(reshape(w, (1,) + w.shape), f) for w, f in zip(weights, warped)]
    return sum_over(terms)


class Collaboration(Module):
    """Parameters and forward rule for one fusion kind.

    ``fuse`` takes the receiver's own map first, followed by the warped maps of
    the other agents, and returns the fused map plus (for ``disco``) the
    per-cell weights.
    """

    def __init__(self, kind: str, channels: int, *, rng):
        if kind not in FUSION_KINDS:
            raise ValueError(f"unknown fusion kind {kind!r}; expected one of {FUSION_KINDS}")
        self.kind = kind
        self.channels = channels
        if kind in ("disco", "weighted_average"):
            self.edge = EdgeEncoder(channels, rng=rng)
        if kind == "weighted_average":
            self.scalar = Conv2d(1, 1, 1, rng=rng)
        if kind == "cat":
            self.mix = ConvBNReLU(2 * channels, channels, 1, rng=rng)

    def fuse(self, maps: list[Tensor]) -> tuple[Tensor, list[Tensor] | None]:
        ego = maps[0]
        kind = self.kind
        if kind == "none" or (len(maps) == 1 and kind in ("sum", "average", "max")):
            return ego, None
        if kind == "disco":
            w = edge_weights(maps, ego, self.edge)
            return aggregate(maps, w), w
        if kind == "sum":
            return sum_over(maps), None
        if kind == "average":
            return sum_over(maps) * (1.0 / len(maps)), None
        if kind == "max":
            return max_over(maps), None
        if kind == "cat":
            if len(maps) > 1:
                others = sum_over(maps[1:]) * (1.0 / (len(maps) - 1)) if len(maps) > 2 else maps[1]
            else:
                others = Tensor(np.zeros_like(ego.data))
            return reshape(self.mix(reshape(concat_channels(ego, others), (1, 2 * self.channels) + ego.shape[-2:])), ego.shape), None
        # weighted_average: Pi score map -> extra conv -> global mean -> softmax over agents
        scores = self.scalar(self.edge(_pairs(maps, ego)))  # (M, 1, K, K)
        pooled = mean(scores, axis=(2, 3), keepdims=True)  # (M, 1, 1, 1)
        s = softmax(pooled, axis=0)
        terms = [mul(reshape(take(s, j), (1, 1, 1)), f) for j, f in enumerate(maps)]
        w = [reshape(take(s, j), (1,)) for j in range(len(maps))]
        return sum_over(terms), w


def fuse_baseline(kind: str, warped: list[Tensor], params: Collaboration | None = None) -> Tensor:
    """Fuse with one of the ablation rules; ``warped[0]`` is the receiver's own map."""
    if kind not in FUSION_KINDS or kind == "disco":
        raise ValueError(f"unknown baseline fusion kind {kind!r}")
    if params is None:
        if kind in ("cat", "weighted_average"):
            raise ValueError(f"fusion kind {kind!r} needs parameters")
        params = Collaboration(kind, warped[0].shape[-3], rng=np.random.default_rng(0))
    return params.fuse(warped)[0]

