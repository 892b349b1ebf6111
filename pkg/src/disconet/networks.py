"""BEV encoder, skip-connected decoder, detection header and the 1x1 compression autoencoder."""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import Conv2d, ConvBNReLU, Module
from .tensor import ShapeError, Tensor, concat_channels, relu, upsample2x

FULL_WIDTHS = (32, 64, 128, 256, 512)
FEATURE_STAGE = 3  # index of the stage tapped for collaboration (K / 8)
VALID_RATIOS = (1, 4, 16, 32, 64)
REG_CHANNELS = 6  # dx, dy, log l, log w, sin yaw, cos yaw


@dataclass
class EncoderOutput:
    feature: Tensor
    skips: list[Tensor]


@dataclass
class DetectionRaster:
    logits: Tensor      # (N, 1, K, K)
    regression: Tensor  # (N, 6, K, K)


class Encoder(Module):
    """Five conv stages; every stage after the first halves the resolution."""

    def __init__(self, in_channels: int, widths=FULL_WIDTHS, *, rng):
        self.in_channels = in_channels
        stages = []
        prev = in_channels
        for s, w in enumerate(widths):
            stages.append(Stage(prev, w, stride=1 if s == 0 else 2, rng=rng))
            prev = w
        self.stages = stages

    def forward(self, bev: Tensor) -> EncoderOutput:
        if bev.shape[-3] != self.in_channels:
            raise ShapeError(f"encoder expects {self.in_channels} height channels, got {bev.shape}")
        k = bev.shape[-1]
        if k % 16:
            raise ShapeError(f"BEV size {k} must be divisible by 16")
        skips = []
        x = bev
        for stage in self.stages:
            x = stage(x)
            skips.append(x)
        return EncoderOutput(skips[FEATURE_STAGE], skips)


class Stage(Module):
    def __init__(self, cin: int, cout: int, stride: int, *, rng):
        self.first = ConvBNReLU(cin, cout, 3, stride, rng=rng)
        self.second = ConvBNReLU(cout, cout, 3, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.second(self.first(x))


class Decoder(Module):
    """Upsample, concatenate the matching encoder map, two 3x3 convs; four times."""

    def __init__(self, widths=FULL_WIDTHS, *, rng):
        w = list(widths)
        self.stages = [Stage(w[4 - s] + w[3 - s], w[3 - s], stride=1, rng=rng) for s in range(4)]

    def forward(self, h: Tensor, skips: list[Tensor]) -> list[Tensor]:
        if h.shape[-3:] != skips[FEATURE_STAGE].shape[-3:]:
            raise ShapeError(f"fused map {h.shape} does not match encoder map {skips[FEATURE_STAGE].shape}")
        lateral = [h, skips[2], skips[1], skips[0]]
        x = skips[4]
        maps = []
        for stage, side in zip(self.stages, lateral):
            up = upsample2x(x)
            if up.shape[-2:] != side.shape[-2:]:
                raise ShapeError(f"skip {side.shape} does not match upsampled {up.shape}")
            x = stage(concat_channels(up, side))
            maps.append(x)
        return maps


class DetectionHead(Module):
    def __init__(self, channels: int, *, rng):
        self.cls_hidden = ConvBNReLU(channels, channels, 3, rng=rng)
        self.cls_out = Conv2d(channels, 1, 3, rng=rng)
        self.reg_hidden = ConvBNReLU(channels, channels, 3, rng=rng)
        self.reg_out = Conv2d(channels, REG_CHANNELS, 3, rng=rng)

    def forward(self, m: Tensor) -> DetectionRaster:
        return DetectionRaster(self.cls_out(self.cls_hidden(m)), self.reg_out(self.reg_hidden(m)))


class PerceptionNet(Module):
    """Encoder, decoder and header shared by the teacher and the student."""

    def __init__(self, in_channels: int = 13, widths=FULL_WIDTHS, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.widths = tuple(widths)
        self.encoder = Encoder(in_channels, widths, rng=rng)
        self.decoder = Decoder(widths, rng=rng)
        self.header = DetectionHead(widths[0], rng=rng)

    def encode(self, bev: Tensor) -> EncoderOutput:
        return self.encoder(bev)

    def decode(self, h: Tensor, skips: list[Tensor]) -> list[Tensor]:
        return self.decoder(h, skips)

    def detect_head(self, m_fine: Tensor) -> DetectionRaster:
        return self.header(m_fine)

    def forward(self, bev: Tensor):
        enc = self.encode(bev)
        maps = self.decode(enc.feature, enc.skips)
        return enc, maps, self.detect_head(maps[-1])


class Compressor(Module):
    """1x1 conv autoencoder along the channel axis."""

    def __init__(self, channels: int, ratio: int, *, rng):
        if ratio not in VALID_RATIOS or channels % ratio:
            raise ValueError(f"compression ratio {ratio} invalid for {channels} channels")
        self.ratio = ratio
        self.channels = channels
        self.down = Conv2d(channels, channels // ratio, 1, rng=rng)
        self.up = Conv2d(channels // ratio, channels, 1, rng=rng)

    def compress(self, f: Tensor) -> Tensor:
        return relu(self.down(f))

    def decompress(self, z: Tensor) -> Tensor:
        return relu(self.up(z))


def wire_bytes(channels: int, ratio: int, k_bar: int) -> int:
    """Payload size of one compressed float32 feature map."""
    return (channels // ratio) * k_bar * k_bar * 4


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"DSCN"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(state: "OrderedDict[str, np.ndarray]") -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError("bad magic")
    pos = 4
    try:
        version, count = struct.unpack_from("<II", buf, pos)
        pos += 8
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        state: OrderedDict[str, np.ndarray] = OrderedDict()
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if pos + 4 * size > len(buf):
                raise CheckpointError(f"truncated payload for {name!r} at byte {pos}")
            state[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float64)
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint at byte {pos}: {exc}") from None
    return state


def save_checkpoint(state, path: str | Path) -> None:
    Path(path).write_bytes(encode_checkpoint(state))


def load_checkpoint(path: str | Path) -> "OrderedDict[str, np.ndarray]":
    return decode_checkpoint(Path(path).read_bytes())
