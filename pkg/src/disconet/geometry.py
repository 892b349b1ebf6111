"""Planar poses, point-cloud alignment, BEV voxelisation and feature warping."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .tensor import Tensor, linear_resample


def wrap_angle(a: float) -> float:
    """Map an angle to [-pi, pi)."""
    w = (a + math.pi) % (2.0 * math.pi) - math.pi
    return -math.pi if w >= math.pi else w


@dataclass(frozen=True)
class Pose:
    """Rigid transform from a local frame to the global frame (SE(2))."""

    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        return cls(m[0, 2], m[1, 2], math.atan2(m[1, 0], m[0, 0]))

    def inverse(self) -> "Pose":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.yaw)

    def __matmul__(self, other: "Pose") -> "Pose":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.yaw + other.yaw,
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform ``(N, 2+)`` points; columns past the first two are copied."""
        pts = np.asarray(points, dtype=np.float64)
        out = pts.copy()
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out[:, 0] = c * pts[:, 0] - s * pts[:, 1] + self.x
        out[:, 1] = s * pts[:, 0] + c * pts[:, 1] + self.y
        return out


def relative_pose(xi_j: Pose, xi_i: Pose) -> Pose:
    """Transform taking coordinates in frame ``j`` to frame ``i``."""
    return xi_i.inverse() @ xi_j


def merge_point_clouds(observations) -> np.ndarray:
    """Concatenate every observation's cloud after moving it to the global frame."""
    observations = list(observations)
    if not observations:
        raise ValueError("merge_point_clouds needs at least one observation")
    return np.concatenate([o.pose.apply(o.points) for o in observations], axis=0)


@dataclass(frozen=True)
class BEVGridSpec:
    """Axis-aligned voxel grid in an agent frame with half-open bins."""

    x_range: tuple[float, float] = (-32.0, 32.0)
    y_range: tuple[float, float] = (-32.0, 32.0)
    z_range: tuple[float, float] = (-3.0, 2.0)
    size: int = 256
    height_bins: int = 13

    @property
    def cell(self) -> float:
        return (self.x_range[1] - self.x_range[0]) / self.size

    @property
    def dz(self) -> float:
        return (self.z_range[1] - self.z_range[0]) / self.height_bins

    def scaled(self, factor: int) -> "BEVGridSpec":
        """Same metric extent at ``size // factor`` cells per side."""
        if self.size % factor:
            raise ValueError(f"grid size {self.size} not divisible by {factor}")
        return BEVGridSpec(self.x_range, self.y_range, self.z_range, self.size // factor, self.height_bins)

    def cell_centers(self) -> np.ndarray:
        return self.x_range[0] + (np.arange(self.size) + 0.5) * self.cell

    def contains(self, x, y):
        x, y = np.asarray(x), np.asarray(y)
        return (x >= self.x_range[0]) & (x < self.x_range[1]) & (y >= self.y_range[0]) & (y < self.y_range[1])


@dataclass
class BEVMap:
    spec: BEVGridSpec
    values: np.ndarray  # (K, K, C): x index, y index, height bin

    def as_input(self) -> np.ndarray:
        """Channels-first ``(C, K, K)`` array for the encoder."""
        return np.ascontiguousarray(self.values.transpose(2, 0, 1))


def voxel_indices(points: np.ndarray, spec: BEVGridSpec) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    ix = np.floor((pts[:, 0] - spec.x_range[0]) / spec.cell).astype(np.int64)
    iy = np.floor((pts[:, 1] - spec.y_range[0]) / spec.cell).astype(np.int64)
    iz = np.floor((pts[:, 2] - spec.z_range[0]) / spec.dz).astype(np.int64)
    keep = (
        spec.contains(pts[:, 0], pts[:, 1])
        & (pts[:, 2] >= spec.z_range[0])
        & (pts[:, 2] < spec.z_range[1])
        & (ix >= 0) & (ix < spec.size) & (iy >= 0) & (iy < spec.size)
        & (iz >= 0) & (iz < spec.height_bins)
    )
    return np.stack([ix[keep], iy[keep], iz[keep]], axis=1)


def voxelize(points: np.ndarray, spec: BEVGridSpec) -> BEVMap:
    """Binary occupancy: a cell is 1 iff at least one point falls in it."""
    grid = np.zeros((spec.size, spec.size, spec.height_bins), dtype=np.float64)
    idx = voxel_indices(points, spec)
    if len(idx):
        grid[idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0
    return BEVMap(spec, grid)


@lru_cache(maxsize=4096)
def _warp_matrix(rel: Pose, spec: BEVGridSpec, mode: str) -> sp.csr_matrix:
    k = spec.size
    centers = spec.cell_centers()
    ox, oy = np.meshgrid(centers, centers, indexing="ij")
    out_pts = np.stack([ox.ravel(), oy.ravel()], axis=1)
    src = rel.inverse().apply(out_pts)
    u = (src[:, 0] - spec.x_range[0]) / spec.cell - 0.5
    v = (src[:, 1] - spec.y_range[0]) / spec.cell - 0.5
    rows = np.arange(k * k)
    if mode == "nearest":
        iu, iv = np.rint(u).astype(np.int64), np.rint(v).astype(np.int64)
        ok = (iu >= 0) & (iu < k) & (iv >= 0) & (iv < k)
        return sp.csr_matrix((np.ones(ok.sum()), (rows[ok], (iu * k + iv)[ok])), shape=(k * k, k * k))
    u0, v0 = np.floor(u).astype(np.int64), np.floor(v).astype(np.int64)
    fu, fv = u - u0, v - v0
    r, c, w = [], [], []
    for du, wu in ((0, 1.0 - fu), (1, fu)):
        for dv, wv in ((0, 1.0 - fv), (1, fv)):
            iu, iv = u0 + du, v0 + dv
            wt = wu * wv
            ok = (iu >= 0) & (iu < k) & (iv >= 0) & (iv < k) & (wt != 0.0)
            r.append(rows[ok])
            c.append((iu * k + iv)[ok])
            w.append(wt[ok])
    return sp.csr_matrix((np.concatenate(w), (np.concatenate(r), np.concatenate(c))), shape=(k * k, k * k))


def warp_matrix(rel: Pose, spec: BEVGridSpec, mode: str = "bilinear") -> sp.csr_matrix:
    """Sparse resampling matrix: output cell (row) <- source cells (columns)."""
    if mode not in ("bilinear", "nearest"):
        raise ValueError(f"unknown warp mode {mode!r}")
    return _warp_matrix(rel, spec, mode)


def warp_feature_map(feature: Tensor, rel: Pose, spec: BEVGridSpec, mode: str = "bilinear") -> Tensor:
    """Resample a sender's ``[..., C, K, K]`` map into the receiver frame.

    ``rel`` maps sender coordinates to receiver coordinates.  Each receiver
    cell centre is pulled back into the sender frame and sampled there;
    samples outside the sender grid read zero.
    """
    if rel == Pose():
        return feature
    return linear_resample(feature, warp_matrix(rel, spec, mode))
