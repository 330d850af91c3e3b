"""Camera poses, trajectories and motion-guided bin allocation.

Camera convention is OpenCV-style: +x right, +y down, the camera looks along
+z. Pixel centers sit on integer coordinates, so a pixel ``(u, v)`` maps to
the camera-frame direction ``((u - cx) / fx, (v - cy) / fy, 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation, Slerp


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Camera-to-world rigid transform: ``x_world = rotation @ x_cam + center``."""

    rotation: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9) or np.linalg.det(r) < 0:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "center", c)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "CameraPose":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.center
        return m

    def to_list(self) -> list[float]:
        """16 floats, row-major."""
        return [float(v) for v in self.matrix().ravel()]

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.center) @ self.rotation

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(self.center, other.center)


class Trajectory:
    """Time-stamped key poses spanning an exposure; times in microseconds."""

    def __init__(self, times: Sequence[float], poses: Sequence[CameraPose]):
        times = np.asarray(times, dtype=np.float64)
        if len(times) != len(poses) or len(times) < 1:
            raise ValueError("trajectory needs matching, non-empty times and poses")
        if np.any(np.diff(times) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        self.times = times
        self.poses = list(poses)
        self._slerp = None
        if len(poses) > 1:
            rots = Rotation.from_matrix(np.stack([p.rotation for p in poses]))
            self._slerp = Slerp(times, rots)

    def __len__(self):
        return len(self.poses)

    @property
    def t_start(self) -> float:
        return float(self.times[0])

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    def to_json(self) -> list[dict]:
        return [{"t_us": float(t), "pose": p.to_list()} for t, p in zip(self.times, self.poses)]

    @classmethod
    def from_json(cls, items: list[dict]) -> "Trajectory":
        return cls([it["t_us"] for it in items], [CameraPose.from_matrix(it["pose"]) for it in items])


def interpolate_pose(trajectory: Trajectory, t: float) -> CameraPose:
    """Pose at time ``t``: slerp on rotation, linear on center.

    Key-pose timestamps return the stored pose unchanged.
    """
    times = trajectory.times
    if not (times[0] <= t <= times[-1]):
        raise ValueError(f"t={t} outside trajectory span [{times[0]}, {times[-1]}]")
    hit = np.flatnonzero(times == t)
    if hit.size:
        return trajectory.poses[int(hit[0])]
    i = int(np.searchsorted(times, t)) - 1
    a = (t - times[i]) / (times[i + 1] - times[i])
    center = (1.0 - a) * trajectory.poses[i].center + a * trajectory.poses[i + 1].center
    rot = trajectory._slerp([t]).as_matrix()[0]
    # re-orthonormalize to wash out quaternion round-off
    u, _, vt = np.linalg.svd(rot)
    return CameraPose(u @ vt, center)


def reproject(pixel, depth: float, pose0: CameraPose, pose1: CameraPose, intrinsics: Intrinsics):
    """Map a pixel seen at ``pose0`` with ray depth ``depth`` into ``pose1``.

    ``depth`` is the distance along the unit viewing ray. Returns the new
    pixel as a length-2 array, or ``None`` when the surface point lies behind
    ``pose1``.
    """
    out, valid = reproject_many(np.asarray(pixel, dtype=np.float64)[None], np.asarray([depth], dtype=np.float64),
                                pose0, pose1, intrinsics)
    return out[0] if valid[0] else None


def pixel_directions(pixels: np.ndarray, pose: CameraPose, intrinsics: Intrinsics) -> np.ndarray:
    """Unit world-space ray directions through pixel centers."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    d_cam = np.stack([(pixels[:, 0] - intrinsics.cx) / intrinsics.fx,
                      (pixels[:, 1] - intrinsics.cy) / intrinsics.fy,
                      np.ones(len(pixels))], axis=-1)
    d = d_cam @ pose.rotation.T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def reproject_many(pixels: np.ndarray, depths: np.ndarray, pose0: CameraPose, pose1: CameraPose,
                   intrinsics: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`reproject`; returns ``(pixels', valid)``."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    depths = np.asarray(depths, dtype=np.float64).reshape(-1)
    d0 = pixel_directions(pixels, pose0, intrinsics)
    surface = pose0.center + depths[:, None] * d0
    v = (surface - pose1.center) @ pose1.rotation  # camera-frame coordinates in pose1
    z = v[:, 2]
    valid = (z > 0) & (depths > 0)
    proj = v @ intrinsics.matrix.T
    with np.errstate(divide="ignore", invalid="ignore"):
        out = proj[:, :2] / np.abs(z)[:, None]
    out[~valid] = np.nan
    return out, valid


def view_offset(blur_pixels, depths, poses: Sequence[CameraPose], intrinsics: Intrinsics,
                offset_norm: str = "euclidean") -> float:
    """Mean reprojected displacement of blur pixels across consecutive poses.

    ``depths`` is either one depth per pixel (reused for every pose pair) or
    an array of shape ``(len(poses) - 1, n_pixels)`` with the depth seen from
    each pair's first pose. ``offset_norm="squared"`` uses the squared pixel
    distance instead of the distance. Pixels that land behind the camera are
    left out of the average.
    """
    if offset_norm not in ("euclidean", "squared"):
        raise ValueError(f"unknown offset_norm {offset_norm!r}")
    pixels = np.asarray(blur_pixels, dtype=np.float64).reshape(-1, 2)
    if len(pixels) == 0 or len(poses) < 2:
        return 0.0
    depths = np.asarray(depths, dtype=np.float64)
    if depths.ndim == 1:
        depths = np.broadcast_to(depths, (len(poses) - 1, len(pixels)))
    pair_means = []
    for i in range(1, len(poses)):
        if poses[i] == poses[i - 1]:
            pair_means.append(0.0)  # no motion; skip round-off from the reprojection
            continue
        moved, valid = reproject_many(pixels, depths[i - 1], poses[i - 1], poses[i], intrinsics)
        if not valid.any():
            continue
        sq = np.sum((moved[valid] - pixels[valid]) ** 2, axis=-1)
        dist = sq if offset_norm == "squared" else np.sqrt(sq)
        pair_means.append(dist.mean())
    if not pair_means:
        return 0.0
    return float(np.mean(pair_means))


def local_b(delta_bar: float, b: int, epsilon: float) -> int:
    """Bin count for one view given its blur range."""
    if b < 1:
        raise ValueError("b must be >= 1")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if delta_bar <= epsilon:
        return b
    return b * (1 + math.ceil((delta_bar - epsilon) / b))
