"""Noiseless DVS simulation and motion-blur synthesis from virtual sharp frames."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .events import EventStream
from .motion import CameraPose

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class SimConfig:
    theta_pos: float = 0.25
    theta_neg: float = 0.25
    luminance_floor: float = 1e-3

    def __post_init__(self):
        if not (self.theta_pos > 0 and self.theta_neg > 0):
            raise ValueError("thresholds must be positive")
        if not self.luminance_floor > 0:
            raise ValueError("luminance floor must be positive")


@dataclass(frozen=True, eq=False)
class FrameSequence:
    """``n`` sharp linear-intensity RGB frames with timestamps (us) and poses."""

    frames: np.ndarray
    timestamps: np.ndarray
    poses: Sequence[CameraPose] | None = None

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        ts = np.asarray(self.timestamps, dtype=np.int64)
        if frames.ndim not in (3, 4):
            raise ValueError("frames must be (n, H, W) or (n, H, W, 3)")
        if len(frames) < 2:
            raise ValueError("need at least two frames")
        if len(ts) != len(frames):
            raise ValueError("one timestamp per frame required")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if self.poses is not None and len(self.poses) != len(frames):
            raise ValueError("one pose per frame required")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "timestamps", ts)

    def __len__(self):
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]


def luminance(rgb) -> np.ndarray:
    """Rec.601 luma of linear RGB; grayscale input passes through."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim == 0 or rgb.shape[-1] != 3:
        return rgb
    return rgb @ LUMA


def log_luminance(rgb, floor: float = 1e-3) -> np.ndarray:
    return np.log(np.maximum(luminance(rgb), floor))


def simulate_events(seq: FrameSequence, cfg: SimConfig = SimConfig()) -> EventStream:
    """Emit threshold-crossing events between consecutive frames.

    Each pixel keeps a reference log-luminance, initialised from frame 0.
    Log-luminance is interpolated linearly in time between frames; every time
    it crosses reference +/- theta an event fires at the (ceil'd) crossing time
    and the reference moves by exactly theta.
    """
    logs = log_luminance(seq.frames, cfg.luminance_floor).reshape(len(seq), -1)
    width = seq.width
    ref = logs[0].copy()
    chunks = []
    for j in range(len(seq) - 1):
        a, c = logs[j], logs[j + 1]
        t0, t1 = float(seq.timestamps[j]), float(seq.timestamps[j + 1])
        n_pos = np.where(c > ref, np.floor((c - ref) / cfg.theta_pos), 0).astype(np.int64)
        n_neg = np.where(c < ref, np.floor((ref - c) / cfg.theta_neg), 0).astype(np.int64)
        for n, sign, theta in ((n_pos, 1, cfg.theta_pos), (n_neg, -1, cfg.theta_neg)):
            pix = np.repeat(np.arange(len(n)), n)
            if len(pix):
                # 1-based event number within this pixel's run
                starts = np.repeat(np.cumsum(n) - n, n)
                k = np.arange(len(pix)) - starts + 1
                level = ref[pix] + sign * k * theta
                frac = (level - a[pix]) / (c[pix] - a[pix])
                t = np.ceil(t0 + np.clip(frac, 0.0, 1.0) * (t1 - t0))
                t = np.clip(t, t0 + 1, t1).astype(np.int64)
                chunks.append((pix, t, np.full(len(pix), sign, dtype=np.int64)))
        ref = ref + n_pos * cfg.theta_pos - n_neg * cfg.theta_neg
    t_start, t_end = int(seq.timestamps[0]), int(seq.timestamps[-1])
    if not chunks:
        return EventStream.empty(t_start, t_end, width, seq.height)
    pix = np.concatenate([c[0] for c in chunks])
    t = np.concatenate([c[1] for c in chunks])
    p = np.concatenate([c[2] for c in chunks])
    order = np.argsort(t, kind="stable")
    pix, t, p = pix[order], t[order], p[order]
    return EventStream(pix % width, pix // width, t, p, t_start, t_end, width, seq.height)


def synthesize_blur(seq: FrameSequence, weights=None) -> np.ndarray:
    """Weighted sum of the frames in linear intensity (uniform by default)."""
    n = len(seq)
    if weights is None:
        weights = np.full(n, 1.0 / n)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,):
        raise ValueError(f"expected {n} weights, got shape {weights.shape}")
    if not np.isclose(weights.sum(), 1.0, atol=1e-9):
        raise ValueError("blur weights must sum to 1")
    # accumulate differences to frame 0 so identical frames reproduce it exactly
    ref = seq.frames[0]
    return ref + np.tensordot(weights, seq.frames - ref, axes=1)
