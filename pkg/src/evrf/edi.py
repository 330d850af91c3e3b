"""Discrete weighted event-based double integral (EDI) deblurring."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .events import BinSet


@dataclass(frozen=True, eq=False)
class EdiResult:
    frames: np.ndarray  # (b + 1, H, W[, C]) linear intensity
    split_times: np.ndarray
    weights: np.ndarray


def edi_deblur(blur, binset: BinSet, theta: float) -> EdiResult:
    """Recover the b + 1 latent frames at the bin split times.

    With cumulative signed counts S_k (S_0 = 0), I_k = I_0 exp(theta S_k) and
    I_0 = blur / sum_k W_k exp(theta S_k), so sum_k W_k I_k == blur. Color
    images reuse the same (luminance) counts for every channel.
    """
    if not theta > 0:
        raise ValueError("theta must be positive")
    blur = np.asarray(blur, dtype=np.float64)
    h, w = binset.stream.height, binset.stream.width
    if blur.shape[:2] != (h, w):
        raise ValueError(f"blur image {blur.shape[:2]} does not match events {(h, w)}")
    weights = binset.weights
    cum = np.concatenate([np.zeros((1, h, w)), np.cumsum(binset.counts, axis=0)], axis=0)
    gains = np.exp(theta * cum)
    nz = weights > 0
    denom = np.tensordot(weights[nz], gains[nz], axes=1)
    if blur.ndim == 3:
        gains = gains[..., None]
        denom = denom[..., None]
    i0 = blur / denom
    return EdiResult(i0[None] * gains, binset.split_times.copy(), weights)


def export_frames(result: EdiResult, out_dir) -> list[Path]:
    """Write each frame as PNG plus ``manifest.json``; returns all written paths."""
    from .io import write_png

    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create {out_dir}: {e}") from e
    files = []
    entries = []
    for k, frame in enumerate(result.frames):
        path = out_dir / f"frame_{k:03d}.png"
        write_png(path, frame)
        files.append(path)
        entries.append({"file": path.name, "t_us": float(result.split_times[k]),
                        "weight": float(result.weights[k])})
    manifest = out_dir / "manifest.json"
    try:
        manifest.write_text(json.dumps({"frames": entries}, indent=2))
    except OSError as e:
        raise OSError(f"cannot write {manifest}: {e}") from e
    files.append(manifest)
    return files


def load_frame_manifest(path) -> list[dict]:
    return json.loads(Path(path).read_text())["frames"]
