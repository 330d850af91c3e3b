"""Training objectives: blur rendering, event rendering, sharp and total loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .sim import LUMA


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.005
    theta_pos: float = 0.25
    theta_neg: float = 0.25
    luminance_floor: float = 1e-3
    straight_through: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not (self.theta_pos > 0 and self.theta_neg > 0):
            raise ValueError("thresholds must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


def blur_color(sharp_colors, weights):
    """Weighted blur color sum_k W_k C_k over the b + 1 virtual frames (axis -2)."""
    sharp_colors = torch.as_tensor(sharp_colors)
    weights = torch.as_tensor(weights, dtype=sharp_colors.dtype)
    if sharp_colors.shape[-2] != weights.shape[-1]:
        raise ValueError(f"{sharp_colors.shape[-2]} colors but {weights.shape[-1]} weights")
    return (weights[..., None] * sharp_colors).sum(-2)


def blur_loss(fine_blur, coarse_color, input_color) -> torch.Tensor:
    """||fine_blur - C||^2 + ||coarse_k - C||^2 summed over blur pixels."""
    return ((fine_blur - input_color) ** 2).sum() + ((coarse_color - input_color) ** 2).sum()


def sharp_loss(coarse_color, fine_color, input_color) -> torch.Tensor:
    return ((coarse_color - input_color) ** 2).sum() + ((fine_color - input_color) ** 2).sum()


def total_loss(blur, sharp, event, cfg: LossConfig):
    return blur + sharp + cfg.lam * event


def estimate_bin_events(L_k, L_k1, cfg: LossConfig = LossConfig()) -> int:
    """Integer event count implied by a luminance change L_k -> L_k1."""
    lo = math.log(max(L_k, cfg.luminance_floor))
    hi = math.log(max(L_k1, cfg.luminance_floor))
    if L_k1 < L_k:
        return int(math.ceil((hi - lo) / cfg.theta_neg))
    return int(math.floor((hi - lo) / cfg.theta_pos))


def estimate_events_array(L_k, L_k1, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Vectorized :func:`estimate_bin_events` on numpy luminances."""
    lo = np.log(np.maximum(L_k, cfg.luminance_floor))
    hi = np.log(np.maximum(L_k1, cfg.luminance_floor))
    d = hi - lo
    return np.where(np.asarray(L_k1) < np.asarray(L_k), np.ceil(d / cfg.theta_neg),
                    np.floor(d / cfg.theta_pos)).astype(np.int64)


def estimate_events_torch(L_k: torch.Tensor, L_k1: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Differentiable-in-backward event count estimate.

    The forward value is the integer floor/ceil count. With
    ``cfg.straight_through`` the backward pass uses the continuous ratio
    (log L_k1 - log L_k) / theta; otherwise the count carries no gradient.
    """
    lo = torch.log(L_k.clamp_min(cfg.luminance_floor))
    hi = torch.log(L_k1.clamp_min(cfg.luminance_floor))
    d = hi - lo
    darker = L_k1 < L_k
    ratio = torch.where(darker, d / cfg.theta_neg, d / cfg.theta_pos)
    count = torch.where(darker, torch.ceil(ratio), torch.floor(ratio)).detach()
    if cfg.straight_through:
        return ratio + (count - ratio).detach()
    return count


def luminance_torch(rgb: torch.Tensor) -> torch.Tensor:
    return rgb @ torch.as_tensor(LUMA, dtype=rgb.dtype)


def event_loss(pred_sharp_colors, true_counts, cfg: LossConfig, n_bins=None) -> torch.Tensor:
    """Squared error between estimated and observed per-bin signed counts.

    ``pred_sharp_colors``: (P, b + 1, 3) fine colors of blur pixels;
    ``true_counts``: (P, b). Each pixel's sum over bins is divided by its bin
    count (``n_bins`` per pixel, defaults to b).
    """
    colors = torch.as_tensor(pred_sharp_colors)
    counts = torch.as_tensor(true_counts, dtype=colors.dtype)
    lum = luminance_torch(colors)
    est = estimate_events_torch(lum[:, :-1], lum[:, 1:], cfg)
    per_pixel = ((est - counts) ** 2).sum(-1)
    b = counts.shape[-1] if n_bins is None else torch.as_tensor(n_bins, dtype=colors.dtype)
    return (per_pixel / b).sum()
