"""Coarse/fine radiance field, ray sampling and volume rendering (torch)."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .motion import CameraPose, Intrinsics, pixel_directions

CKPT_MAGIC = b"EVRFCKPT"
CKPT_VERSION = 1


def positional_encode(x: torch.Tensor, M: int) -> torch.Tensor:
    """Raw input followed by sin/cos(2^m pi x) for m = 0..M, per component.

    Output width is ``d * (1 + 2 (M + 1))`` for ``d`` input components.
    """
    x = torch.as_tensor(x)
    if x.ndim == 0:
        x = x[None]
    freqs = (2.0 ** torch.arange(M + 1, dtype=x.dtype)) * torch.pi
    xf = x[..., None, :] * freqs[:, None]  # (..., M+1, d)
    enc = torch.stack([torch.sin(xf), torch.cos(xf)], dim=-2)  # (..., M+1, 2, d)
    return torch.cat([x, enc.flatten(-3)], dim=-1)


def encoded_dim(d: int, M: int) -> int:
    return d * (1 + 2 * (M + 1))


class FieldMLP(nn.Module):
    """One field: encoded position -> density, plus direction -> color.

    The density head never sees the view direction.
    """

    def __init__(self, depth: int = 4, width: int = 64, m_pos: int = 10, m_dir: int = 4):
        super().__init__()
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.depth, self.width, self.m_pos, self.m_dir = depth, width, m_pos, m_dir
        in_pos = encoded_dim(3, m_pos)
        self.trunk = nn.ModuleList(
            [nn.Linear(in_pos, width)] + [nn.Linear(width, width) for _ in range(depth - 1)])
        self.sigma = nn.Linear(width, 1)
        # He init keeps activations from shrinking through the ReLU trunk, and
        # a positive density bias keeps the rectified density alive at init
        for layer in self.trunk:
            nn.init.kaiming_normal_(layer.weight, nonlinearity="relu")
            nn.init.zeros_(layer.bias)
        nn.init.constant_(self.sigma.bias, 0.1)
        self.feature = nn.Linear(width, width)
        self.view = nn.Linear(width + encoded_dim(3, m_dir), width // 2)
        self.rgb = nn.Linear(width // 2, 3)

    def forward(self, points: torch.Tensor, dirs: torch.Tensor):
        """``points``: (R, S, 3); ``dirs``: (R, 3) unit. Returns rgb (R, S, 3), sigma (R, S)."""
        h = positional_encode(points, self.m_pos)
        for layer in self.trunk:
            h = F.relu(layer(h))
        sigma = F.relu(self.sigma(h)).squeeze(-1)
        feat = self.feature(h)
        # split the view layer so the direction term is computed once per ray
        w = self.view.weight
        view_term = F.linear(positional_encode(dirs, self.m_dir), w[:, self.width:], self.view.bias)
        h = F.relu(F.linear(feat, w[:, :self.width]) + view_term[:, None, :])
        rgb = torch.sigmoid(self.rgb(h))
        return rgb, sigma

    def descriptor(self) -> dict:
        return {"depth": self.depth, "width": self.width, "m_pos": self.m_pos, "m_dir": self.m_dir}


class RadianceField(nn.Module):
    """Independent coarse and fine fields."""

    def __init__(self, depth: int = 4, width: int = 64, m_pos: int = 10, m_dir: int = 4,
                 seed: int | None = None, dtype=torch.float32):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed)
        self.coarse = FieldMLP(depth, width, m_pos, m_dir)
        self.fine = FieldMLP(depth, width, m_pos, m_dir)
        self.to(dtype)

    @property
    def dtype(self):
        return self.coarse.rgb.weight.dtype

    def descriptor(self) -> dict:
        return {"coarse": self.coarse.descriptor(), "fine": self.fine.descriptor(),
                "dtype": str(self.dtype).replace("torch.", "")}

    def flat_params(self) -> torch.Tensor:
        return nn.utils.parameters_to_vector(self.parameters())

    def load_flat_params(self, vec) -> None:
        vec = torch.as_tensor(vec, dtype=self.dtype)
        if vec.numel() != sum(p.numel() for p in self.parameters()):
            raise ValueError("parameter vector length does not match the architecture")
        nn.utils.vector_to_parameters(vec, self.parameters())

    def zero_(self) -> "RadianceField":
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self


def field_eval(net: FieldMLP, point, direction):
    """Color and density of one field at a single point/direction."""
    dtype = net.rgb.weight.dtype
    p = torch.as_tensor(point, dtype=dtype).reshape(1, 1, 3)
    d = torch.as_tensor(direction, dtype=dtype).reshape(1, 3)
    with torch.no_grad():
        rgb, sigma = net(p, d)
    return rgb.reshape(3), sigma.reshape(())


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not self.near < self.far:
            raise ValueError("near must be below far")


def generate_rays(pose: CameraPose, intrinsics: Intrinsics, pixels) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole rays through pixel centers; returns (origins, unit directions)."""
    dirs = pixel_directions(pixels, pose, intrinsics)
    origins = np.broadcast_to(pose.center, dirs.shape).copy()
    return origins, dirs


def stratified_depths(n_rays: int, n_samples: int, near: float, far: float, jitter: bool = False,
                      generator: torch.Generator | None = None, dtype=torch.float32) -> torch.Tensor:
    """One depth per uniform stratum; midpoints unless ``jitter``."""
    edges = torch.linspace(near, far, n_samples + 1, dtype=dtype)
    lo, width = edges[:-1], edges[1:] - edges[:-1]
    if jitter:
        u = torch.rand((n_rays, n_samples), generator=generator, dtype=dtype)
    else:
        u = torch.full((n_rays, n_samples), 0.5, dtype=dtype)
    return lo + u * width


@dataclass
class RenderOutput:
    color: torch.Tensor  # (R, 3)
    depth: torch.Tensor  # (R,)
    weights: torch.Tensor  # (R, S)
    acc: torch.Tensor  # (R,)
    transmittance: torch.Tensor  # (R, S)


def composite(rgb: torch.Tensor, sigma: torch.Tensor, depths: torch.Tensor, far: float,
              background: float = 0.0) -> RenderOutput:
    """Alpha-composite samples along each ray.

    delta_i = l_{i+1} - l_i with the last interval closed at ``far``. Depth is
    the weight-normalised expected depth (the plain weighted sum divided by
    the accumulated opacity), falling back to ``far`` for empty rays. The
    unclaimed transmittance is filled with ``background``.
    """
    far_t = torch.full_like(depths[..., :1], far)
    deltas = torch.cat([depths[..., 1:], far_t], dim=-1) - depths
    tau = sigma * deltas
    alpha = 1.0 - torch.exp(-tau)
    trans = torch.exp(-torch.cumsum(torch.cat([torch.zeros_like(tau[..., :1]), tau[..., :-1]], dim=-1), dim=-1))
    weights = trans * alpha
    acc = weights.sum(-1)
    color = (weights[..., None] * rgb).sum(-2)
    if background:
        color = color + (1.0 - acc)[..., None] * background
    wdepth = (weights * depths).sum(-1)
    depth = torch.where(acc > 0, wdepth / acc.clamp_min(1e-12), torch.full_like(acc, far))
    return RenderOutput(color, depth, weights, acc, trans)


def render_rays(net: FieldMLP, origins: torch.Tensor, dirs: torch.Tensor, depths: torch.Tensor, far: float,
                background: float = 0.0) -> RenderOutput:
    points = origins[:, None, :] + depths[..., None] * dirs[:, None, :]
    rgb, sigma = net(points, dirs)
    return composite(rgb, sigma, depths, far, background)


def render_ray(net: FieldMLP, ray: Ray, depths, background: float = 0.0) -> RenderOutput:
    """Render a single :class:`Ray` at the given sample depths."""
    dtype = net.rgb.weight.dtype
    depths = torch.as_tensor(depths, dtype=dtype).reshape(1, -1)
    if torch.any(depths[:, 1:] <= depths[:, :-1]):
        raise ValueError("sample depths must be strictly increasing")
    o = torch.as_tensor(ray.origin, dtype=dtype).reshape(1, 3)
    d = torch.as_tensor(ray.direction, dtype=dtype).reshape(1, 3)
    return render_rays(net, o, d, depths, ray.far, background)


def hierarchical_sample(coarse_weights: torch.Tensor, near: float, far: float, n_fine: int,
                        generator: torch.Generator | None = None, deterministic: bool = False,
                        coarse_depths: torch.Tensor | None = None) -> torch.Tensor:
    """Inverse-CDF samples from the piecewise-constant pdf over coarse strata.

    Stratum i spans [near + i h, near + (i + 1) h] with mass proportional to
    coarse weight i; all-zero rows sample uniformly. When ``coarse_depths`` is
    given the result is merged with it and sorted.
    """
    w = coarse_weights.detach()
    n_rays, n_bins = w.shape
    dtype = w.dtype
    w = w.clamp_min(0)
    total = w.sum(-1, keepdim=True)
    pdf = torch.where(total > 0, w / total.clamp_min(1e-30), torch.full_like(w, 1.0 / n_bins))
    cdf = torch.cat([torch.zeros_like(pdf[:, :1]), torch.cumsum(pdf, -1)], -1)
    cdf[:, -1] = 1.0
    if deterministic:
        u = ((torch.arange(n_fine, dtype=dtype) + 0.5) / n_fine).expand(n_rays, n_fine).contiguous()
    else:
        u = torch.rand((n_rays, n_fine), generator=generator, dtype=dtype)
    idx = torch.searchsorted(cdf, u, right=True).clamp(1, n_bins)
    c_lo = torch.gather(cdf, 1, idx - 1)
    c_hi = torch.gather(cdf, 1, idx)
    span = c_hi - c_lo
    frac = torch.where(span > 0, (u - c_lo) / span.clamp_min(1e-30), torch.zeros_like(u))
    h = (far - near) / n_bins
    samples = near + ((idx - 1).to(dtype) + frac) * h
    if coarse_depths is not None:
        samples = torch.cat([coarse_depths.detach(), samples], -1)
    return torch.sort(samples, -1).values


def compute_gradients(loss_fn: Callable[[], torch.Tensor], module: nn.Module) -> torch.Tensor:
    """Reverse-mode gradient of a scalar loss w.r.t. all module parameters, flattened."""
    params = [p for p in module.parameters()]
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return torch.cat([(g if g is not None else torch.zeros_like(p)).reshape(-1) for g, p in zip(grads, params)])


def save_checkpoint(path, field: RadianceField, extra: dict | None = None) -> None:
    """Versioned checkpoint: magic, version, JSON header length, JSON, float64 LE params."""
    header = {"architecture": field.descriptor(), "n_params": int(field.flat_params().numel())}
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode()
    params = field.flat_params().detach().to(torch.float64).numpy().astype("<f8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        f.write(blob)
        f.write(params.tobytes())


def load_checkpoint(path) -> tuple[RadianceField, dict]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not an evrf checkpoint")
    version, n = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + n])
    arch = header["architecture"]["fine"]
    dtype = getattr(torch, header["architecture"].get("dtype", "float32"))
    field = RadianceField(arch["depth"], arch["width"], arch["m_pos"], arch["m_dir"], dtype=dtype)
    params = np.frombuffer(data[16 + n:], dtype="<f8")
    if params.size != header["n_params"]:
        raise ValueError(f"{path}: expected {header['n_params']} parameters, found {params.size}")
    field.load_flat_params(torch.from_numpy(params.copy()))
    return field, header
