"""Training loop: spatial/temporal attention batching, warm-up, re-splitting, metrics."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import losses as L
from .events import AttentionMask, BinSet, EventStream, signed_counts, spatial_mask, split_by_count, split_by_time
from .field import (RadianceField, composite, hierarchical_sample, render_rays, save_checkpoint,
                    stratified_depths)
from .io import dump_toml, write_json, write_png
from .metrics import psnr, ssim
from .motion import CameraPose, Intrinsics, Trajectory, interpolate_pose, local_b, pixel_directions, view_offset

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    iterations: int = 20_000
    warmup_iterations: int = 1_000
    b: int = 4
    epsilon: float = 6.0
    lr: float = 5e-4
    lr_final: float = 5e-5
    seed: int = 0
    n_coarse: int = 16
    n_fine: int = 16
    depth: int = 4
    width: int = 64
    background: float = 0.5
    offset_norm: str = "euclidean"
    split_mode: str = "count"  # "count" (temporal attention) or "time"
    spatial_attention: bool = True
    motion_split: bool = True
    eval_every: int = 2_000
    render_chunk: int = 4096
    deterministic: bool = False
    threads: int = 1
    loss: L.LossConfig = field(default_factory=L.LossConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.warmup_iterations < self.iterations:
            raise ValueError("warmup_iterations must be below iterations")
        if self.b < 1:
            raise ValueError("b must be >= 1")
        if self.split_mode not in ("count", "time"):
            raise ValueError(f"unknown split_mode {self.split_mode!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        loss = d.pop("loss")
        loss["lambda"] = loss.pop("lam")
        d["loss"] = loss
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        loss = L.LossConfig.from_dict(d.pop("loss", {}))
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(loss=loss, **d)


@dataclass(frozen=True, eq=False)
class ViewRecord:
    """One training view with its current bins, mask and split poses."""

    blur: np.ndarray  # (H, W, 3) linear
    stream: EventStream
    trajectory: Trajectory
    intrinsics: Intrinsics
    binset: BinSet
    mask: AttentionMask
    local_b: int
    poses: tuple  # b + 1 CameraPose at the split times

    @classmethod
    def build(cls, blur, stream: EventStream, trajectory: Trajectory, intrinsics: Intrinsics, b: int,
              split_mode: str = "count") -> "ViewRecord":
        blur = np.asarray(blur, dtype=np.float64)
        if blur.ndim != 3 or blur.shape[2] != 3:
            raise ValueError("blur image must be (H, W, 3)")
        if blur.shape[:2] != stream.shape:
            raise ValueError(f"image size {blur.shape[:2]} does not match event sensor {stream.shape}")
        binset = split_by_count(stream, b) if split_mode == "count" else split_by_time(stream, b)
        poses = tuple(interpolate_pose(trajectory, float(t)) for t in binset.split_times)
        return cls(blur, stream, trajectory, intrinsics, binset, spatial_mask(binset), b, poses)

    def resplit(self, b: int, split_mode: str = "count") -> "ViewRecord":
        return ViewRecord.build(self.blur, self.stream, self.trajectory, self.intrinsics, b, split_mode)

    @property
    def height(self) -> int:
        return self.blur.shape[0]

    @property
    def width(self) -> int:
        return self.blur.shape[1]


@dataclass(eq=False)
class PixelBatchItem:
    view: int
    pixel: tuple  # (x, y)
    is_blur: bool
    color: np.ndarray  # (3,)
    counts: np.ndarray  # (b,) signed counts; empty for sharp pixels
    origins: np.ndarray  # (b + 1, 3) or (1, 3)
    dirs: np.ndarray
    weights: np.ndarray  # (b + 1,) or (1,)
    coarse_index: int  # ray used by the coarse model

    @property
    def n_rays(self) -> int:
        return len(self.origins)


class _ViewCache:
    """Per-view lookup tables so a batch is pure indexing."""

    def __init__(self, view: ViewRecord, spatial_attention: bool):
        h, w = view.height, view.width
        ys, xs = np.mgrid[0:h, 0:w]
        pix = np.stack([xs.ravel(), ys.ravel()], -1)
        self.dirs = np.stack([pixel_directions(pix, p, view.intrinsics) for p in view.poses])  # (b+1, HW, 3)
        self.centers = np.stack([p.center for p in view.poses])
        self.colors = view.blur.reshape(-1, 3)
        self.counts = view.binset.counts.reshape(view.binset.b, -1).T  # (HW, b)
        self.blur = view.mask.blur.ravel() if spatial_attention else np.ones(h * w, dtype=bool)
        self.weights = view.binset.weights
        self.b = view.binset.b
        self.width = w


def sample_batch(dataset: Sequence[ViewRecord], cfg: TrainConfig, rng: np.random.Generator,
                 _caches=None) -> list[PixelBatchItem]:
    """Draw ``cfg.batch_size`` pixels uniformly over all views and pixels.

    Blur pixels carry one ray per split pose; sharp pixels carry a single ray
    at a uniformly chosen split pose.
    """
    if not dataset:
        raise ValueError("empty dataset")
    caches = _caches or [_ViewCache(v, cfg.spatial_attention) for v in dataset]
    sizes = np.array([v.height * v.width for v in dataset])
    flat = rng.integers(0, sizes.sum(), size=cfg.batch_size)
    view_idx = np.searchsorted(np.cumsum(sizes), flat, side="right")
    pix_idx = flat - np.concatenate([[0], np.cumsum(sizes)[:-1]])[view_idx]
    pose_draw = rng.random(cfg.batch_size)
    items = []
    for v, p, u in zip(view_idx.tolist(), pix_idx.tolist(), pose_draw.tolist()):
        c = caches[v]
        k = min(int(u * (c.b + 1)), c.b)
        xy = (p % c.width, p // c.width)
        if c.blur[p]:
            items.append(PixelBatchItem(v, xy, True, c.colors[p], c.counts[p], c.centers, c.dirs[:, p],
                                        c.weights, k))
        else:
            items.append(PixelBatchItem(v, xy, False, c.colors[p], c.counts[p, :0], c.centers[k:k + 1],
                                        c.dirs[k:k + 1, p], np.ones(1), 0))
    return items


@dataclass
class _Collated:
    origins: torch.Tensor
    dirs: torch.Tensor
    coarse_rays: torch.Tensor  # ray index supervised by the coarse model, one per item
    colors: torch.Tensor  # (items, 3)
    sharp_items: torch.Tensor
    sharp_rays: torch.Tensor
    blur_groups: list  # (item idx, ray idx (P, b+1), weights (P, b+1), counts (P, b))


def collate(items: list[PixelBatchItem], dtype=torch.float32) -> _Collated:
    offsets = np.cumsum([0] + [it.n_rays for it in items])
    origins = np.concatenate([it.origins for it in items])
    dirs = np.concatenate([it.dirs for it in items])
    coarse = offsets[:-1] + np.array([it.coarse_index for it in items])
    sharp = [i for i, it in enumerate(items) if not it.is_blur]
    groups = {}
    for i, it in enumerate(items):
        if it.is_blur:
            groups.setdefault(it.n_rays, []).append(i)
    blur_groups = []
    for n, idx in sorted(groups.items()):
        rays = offsets[idx][:, None] + np.arange(n)
        blur_groups.append((torch.as_tensor(idx), torch.as_tensor(rays),
                            torch.as_tensor(np.stack([items[i].weights for i in idx]), dtype=dtype),
                            torch.as_tensor(np.stack([items[i].counts for i in idx]), dtype=dtype)))
    t = lambda a: torch.as_tensor(np.asarray(a), dtype=dtype)
    return _Collated(t(origins), t(dirs), torch.as_tensor(coarse), t(np.stack([it.color for it in items])),
                     torch.as_tensor(sharp, dtype=torch.long), torch.as_tensor(offsets[sharp], dtype=torch.long),
                     blur_groups)


@dataclass
class StepResult:
    total: torch.Tensor
    blur: float
    sharp: float
    event: float
    n_rays: int


def loss_on_batch(fld: RadianceField, batch: _Collated, cfg: TrainConfig, near: float, far: float,
                  generator: torch.Generator | None = None, jitter: bool = True) -> StepResult:
    """Forward pass for one collated batch; returns the differentiable total loss."""
    n = len(batch.origins)
    dtype = fld.dtype
    zc = stratified_depths(n, cfg.n_coarse, near, far, jitter=jitter, generator=generator, dtype=dtype)
    with torch.no_grad():
        coarse_all = render_rays(fld.coarse, batch.origins, batch.dirs, zc, far, cfg.background)
    zf = hierarchical_sample(coarse_all.weights, near, far, cfg.n_fine, generator=generator,
                             deterministic=not jitter, coarse_depths=zc)
    fine = render_rays(fld.fine, batch.origins, batch.dirs, zf, far, cfg.background)
    cr = batch.coarse_rays
    coarse = render_rays(fld.coarse, batch.origins[cr], batch.dirs[cr], zc[cr], far, cfg.background)

    zero = fine.color.sum() * 0.0
    l_sharp = zero
    if len(batch.sharp_items):
        l_sharp = L.sharp_loss(coarse.color[batch.sharp_items], fine.color[batch.sharp_rays],
                               batch.colors[batch.sharp_items])
    l_blur, l_event = zero, zero
    for idx, rays, w, counts in batch.blur_groups:
        sharp_colors = fine.color[rays]  # (P, b+1, 3)
        fine_blur = L.blur_color(sharp_colors, w)
        l_blur = l_blur + L.blur_loss(fine_blur, coarse.color[idx], batch.colors[idx])
        l_event = l_event + L.event_loss(sharp_colors, counts, cfg.loss)
    total = L.total_loss(l_blur, l_sharp, l_event, cfg.loss)
    return StepResult(total, l_blur.item(), l_sharp.item(), l_event.item(), n)


def render_view(fld: RadianceField, pose: CameraPose, intrinsics: Intrinsics, size: tuple, near: float,
                far: float, cfg: TrainConfig = TrainConfig(), pixels=None):
    """Deterministic render; returns (image (H, W, 3), depth (H, W)) or per-pixel arrays if ``pixels``."""
    if pixels is None:
        h, w = size
        ys, xs = np.mgrid[0:h, 0:w]
        pix = np.stack([xs.ravel(), ys.ravel()], -1)
    else:
        pix = np.asarray(pixels).reshape(-1, 2)
    dtype = fld.dtype
    dirs = torch.as_tensor(pixel_directions(pix, pose, intrinsics), dtype=dtype)
    origins = torch.as_tensor(np.broadcast_to(pose.center, dirs.shape).copy(), dtype=dtype)
    colors, depths = [], []
    with torch.no_grad():
        for s in range(0, len(pix), cfg.render_chunk):
            o, d = origins[s:s + cfg.render_chunk], dirs[s:s + cfg.render_chunk]
            zc = stratified_depths(len(o), cfg.n_coarse, near, far, jitter=False, dtype=dtype)
            wc = render_rays(fld.coarse, o, d, zc, far, cfg.background).weights
            zf = hierarchical_sample(wc, near, far, cfg.n_fine, deterministic=True, coarse_depths=zc)
            out = render_rays(fld.fine, o, d, zf, far, cfg.background)
            colors.append(out.color)
            depths.append(out.depth)
    color = torch.cat(colors).double().numpy()
    depth = torch.cat(depths).double().numpy()
    if pixels is not None:
        return color, depth
    return color.reshape(h, w, 3), depth.reshape(h, w)


@dataclass
class TestView:
    image: np.ndarray
    pose: CameraPose
    intrinsics: Intrinsics
    name: str = ""


def evaluate(fld: RadianceField, test_views: Sequence[TestView], near: float, far: float,
             cfg: TrainConfig = TrainConfig(), out_dir=None) -> dict:
    """PSNR/SSIM per test view and their means."""
    rows = []
    for i, tv in enumerate(test_views):
        img, _ = render_view(fld, tv.pose, tv.intrinsics, tv.image.shape[:2], near, far, cfg)
        if img.shape != tv.image.shape:
            raise ValueError(f"test view {i}: size mismatch {img.shape} vs {tv.image.shape}")
        rows.append({"view": tv.name or str(i), "psnr": psnr(img, tv.image), "ssim": ssim(img, tv.image)})
        if out_dir is not None:
            write_png(Path(out_dir) / f"render_{tv.name or i}.png", img)
    return {"views": rows,
            "mean_psnr": float(np.mean([r["psnr"] for r in rows])) if rows else float("nan"),
            "mean_ssim": float(np.mean([r["ssim"] for r in rows])) if rows else float("nan")}


def motion_guided_resplit(fld: RadianceField, dataset: list[ViewRecord], cfg: TrainConfig, near: float,
                          far: float) -> tuple[list[ViewRecord], list[dict]]:
    """Estimate each view's blur range from rendered depth and pick its local b."""
    new, info = [], []
    for i, view in enumerate(dataset):
        ys, xs = np.nonzero(view.mask.blur)
        pix = np.stack([xs, ys], -1)
        if len(pix) == 0:
            delta = 0.0
        else:
            depths = np.stack([render_view(fld, view.poses[k], view.intrinsics, None, near, far, cfg, pixels=pix)[1]
                               for k in range(len(view.poses) - 1)])
            delta = view_offset(pix, depths, view.poses, view.intrinsics, cfg.offset_norm)
        b_new = local_b(delta, cfg.b, cfg.epsilon)
        new.append(view.resplit(b_new, cfg.split_mode) if b_new != view.local_b else view)
        info.append({"view": i, "delta_bar": delta, "local_b": b_new})
        logger.info("view %d: blur range %.3f -> local b %d", i, delta, b_new)
    return new, info


@dataclass
class TrainResult:
    field: RadianceField
    log: list  # per-iteration dicts
    local_b: list
    rays_per_iteration: list


def _lr_at(cfg: TrainConfig, it: int) -> float:
    return cfg.lr * (cfg.lr_final / cfg.lr) ** (it / cfg.iterations)


def train(dataset: list[ViewRecord], cfg: TrainConfig, near: float, far: float, test_views=None,
          run_dir=None, progress: bool = False) -> TrainResult:
    """Two-phase training: global b warm-up, then motion-guided local b."""
    if len(dataset) < 2:
        raise ValueError("need at least two views")
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    else:
        torch.set_num_threads(cfg.threads)
    with torch.random.fork_rng():
        fld = RadianceField(cfg.depth, cfg.width, seed=cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(fld.parameters(), lr=cfg.lr)
    run_dir = Path(run_dir) if run_dir is not None else None
    csv_file = writer = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.toml").write_text(dump_toml(cfg.to_dict()))
        csv_file = open(run_dir / "metrics.csv", "w", newline="")
        writer = csv.writer(csv_file)
        writer.writerow(["iteration", "L_blur", "L_sharp", "L_event", "test_psnr"])

    dataset = [v if v.local_b == cfg.b else v.resplit(cfg.b, cfg.split_mode) for v in dataset]
    caches = [_ViewCache(v, cfg.spatial_attention) for v in dataset]
    log, rays, b_info = [], [], []
    t0 = time.time()
    try:
        for it in range(1, cfg.iterations + 1):
            if it == cfg.warmup_iterations + 1 and cfg.motion_split:
                dataset, b_info = motion_guided_resplit(fld, dataset, cfg, near, far)
                caches = [_ViewCache(v, cfg.spatial_attention) for v in dataset]
                if run_dir is not None:
                    write_json(run_dir / "local_b.json", b_info)
            items = sample_batch(dataset, cfg, rng, _caches=caches)
            batch = collate(items, fld.dtype)
            step = loss_on_batch(fld, batch, cfg, near, far, generator=gen)
            if not torch.isfinite(step.total):
                dump = _dump_batch(run_dir, it, items)
                raise TrainingError(f"non-finite loss at iteration {it}; batch dumped to {dump}")
            for g in opt.param_groups:
                g["lr"] = _lr_at(cfg, it - 1)
            opt.zero_grad(set_to_none=True)
            step.total.backward()
            opt.step()
            row = {"iteration": it, "L_blur": step.blur, "L_sharp": step.sharp, "L_event": step.event,
                   "test_psnr": None}
            rays.append(step.n_rays)
            if test_views and cfg.eval_every and (it % cfg.eval_every == 0 or it == cfg.iterations):
                row["test_psnr"] = evaluate(fld, test_views, near, far, cfg)["mean_psnr"]
                if progress:
                    logger.info("iter %d  psnr %.3f  (%.0fs)", it, row["test_psnr"], time.time() - t0)
            log.append(row)
            if writer is not None:
                writer.writerow([it, repr(step.blur), repr(step.sharp), repr(step.event),
                                 "" if row["test_psnr"] is None else repr(row["test_psnr"])])
    finally:
        if csv_file is not None:
            csv_file.close()
    if run_dir is not None:
        save_checkpoint(run_dir / "checkpoint.evrf", fld, {"near": near, "far": far,
                                                           "n_coarse": cfg.n_coarse, "n_fine": cfg.n_fine,
                                                           "background": cfg.background})
    return TrainResult(fld, log, b_info, rays)


def _dump_batch(run_dir, it, items) -> str:
    target = Path(run_dir or ".") / f"nonfinite_batch_{it}.json"
    payload = [{"view": i.view, "pixel": list(i.pixel), "blur": i.is_blur, "color": i.color.tolist(),
                "counts": i.counts.tolist()} for i in items]
    target.write_text(json.dumps(payload))
    return str(target)
