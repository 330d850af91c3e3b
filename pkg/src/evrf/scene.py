"""Scene manifests, dataset loading and the procedural toy-scene generator."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .events import EventFormatError, EventStream, read_events, write_events
from .io import read_image, read_json, write_image, write_json, write_png
from .motion import CameraPose, Intrinsics, Trajectory
from .sim import FrameSequence, SimConfig, simulate_events, synthesize_blur
from .trainer import TestView, ViewRecord

logger = logging.getLogger(__name__)


class SceneError(ValueError):
    pass


@dataclass
class ViewEntry:
    blur_image: str
    events: str
    trajectory: str
    frames: str | None = None  # optional frame-sequence descriptor


@dataclass
class SceneManifest:
    width: int
    height: int
    intrinsics: Intrinsics
    exposure_us: int
    theta_pos: float
    theta_neg: float
    near: float
    far: float
    views: list
    root: Path = Path(".")

    def to_json(self) -> dict:
        return {"width": self.width, "height": self.height, "intrinsics": self.intrinsics.to_dict(),
                "exposure_us": self.exposure_us, "theta_pos": self.theta_pos, "theta_neg": self.theta_neg,
                "near": self.near, "far": self.far,
                "views": [{k: v for k, v in dataclasses.asdict(e).items() if v is not None} for e in self.views]}

    @classmethod
    def load(cls, path) -> "SceneManifest":
        path = Path(path)
        try:
            d = read_json(path)
        except (OSError, ValueError) as e:
            raise SceneError(f"{path}: cannot read manifest: {e}") from None
        try:
            m = cls(int(d["width"]), int(d["height"]), Intrinsics.from_dict(d["intrinsics"]),
                    int(d["exposure_us"]), float(d["theta_pos"]), float(d["theta_neg"]),
                    float(d.get("near", 2.0)), float(d.get("far", 6.0)),
                    [ViewEntry(**v) for v in d["views"]], path.parent)
        except (KeyError, TypeError) as e:
            raise SceneError(f"{path}: malformed manifest ({e})") from None
        if not (m.theta_pos > 0 and m.theta_neg > 0):
            raise SceneError(f"{path}: thresholds must be positive")
        return m

    def save(self, path) -> None:
        write_json(path, self.to_json())


def load_scene(path, b: int = 4, split_mode: str = "count") -> tuple[list[ViewRecord], SceneManifest]:
    """Load and validate every view; bins and masks are computed eagerly."""
    m = SceneManifest.load(path)
    dataset = []
    for i, entry in enumerate(m.views):
        def where(p):
            return m.root / p

        for key in ("blur_image", "events", "trajectory"):
            if not where(getattr(entry, key)).exists():
                raise SceneError(f"view {i}: missing {key} file {where(getattr(entry, key))}")
        try:
            blur = read_image(where(entry.blur_image))
        except (OSError, ValueError) as e:
            raise SceneError(f"view {i}: {where(entry.blur_image)}: {e}") from None
        if blur.shape[:2] != (m.height, m.width):
            raise SceneError(f"view {i}: {where(entry.blur_image)}: size {blur.shape[:2]} "
                             f"!= manifest {(m.height, m.width)}")
        try:
            traj = Trajectory.from_json(read_json(where(entry.trajectory)))
        except (OSError, ValueError, KeyError) as e:
            raise SceneError(f"view {i}: {where(entry.trajectory)}: {e}") from None
        try:
            stream = read_events(where(entry.events), t_start=int(traj.t_start), t_end=int(traj.t_end))
        except EventFormatError as e:
            raise SceneError(f"view {i}: {e}") from None
        if stream.shape != (m.height, m.width):
            raise SceneError(f"view {i}: {where(entry.events)}: sensor {stream.shape} "
                             f"!= manifest {(m.height, m.width)}")
        dataset.append(ViewRecord.build(blur, stream, traj, m.intrinsics, b, split_mode))
    return dataset, m


def load_test_views(path) -> tuple[list[TestView], dict]:
    """Test manifest: {intrinsics, near, far, views: [{name, image, pose, kind, blur_image?}]}."""
    path = Path(path)
    d = read_json(path)
    k = Intrinsics.from_dict(d["intrinsics"])
    views = [TestView(read_image(path.parent / v["image"]), CameraPose.from_matrix(v["pose"]), k, v.get("name", ""))
             for v in d["views"]]
    return views, d


def load_frame_sequence(path) -> tuple[FrameSequence, Intrinsics, dict]:
    """Frame-sequence descriptor: {width, height, exposure_us, frames: [{file, t_us, pose}], intrinsics}."""
    path = Path(path)
    d = read_json(path)
    frames = np.stack([read_image(path.parent / f["file"]) for f in d["frames"]])
    if frames.shape[1:3] != (d["height"], d["width"]):
        raise SceneError(f"{path}: frame size {frames.shape[1:3]} != descriptor {(d['height'], d['width'])}")
    seq = FrameSequence(frames, [int(f["t_us"]) for f in d["frames"]],
                        [CameraPose.from_matrix(f["pose"]) for f in d["frames"]])
    return seq, Intrinsics.from_dict(d["intrinsics"]), d


# --------------------------------------------------------------------------
# procedural toy scene


@dataclass(frozen=True)
class SceneConfig:
    width: int = 64
    height: int = 64
    n_views: int = 12
    n_frames: int = 9
    n_novel_views: int = 4
    exposure_us: int = 8000
    focal: float | None = None  # defaults to the image width
    geometry: str = "plane"  # "plane" or "cuboid" (cuboid in front of the plane)
    plane_depth: float = 4.0
    tile_size: float = 0.5
    n_discs: int = 12
    spread: float = 0.8
    shake_translation: float = 0.25
    shake_rotation_deg: float = 1.5
    randomize_speed: bool = False
    theta_pos: float = 0.25
    theta_neg: float = 0.25
    supersample: int = 3
    near: float = 2.0
    far: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.geometry not in ("plane", "cuboid"):
            raise ValueError(f"unknown geometry {self.geometry!r}")
        if self.n_frames < 2 or self.n_views < 1:
            raise ValueError("need n_frames >= 2 and n_views >= 1")
        if not (0 < self.near < self.plane_depth < self.far):
            raise ValueError("plane must lie strictly between near and far")
        if self.shake_translation < 0 or self.shake_rotation_deg < 0:
            raise ValueError("shake amplitudes must be non-negative")
        if self.width < 1 or self.height < 1 or self.supersample < 1:
            raise ValueError("image size and supersampling must be positive")

    @property
    def intrinsics(self) -> Intrinsics:
        f = float(self.focal or self.width)
        return Intrinsics(f, f, (self.width - 1) / 2, (self.height - 1) / 2)


class ToyScene:
    """Textured plane at z = plane_depth, optionally with a textured cuboid in front."""

    def __init__(self, cfg: SceneConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.tile_colors = rng.uniform(0.05, 0.95, size=(32, 32, 3))
        self.discs = [(rng.uniform(-2.5, 2.5, 2), rng.uniform(0.08, 0.3), rng.uniform(0.05, 0.95, 3))
                      for _ in range(cfg.n_discs)]
        self.box_lo = np.array([-0.45, -0.45, cfg.plane_depth - 1.2])
        self.box_hi = np.array([0.45, 0.45, cfg.plane_depth - 0.4])
        self.box_colors = rng.uniform(0.05, 0.95, size=(8, 8, 3))

    def plane_texture(self, u, v):
        ts = self.cfg.tile_size
        iu = np.floor(u / ts).astype(np.int64) % 32
        iv = np.floor(v / ts).astype(np.int64) % 32
        col = self.tile_colors[iv, iu]
        for center, radius, color in self.discs:
            inside = (u - center[0]) ** 2 + (v - center[1]) ** 2 < radius ** 2
            col[inside] = color
        return col

    def box_texture(self, p):
        # checker on the box surface, sized to the face
        q = (p - self.box_lo) / (self.box_hi - self.box_lo)
        i = np.clip(np.floor(q * 4).astype(np.int64), 0, 3)
        return self.box_colors[(i[:, 0] + i[:, 2]) % 8, (i[:, 1] + 2 * i[:, 2]) % 8]

    def shade(self, origins, dirs):
        l_plane = (self.cfg.plane_depth - origins[:, 2]) / dirs[:, 2]
        hit = origins + l_plane[:, None] * dirs
        col = self.plane_texture(hit[:, 0], hit[:, 1])
        if self.cfg.geometry == "cuboid":
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (self.box_lo - origins) / dirs
                t2 = (self.box_hi - origins) / dirs
            tmin = np.nanmax(np.minimum(t1, t2), axis=1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=1)
            hit_box = (tmax >= tmin) & (tmin > 0)
            if hit_box.any():
                p = origins[hit_box] + tmin[hit_box, None] * dirs[hit_box]
                col[hit_box] = self.box_texture(p)
        return col

    def render(self, pose: CameraPose, intrinsics: Intrinsics, width: int, height: int, ss: int = 1) -> np.ndarray:
        offs = (np.arange(ss) + 0.5) / ss - 0.5
        ys, xs = np.mgrid[0:height, 0:width]
        acc = np.zeros((height * width, 3))
        for dy in offs:
            for dx in offs:
                d_cam = np.stack([(xs.ravel() + dx - intrinsics.cx) / intrinsics.fx,
                                  (ys.ravel() + dy - intrinsics.cy) / intrinsics.fy,
                                  np.ones(height * width)], -1)
                d = d_cam @ pose.rotation.T
                d /= np.linalg.norm(d, axis=-1, keepdims=True)
                acc += self.shade(np.broadcast_to(pose.center, d.shape), d)
        return (acc / ss ** 2).reshape(height, width, 3)


def look_at(center, target) -> CameraPose:
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    x = np.cross([0.0, 1.0, 0.0], z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return CameraPose(np.stack([x, y, z], axis=1), np.asarray(center, dtype=np.float64))


def _base_poses(cfg: SceneConfig, n: int, rng: np.random.Generator) -> list[CameraPose]:
    cols = int(np.ceil(np.sqrt(n * 4 / 3)))
    rows = int(np.ceil(n / cols))
    poses = []
    for i in range(n):
        r, c = divmod(i, cols)
        gx = (c + 0.5) / cols * 2 - 1
        gy = (r + 0.5) / rows * 2 - 1
        center = np.array([gx * cfg.spread, gy * 0.75 * cfg.spread, 0.0]) + rng.uniform(-0.08, 0.08, 3)
        target = np.array([0.3 * gx * cfg.spread, 0.3 * gy * cfg.spread, cfg.plane_depth]) + \
            np.append(rng.uniform(-0.1, 0.1, 2), 0.0)
        poses.append(look_at(center, target))
    return poses


def _progress(cfg: SceneConfig, rng: np.random.Generator, n: int) -> np.ndarray:
    """Motion progress in [0, 1] at each frame; non-uniform speed if configured."""
    u = np.linspace(0.0, 1.0, n)
    if not cfg.randomize_speed:
        return u
    speeds = rng.uniform(0.15, 1.85, size=4)
    knots = np.concatenate([[0.0], np.cumsum(speeds)]) / speeds.sum()
    return np.interp(u, np.linspace(0, 1, 5), knots)


def shake_trajectory(base: CameraPose, cfg: SceneConfig, rng: np.random.Generator) -> list[CameraPose]:
    s = _progress(cfg, rng, cfg.n_frames)
    d1 = rng.normal(size=3) * [1.0, 1.0, 0.3]
    d1 /= np.linalg.norm(d1)
    d2 = rng.normal(size=3) * [1.0, 1.0, 0.3]
    d2 /= np.linalg.norm(d2)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    phase = rng.uniform(0, 2 * np.pi)
    poses = []
    for si in s:
        trans = cfg.shake_translation * ((si - 0.5) * d1 + 0.35 * np.sin(2 * np.pi * si + phase) * d2)
        angle = np.deg2rad(cfg.shake_rotation_deg) * ((si - 0.5) + 0.3 * np.sin(np.pi * si + phase))
        rot = Rotation.from_rotvec(angle * axis).as_matrix()
        poses.append(CameraPose(base.rotation @ rot, base.center + base.rotation @ trans))
    return poses


def simulate_command(cfg: SceneConfig, out_dir) -> Path:
    """Write a complete synthetic dataset; returns the scene manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed + 1)
    scene = ToyScene(cfg)
    k = cfg.intrinsics
    w, h = cfg.width, cfg.height
    times = np.round(np.linspace(0, cfg.exposure_us, cfg.n_frames)).astype(np.int64)
    sim_cfg = SimConfig(cfg.theta_pos, cfg.theta_neg)
    base = _base_poses(cfg, cfg.n_views + cfg.n_novel_views, rng)
    views, tests = [], []
    for i in range(cfg.n_views):
        vdir = out / f"view_{i:03d}"
        vdir.mkdir(exist_ok=True)
        poses = shake_trajectory(base[i], cfg, rng)
        frames = np.stack([scene.render(p, k, w, h, cfg.supersample) for p in poses])
        seq = FrameSequence(frames, times, poses)
        blur = synthesize_blur(seq)
        stream = simulate_events(seq, sim_cfg)
        frame_entries = []
        for j, (fr, p) in enumerate(zip(frames, poses)):
            write_image(vdir / f"frame_{j:03d}.pfm", fr)
            frame_entries.append({"file": f"frame_{j:03d}.pfm", "t_us": int(times[j]), "pose": p.to_list()})
        write_json(vdir / "frames.json", {"width": w, "height": h, "exposure_us": cfg.exposure_us,
                                          "frames": frame_entries, "intrinsics": k.to_dict()})
        write_image(vdir / "blur.pfm", blur)
        write_png(vdir / "blur.png", blur)
        write_events(vdir / "events.evt", stream)
        traj = Trajectory(times, poses)
        write_json(vdir / "trajectory.json", traj.to_json())
        rel = vdir.name
        views.append(ViewEntry(f"{rel}/blur.pfm", f"{rel}/events.evt", f"{rel}/trajectory.json", f"{rel}/frames.json"))
        mid = cfg.n_frames // 2
        tests.append({"name": f"blur_{i:03d}", "kind": "blur_view", "image": f"{rel}/frame_{mid:03d}.pfm",
                      "blur_image": f"{rel}/blur.pfm", "pose": poses[mid].to_list()})
        logger.info("view %d: %d events", i, len(stream))
    tdir = out / "novel"
    tdir.mkdir(exist_ok=True)
    for j in range(cfg.n_novel_views):
        pose = base[cfg.n_views + j]
        img = scene.render(pose, k, w, h, cfg.supersample)
        write_image(tdir / f"novel_{j:03d}.pfm", img)
        tests.append({"name": f"novel_{j:03d}", "kind": "novel", "image": f"novel/novel_{j:03d}.pfm",
                      "pose": pose.to_list()})
    manifest = SceneManifest(w, h, k, cfg.exposure_us, cfg.theta_pos, cfg.theta_neg, cfg.near, cfg.far, views, out)
    manifest.save(out / "scene.json")
    write_json(out / "test_manifest.json", {"intrinsics": k.to_dict(), "near": cfg.near, "far": cfg.far,
                                            "views": tests})
    write_json(out / "scene_config.json", dataclasses.asdict(cfg))
    return out / "scene.json"
