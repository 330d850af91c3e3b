"""Image, JSON and config file helpers."""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
from PIL import Image

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

GAMMA = 2.2


def read_png(path) -> np.ndarray:
    """8-bit sRGB-ish PNG -> linear float64 in [0, 1] via gamma 2.2."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im, dtype=np.float64)
    return (arr / 255.0) ** GAMMA


def write_png(path, img) -> None:
    """Tonemap linear intensity by clipping to [0, 1] and applying gamma 1/2.2."""
    img = np.asarray(img, dtype=np.float64)
    enc = np.round(np.clip(img, 0.0, 1.0) ** (1.0 / GAMMA) * 255.0).astype(np.uint8)
    Image.fromarray(enc).save(path)


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        dims = f.readline()
        while dims.startswith(b"#"):
            dims = f.readline()
        m = re.match(rb"^\s*(\d+)\s+(\d+)\s*$", dims)
        if not m:
            raise ValueError(f"{path}: malformed PFM header")
        w, h = int(m.group(1)), int(m.group(2))
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        ch = 3 if kind == b"PF" else 1
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size != w * h * ch:
        raise ValueError(f"{path}: expected {w * h * ch} values, found {data.size}")
    img = data.reshape(h, w, ch)[::-1].astype(np.float64)
    return img[..., 0] if ch == 1 else img


def write_pfm(path, img) -> None:
    img = np.asarray(img, dtype="<f4")
    color = img.ndim == 3
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(b"PF\n" if color else b"Pf\n")
        f.write(f"{w} {h}\n-1.0\n".encode())
        f.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    return read_png(path)


def write_image(path, img) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        write_pfm(path, img)
    else:
        write_png(path, img)


def read_json(path):
    return json.loads(Path(path).read_text())


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))


def read_toml(path) -> dict:
    with open(path, "rb") as f:
        return tomllib.load(f)


def dump_toml(d: dict) -> str:
    """Minimal TOML writer for flat tables of scalars (config snapshots)."""
    lines, tables = [], []
    for k, v in d.items():
        if isinstance(v, dict):
            tables.append((k, v))
        else:
            lines.append(f"{k} = {_toml_value(v)}")
    for name, table in tables:
        lines.append(f"\n[{name}]")
        lines.extend(f"{k} = {_toml_value(v)}" for k, v in table.items())
    return "\n".join(lines) + "\n"


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    raise TypeError(f"cannot encode {type(v).__name__} as TOML")
