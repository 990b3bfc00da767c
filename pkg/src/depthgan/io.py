"""On-disk formats: 8-bit RGB PNG, 16-bit depth PNG, float32 depth arrays, ASCII PLY.

Depth PNGs store ``round((d - near) / (far - near) * 65535)``; ``near`` and
``far`` live in the dataset manifest, not in the image.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image

DEPTH_PNG_MAX = 65535


def write_rgb_png(path, rgb: np.ndarray) -> None:
    """Write an ``H x W x 3`` image with values in [-1, 1]."""
    img = np.clip(np.rint((np.asarray(rgb) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path)


def read_rgb_png(path) -> np.ndarray:
    """Read an 8-bit image and return ``H x W x 3`` float32 in [-1, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 127.5 - 1.0


def encode_depth(depth: np.ndarray, near: float, far: float) -> np.ndarray:
    scaled = (np.asarray(depth, dtype=np.float64) - near) / (far - near)
    return np.clip(np.rint(scaled * DEPTH_PNG_MAX), 0, DEPTH_PNG_MAX).astype(np.uint16)


def decode_depth(code: np.ndarray, near: float, far: float) -> np.ndarray:
    return near + code.astype(np.float64) / DEPTH_PNG_MAX * (far - near)


def write_depth_png(path, depth: np.ndarray, near: float, far: float) -> None:
    code = encode_depth(depth, near, far)
    Image.fromarray(code).save(path)


def read_depth_png(path, near: float, far: float) -> np.ndarray:
    with Image.open(path) as im:
        code = np.asarray(im, dtype=np.uint16)
    if code.ndim != 2:
        raise ValueError(f"{path}: expected a single-channel 16-bit depth image")
    return decode_depth(code, near, far)


def write_depth_npy(path, depth: np.ndarray) -> None:
    np.save(path, np.asarray(depth, dtype=np.float32))


def read_depth_npy(path) -> np.ndarray:
    return np.load(path).astype(np.float64)


def read_depth(path, near: float, far: float) -> np.ndarray:
    """Dispatch on extension: ``.png`` (16-bit) or ``.npy`` (float32)."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".png":
        return read_depth_png(path, near, far)
    if ext == ".npy":
        return read_depth_npy(path)
    raise ValueError(f"unsupported depth file type: {path}")


def write_ply(path, points: np.ndarray, colors: np.ndarray) -> None:
    """ASCII PLY with float x, y, z and uchar r, g, b per vertex."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors).reshape(-1, 3)
    if len(points) != len(colors):
        raise ValueError(f"{len(points)} points but {len(colors)} colors")
    colors = np.clip(np.rint(colors), 0, 255).astype(np.uint8)
    header = (
        "ply\n"
        "format ascii 1.0\n"
        f"element vertex {len(points)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    with open(path, "w") as fh:
        fh.write(header)
        for (x, y, z), (r, g, b) in zip(points, colors):
            fh.write(f"{x:.9g} {y:.9g} {z:.9g} {r} {g} {b}\n")


def read_ply(path):
    """Parse a file written by :func:`write_ply`; returns ``(points, colors)``."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n = None
    end = None
    for i, line in enumerate(lines):
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        if line == "end_header":
            end = i
            break
    if n is None or end is None:
        raise ValueError(f"{path}: malformed PLY header")
    body = lines[end + 1 : end + 1 + n]
    if len(body) != n:
        raise ValueError(f"{path}: expected {n} vertices, found {len(body)}")
    data = np.array([row.split() for row in body], dtype=np.float64).reshape(n, 6)
    return data[:, :3], data[:, 3:].astype(np.uint8)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
