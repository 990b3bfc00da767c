"""Metrics (rotation precision/consistency, depth prediction, Fréchet distance) and visual outputs."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image, ImageDraw

from . import io
from .camera import CameraIntrinsics, RotationSpec, backward_warp, unproject
from .losses import depth_ce, downsample_depth, quantize_depth

logger = logging.getLogger(__name__)

__all__ = [
    "GaussianStats",
    "MetricReport",
    "rotation_metrics",
    "rotation_precision",
    "rotation_consistency",
    "depth_prediction_metrics",
    "frechet_distance",
    "embedding_stats",
    "downsample_embedder",
    "RandomConvEmbedder",
    "rotation_sweep",
    "interpolate",
    "export_pointcloud",
]


# ---------------------------------------------------------------------- reports


@dataclass
class MetricReport:
    seed: Optional[int] = None
    checkpoint: Optional[str] = None
    metrics: Dict[str, dict] = field(default_factory=dict)

    def add(self, name: str, value: float, n: int):
        self.metrics[name] = {"value": float(value), "n": int(n), "seed": self.seed, "checkpoint": self.checkpoint}

    def to_json(self) -> str:
        return json.dumps(self.metrics, indent=2, sort_keys=True)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")


# ---------------------------------------------------------------------- rotation metrics


def _per_sample_masked_l1(a, b, mask):
    channels = a.shape[1]
    num = ((a - b).abs() * mask).flatten(1).sum(dim=1)
    den = torch.clamp(mask.flatten(1).sum(dim=1) * channels, min=1.0)
    return num / den


@torch.no_grad()
def rotation_metrics(
    generator,
    k: CameraIntrinsics,
    n_pairs: int,
    rng: torch.Generator,
    theta_range,
    near: float,
    far: float,
    pivot=None,
    batch_size: int = 32,
):
    """Mean per-pair masked L1 of (depth, rgb) between warped view 1 and view 2.

    ``generator`` provides ``sample_codes(n, rng)`` and ``render(codes, theta)``
    returning ``(rgb, depth)``; both the dual-path generator and the toy-scene
    source satisfy it. Depth differences are divided by ``far - near``.
    Returns ``(rp, rc)``.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be positive")
    lo, hi = theta_range
    rp, rc = [], []
    done = 0
    while done < n_pairs:
        n = min(batch_size, n_pairs - done)
        codes = generator.sample_codes(n, rng)
        t1 = lo + (hi - lo) * torch.rand(n, generator=rng, dtype=torch.float64)
        t2 = lo + (hi - lo) * torch.rand(n, generator=rng, dtype=torch.float64)
        rgb1, d1 = generator.render(codes, t1)
        rgb2, d2 = generator.render(codes, t2)
        dtype = d1.dtype
        spec = RotationSpec(t1.to(dtype), t2.to(dtype), pivot=None if pivot is None else torch.as_tensor(pivot, dtype=dtype))
        warped = backward_warp(rgb1, d1, d2, k, spec)
        scale = far - near
        rp.append(_per_sample_masked_l1(warped.depth / scale, d2 / scale, warped.mask))
        rc.append(_per_sample_masked_l1(warped.rgb, rgb2, warped.mask))
        done += n
    return float(torch.cat(rp).mean()), float(torch.cat(rc).mean())


def rotation_precision(generator, k, n_pairs, rng, theta_range, near, far, pivot=None) -> float:
    return rotation_metrics(generator, k, n_pairs, rng, theta_range, near, far, pivot)[0]


def rotation_consistency(generator, k, n_pairs, rng, theta_range, near, far, pivot=None) -> float:
    return rotation_metrics(generator, k, n_pairs, rng, theta_range, near, far, pivot)[1]


@torch.no_grad()
def depth_prediction_metrics(discriminator, real_set, fake_set, near: float, far: float, batch_size: int = 32):
    """Mean depth cross-entropy on real pairs and on generated pairs.

    Each set is ``(rgb (N,3,H,W), depth (N,1,H,W))``. For fakes the target is
    the generated depth itself.
    """
    out = []
    k = discriminator.cfg.depth_classes
    size = discriminator.branch_resolution
    for name, (rgb, depth) in (("real", real_set), ("fake", fake_set)):
        if rgb.shape[0] == 0:
            raise ValueError(f"{name} set is empty")
        total, count = 0.0, 0
        for i in range(0, rgb.shape[0], batch_size):
            r = rgb[i : i + batch_size]
            target = quantize_depth(downsample_depth(depth[i : i + batch_size], size), k, near, far)[:, 0]
            total += float(depth_ce(discriminator.predict_depth(r), target)) * r.shape[0]
            count += r.shape[0]
        out.append(total / count)
    return out[0], out[1]


# ---------------------------------------------------------------------- Fréchet distance


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ValueError(f"covariance {self.cov.shape} does not match mean of length {d}")
        if not np.allclose(self.cov, self.cov.T, atol=1e-8):
            raise ValueError("covariance must be symmetric")


def _sym_sqrt(mat, tol):
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    if vals.min() < -tol * max(1.0, abs(vals).max()):
        raise np.linalg.LinAlgError(f"matrix is not positive semidefinite (eigenvalue {vals.min():.3g})")
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats, tol: float = 1e-8) -> float:
    """``|μa-μb|² + tr(Σa + Σb - 2 (Σa Σb)^½)``.

    ``tr (Σa Σb)^½`` is taken as ``tr (Σa^½ Σb Σa^½)^½``, whose argument is
    symmetric, so both roots come from symmetric eigendecompositions. Small
    negative eigenvalues from round-off are clamped to zero.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"dimension mismatch: {a.mean.shape[0]} vs {b.mean.shape[0]}")
    try:
        root_a = _sym_sqrt(a.cov, 1e-6)
        inner = root_a @ b.cov @ root_a
        vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    except np.linalg.LinAlgError as exc:
        raise FloatingPointError(f"eigendecomposition failed: {exc}") from exc
    vals = np.where(vals < 0, np.where(vals > -tol * max(1.0, abs(vals).max()), 0.0, vals), vals)
    if vals.min() < 0:
        raise FloatingPointError("covariance product has a significantly negative eigenvalue")
    diff = a.mean - b.mean
    value = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.sqrt(vals).sum()
    return float(max(value, 0.0))


def embedding_stats(images, embedder: Callable) -> GaussianStats:
    """Sample mean and (n-1)-normalized covariance of ``embedder(images)``."""
    feats = embedder(images)
    feats = feats.detach().cpu().numpy() if torch.is_tensor(feats) else np.asarray(feats)
    feats = feats.reshape(feats.shape[0], -1).astype(np.float64)
    if feats.shape[0] < 2:
        raise ValueError("need at least two samples for a covariance")
    return GaussianStats(feats.mean(axis=0), np.cov(feats, rowvar=False, ddof=1).reshape(feats.shape[1], feats.shape[1]))


def downsample_embedder(size: int = 4) -> Callable:
    """Flattened area-downsampled pixels as features."""

    def embed(images):
        x = torch.as_tensor(images)
        return F.adaptive_avg_pool2d(x.float(), size).flatten(1)

    return embed


class RandomConvEmbedder(nn.Module):
    """Fixed-seed random convolutional features; for regression tracking only."""

    def __init__(self, in_channels: int = 3, dim: int = 32, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        widths = [in_channels, 16, 32, dim]
        self.weights = [torch.randn(o, i, 3, 3, generator=g) / math.sqrt(i * 9) for i, o in zip(widths[:-1], widths[1:])]

    @torch.no_grad()
    def forward(self, images):
        x = torch.as_tensor(images).float()
        for w in self.weights:
            x = F.leaky_relu(F.conv2d(x, w, padding=1, stride=2), 0.2)
        return x.mean(dim=(2, 3))


# ---------------------------------------------------------------------- visual outputs


def _to_uint8_rgb(rgb):
    arr = rgb.detach().cpu().permute(1, 2, 0).numpy() if torch.is_tensor(rgb) else np.asarray(rgb)
    return np.clip(np.rint((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)


def _to_uint8_depth(depth, near, far):
    arr = depth.detach().cpu().numpy().reshape(depth.shape[-2:]) if torch.is_tensor(depth) else np.asarray(depth)
    arr = np.clip((arr - near) / (far - near), 0, 1)
    gray = np.rint((1.0 - arr) * 255).astype(np.uint8)  # near is bright
    return np.repeat(gray[..., None], 3, axis=-1)


def _grid(columns, labels=None, label_height=12):
    """``columns`` is a list of lists of HxWx3 uint8 tiles (one list per column)."""
    h, w = columns[0][0].shape[:2]
    rows = len(columns[0])
    top = label_height if labels else 0
    canvas = np.full((top + rows * h, len(columns) * w, 3), 255, dtype=np.uint8)
    for c, tiles in enumerate(columns):
        for r, tile in enumerate(tiles):
            canvas[top + r * h : top + (r + 1) * h, c * w : (c + 1) * w] = tile
    img = Image.fromarray(canvas)
    if labels:
        draw = ImageDraw.Draw(img)
        for c, text in enumerate(labels):
            draw.text((c * w + 2, 0), text, fill=(0, 0, 0))
    return img


@torch.no_grad()
def rotation_sweep(generator, z_d, z_rgb, angles_deg: Sequence[float], path=None, theta_range_deg=(-15.0, 15.0)):
    """Render fixed codes at each angle; one column per angle (RGB over depth).

    Angles outside ``theta_range_deg`` are rendered anyway with a warning.
    Returns the grid as a PIL image (also written to ``path`` if given).
    """
    cfg = generator.cfg
    lo, hi = theta_range_deg
    outside = [a for a in angles_deg if a < lo or a > hi]
    if outside:
        logger.warning("rotation_sweep: extrapolating to angles %s outside [%g, %g] degrees", outside, lo, hi)
    z_d = torch.as_tensor(z_d).reshape(1, -1)
    z_rgb = torch.as_tensor(z_rgb).reshape(1, -1)
    columns = []
    for a in angles_deg:
        theta = torch.tensor([math.radians(a)], dtype=z_d.dtype)
        rgb, depth = generator(z_d, z_rgb, theta)
        columns.append([_to_uint8_rgb(rgb[0]), _to_uint8_depth(depth[0], cfg.near, cfg.far)])
    img = _grid(columns, [f"{a:g}°" for a in angles_deg])
    if path is not None:
        img.save(path)
    return img


@torch.no_grad()
def interpolate(generator, z_a, z_b, which: str, other, theta: float, steps: int, path=None, space: str = "z"):
    """Linear interpolation of one latent with the other code and the angle fixed.

    ``which`` is ``"depth"`` or ``"appearance"``. Each step is generated on
    its own so the endpoints match single-sample generation bitwise.
    Returns a ``(steps, 4, H, W)`` RGBD tensor.
    """
    if steps < 2:
        raise ValueError("steps must be >= 2")
    if which not in ("depth", "appearance"):
        raise ValueError(f"which must be 'depth' or 'appearance', got {which!r}")
    if space not in ("z", "w"):
        raise ValueError(f"space must be 'z' or 'w', got {space!r}")
    cfg = generator.cfg
    z_a = torch.as_tensor(z_a).reshape(1, -1)
    z_b = torch.as_tensor(z_b).reshape(1, -1)
    other = torch.as_tensor(other).reshape(1, -1)
    th = torch.tensor([theta], dtype=z_a.dtype)
    frames = []
    for i in range(steps):
        alpha = i / (steps - 1)
        if space == "z":
            z = (1.0 - alpha) * z_a + alpha * z_b
            z_d, z_rgb = (z, other) if which == "depth" else (other, z)
            rgb, depth = generator(z_d, z_rgb, th)
        else:
            rgb, depth = _generate_w_interp(generator, z_a, z_b, alpha, which, other, th)
        frames.append(torch.cat([rgb, depth], dim=1))
    out = torch.cat(frames)
    if path is not None:
        cols = [[_to_uint8_rgb(f[:3]), _to_uint8_depth(f[3], cfg.near, cfg.far)] for f in out]
        _grid(cols).save(path)
    return out


def _generate_w_interp(generator, z_a, z_b, alpha, which, other, theta):
    if which == "depth":
        mapping = generator.depth.mapping
        w = (1.0 - alpha) * mapping(z_a) + alpha * mapping(z_b)
        gamma = generator.depth.angle_encoder(theta)
        depth, psi = generator.depth.synthesize(w, w * gamma)
        rgb = generator.rgb(other, psi)
    else:
        depth, psi = generator.depth(other, theta)
        mapping = generator.rgb.mapping
        w = (1.0 - alpha) * mapping(z_a) + alpha * mapping(z_b)
        rgb = generator.rgb.synthesize(w, psi)
    return rgb, depth


def export_pointcloud(rgb, depth, k: CameraIntrinsics, path) -> int:
    """Write one colored vertex per pixel as ASCII PLY; returns the vertex count.

    ``rgb`` is (3, H, W) or (H, W, 3) in [-1, 1]; ``depth`` is (H, W) or (1, H, W).
    """
    depth = torch.as_tensor(np.asarray(depth) if not torch.is_tensor(depth) else depth).double()
    depth = depth.reshape(depth.shape[-2:])
    rgb = torch.as_tensor(np.asarray(rgb) if not torch.is_tensor(rgb) else rgb).double()
    if rgb.shape[0] == 3 and rgb.shape[-1] != 3:
        rgb = rgb.permute(1, 2, 0)
    if rgb.shape[:2] != depth.shape:
        raise ValueError(f"rgb {tuple(rgb.shape)} and depth {tuple(depth.shape)} disagree")
    pts = unproject(depth, k).numpy()
    colors = (rgb.reshape(-1, 3).numpy() + 1.0) * 127.5
    io.write_ply(path, pts, colors)
    return pts.shape[0]
