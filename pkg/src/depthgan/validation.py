"""Input checks shared by the estimator facade and the CLI."""

from __future__ import annotations

import numpy as np
import torch


def as_nhwc(X, channels: int, name: str = "X") -> np.ndarray:
    """Return ``X`` as a float64 (N, H, W, C) array, accepting a single HWC image."""
    arr = X.detach().cpu().numpy() if torch.is_tensor(X) else np.asarray(X)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != channels:
        raise ValueError(f"{name} must have shape (N, H, W, {channels}), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if arr.shape[1] != arr.shape[2]:
        raise ValueError(f"{name} images must be square, got {arr.shape[1]}x{arr.shape[2]}")
    arr = arr.astype(np.float64, copy=False)
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains NaN or infinite values")
    return arr


def check_rgb(X, resolution: int = None) -> np.ndarray:
    arr = as_nhwc(X, 3, "rgb")
    if arr.min() < -1.0 - 1e-6 or arr.max() > 1.0 + 1e-6:
        raise ValueError(f"rgb values must lie in [-1, 1], got [{arr.min():.3g}, {arr.max():.3g}]")
    if resolution is not None and arr.shape[1] != resolution:
        raise ValueError(f"expected {resolution}px images, got {arr.shape[1]}px")
    return arr


def check_rgbd(X, near: float, far: float, resolution: int = None) -> np.ndarray:
    arr = as_nhwc(X, 4, "rgbd")
    check_rgb(arr[..., :3], resolution)
    d = arr[..., 3]
    if d.min() < near - 1e-6 or d.max() > far + 1e-6:
        raise ValueError(f"depth must lie in [{near}, {far}], got [{d.min():.3g}, {d.max():.3g}]")
    return arr


def to_nchw(arr: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def to_nhwc(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().permute(0, 2, 3, 1).numpy()
