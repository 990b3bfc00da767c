"""Pinhole camera geometry and backward RGBD warping about a vertical axis.

Conventions: the camera looks down +z with x to the right and y pointing
down. Pixel ``(u, v)`` is column ``u`` and row ``v``; ``depth[..., v, u]`` is
the distance along the optical axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import torch
import torch.nn.functional as F

__all__ = [
    "CameraIntrinsics",
    "RotationSpec",
    "WarpResult",
    "intrinsics_from_focal",
    "unproject",
    "rotation_y",
    "central_axis_transform",
    "default_pivot",
    "bilinear_sample",
    "backward_warp",
]

Scalar = Union[float, torch.Tensor]

# Slack allowed on the in-bounds test so that exact reprojections of border
# pixels are not lost to float round-off.
_BOUNDS_TOL = 1e-4
_MIN_Z = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside a "
                f"{self.width}x{self.height} image"
            )

    def matrix(self, dtype=torch.float64) -> torch.Tensor:
        return torch.tensor(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]], dtype=dtype
        )

    def scaled(self, width: int, height: int) -> "CameraIntrinsics":
        """Same field of view at another image size."""
        sx = width / self.width
        sy = height / self.height
        return CameraIntrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)


@dataclass
class RotationSpec:
    """Rotation of the scene about a vertical axis through ``pivot``.

    ``theta1``/``theta2`` are radians, either floats or per-sample tensors of
    shape ``(B,)``. ``pivot`` is a 3-vector or ``(B, 3)``; ``None`` means
    "derive from the source depth" (see :func:`default_pivot`).
    """

    theta1: Scalar
    theta2: Scalar
    pivot: Optional[torch.Tensor] = None
    axis: tuple = (0.0, 1.0, 0.0)

    def __post_init__(self):
        norm = math.sqrt(sum(a * a for a in self.axis))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"rotation axis must have unit norm, got {self.axis}")
        if tuple(float(a) for a in self.axis) != (0.0, 1.0, 0.0):
            raise ValueError("only the vertical camera axis (0, 1, 0) is supported")


@dataclass
class WarpResult:
    rgb: torch.Tensor
    depth: torch.Tensor
    mask: torch.Tensor


def intrinsics_from_focal(
    focal_mm: float, sensor_width_mm: float, width: int, height: int
) -> CameraIntrinsics:
    """Pinhole intrinsics for a lens of ``focal_mm`` on a sensor ``sensor_width_mm`` wide."""
    for name, value in (
        ("focal_mm", focal_mm),
        ("sensor_width_mm", sensor_width_mm),
        ("width", width),
        ("height", height),
    ):
        if not value > 0:
            raise ValueError(f"{name} must be positive, got {value}")
    f = focal_mm / sensor_width_mm * width
    return CameraIntrinsics(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0, width=int(width), height=int(height))


def _pixel_grid(height, width, dtype, device):
    v, u = torch.meshgrid(
        torch.arange(height, dtype=dtype, device=device),
        torch.arange(width, dtype=dtype, device=device),
        indexing="ij",
    )
    return u, v


def _check_size(depth: torch.Tensor, k: CameraIntrinsics, what="depth"):
    if depth.shape[-2:] != (k.height, k.width):
        raise ValueError(
            f"{what} is {tuple(depth.shape[-2:])} but intrinsics describe "
            f"{k.height}x{k.width}"
        )


def unproject(depth: torch.Tensor, k: CameraIntrinsics) -> torch.Tensor:
    """Lift a depth map ``(..., H, W)`` to camera-frame points ``(..., H*W, 3)``."""
    _check_size(depth, k)
    u, v = _pixel_grid(k.height, k.width, depth.dtype, depth.device)
    x = (u - k.cx) * depth / k.fx
    y = (v - k.cy) * depth / k.fy
    pts = torch.stack([x, y, depth], dim=-1)
    return pts.reshape(*depth.shape[:-2], k.height * k.width, 3)


def rotation_y(angle: Scalar, dtype=torch.float64) -> torch.Tensor:
    """Right-handed rotation about +y; batched if ``angle`` has shape ``(B,)``."""
    a = torch.as_tensor(angle, dtype=dtype)
    c, s = torch.cos(a), torch.sin(a)
    zero, one = torch.zeros_like(a), torch.ones_like(a)
    rows = [
        torch.stack([c, zero, s], dim=-1),
        torch.stack([zero, one, zero], dim=-1),
        torch.stack([-s, zero, c], dim=-1),
    ]
    return torch.stack(rows, dim=-2)


def central_axis_transform(spec: RotationSpec, dtype=torch.float64):
    """Rigid map from the ``theta1`` frame to the ``theta2`` frame.

    Returns ``(R, t)`` such that ``p2 = R @ p1 + t``, i.e.
    ``R_y(theta2 - theta1) (p1 - pivot) + pivot``.
    """
    if spec.pivot is None:
        raise ValueError("central_axis_transform needs an explicit pivot")
    delta = torch.as_tensor(spec.theta2, dtype=dtype) - torch.as_tensor(spec.theta1, dtype=dtype)
    rot = rotation_y(delta, dtype=dtype)
    pivot = torch.as_tensor(spec.pivot, dtype=dtype)
    t = pivot - (rot @ pivot.unsqueeze(-1)).squeeze(-1)
    return rot, t


def default_pivot(depth: torch.Tensor) -> torch.Tensor:
    """Pivot ``(0, 0, mean depth)`` per sample for a ``(B, 1, H, W)`` depth batch."""
    zc = depth.reshape(depth.shape[0], -1).mean(dim=1)
    zeros = torch.zeros_like(zc)
    return torch.stack([zeros, zeros, zc], dim=-1)


def bilinear_sample(image: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Sample ``image`` (B, C, H, W) at continuous pixel coordinates ``u, v`` (B, H', W').

    Coordinates are clamped to the image; callers mask out-of-range pixels.
    """
    _, _, h, w = image.shape
    u = u.clamp(0, w - 1)
    v = v.clamp(0, h - 1)
    gx = 2.0 * u / max(w - 1, 1) - 1.0
    gy = 2.0 * v / max(h - 1, 1) - 1.0
    grid = torch.stack([gx, gy], dim=-1).to(image.dtype)
    return F.grid_sample(image, grid, mode="bilinear", padding_mode="border", align_corners=True)


def _per_sample(value, batch, dtype, device):
    t = torch.as_tensor(value, dtype=dtype, device=device)
    if t.ndim == 0:
        t = t.expand(batch)
    return t


def backward_warp(
    src_rgb: torch.Tensor,
    src_depth: torch.Tensor,
    tgt_depth: torch.Tensor,
    k: CameraIntrinsics,
    spec: RotationSpec,
) -> WarpResult:
    """Warp the view rendered at ``spec.theta1`` into the view at ``spec.theta2``.

    Every target pixel is lifted with ``tgt_depth``, moved into the source
    frame by the central-axis rotation, and reprojected. Source RGB is
    sampled bilinearly there. The warped depth is the sampled source surface
    point expressed in the target frame, so it equals ``tgt_depth`` exactly
    when both views agree on the geometry.

    Shapes: ``src_rgb`` (B, C, H, W); depths (B, 1, H, W).
    """
    if src_rgb.ndim != 4 or src_depth.ndim != 4 or tgt_depth.ndim != 4:
        raise ValueError("expected 4-D (B, C, H, W) tensors")
    b = src_rgb.shape[0]
    for name, t in (("src_rgb", src_rgb), ("src_depth", src_depth), ("tgt_depth", tgt_depth)):
        _check_size(t, k, name)
        if t.shape[0] != b:
            raise ValueError(f"{name} has batch {t.shape[0]}, expected {b}")
    if src_depth.shape[1] != 1 or tgt_depth.shape[1] != 1:
        raise ValueError("depth tensors must have a single channel")

    dtype, device = tgt_depth.dtype, tgt_depth.device
    pivot = spec.pivot
    if pivot is None:
        pivot = default_pivot(src_depth.detach())
    pivot = torch.as_tensor(pivot, dtype=dtype, device=device)
    if pivot.ndim == 1:
        pivot = pivot.expand(b, 3)
    theta1 = _per_sample(spec.theta1, b, dtype, device)
    theta2 = _per_sample(spec.theta2, b, dtype, device)

    # target (theta2) frame -> source (theta1) frame
    rot_ts = rotation_y(theta1 - theta2, dtype=dtype).to(device)
    pts = unproject(tgt_depth[:, 0], k)  # (B, HW, 3)
    piv = pivot[:, None, :]
    src_pts = (pts - piv) @ rot_ts.transpose(1, 2) + piv
    z = src_pts[..., 2]
    valid_z = z > _MIN_Z
    z_safe = torch.where(valid_z, z, torch.ones_like(z))
    u = k.fx * src_pts[..., 0] / z_safe + k.cx
    v = k.fy * src_pts[..., 1] / z_safe + k.cy
    inside = (
        valid_z
        & (u >= -_BOUNDS_TOL)
        & (u <= k.width - 1 + _BOUNDS_TOL)
        & (v >= -_BOUNDS_TOL)
        & (v <= k.height - 1 + _BOUNDS_TOL)
    )
    shape = (b, k.height, k.width)
    u = torch.where(inside, u, torch.zeros_like(u)).reshape(shape)
    v = torch.where(inside, v, torch.zeros_like(v)).reshape(shape)
    mask = inside.reshape(b, 1, k.height, k.width).to(dtype)

    rgb = bilinear_sample(src_rgb, u, v) * mask

    # source surface point at (u, v), carried back into the target frame
    s = bilinear_sample(src_depth, u, v)[:, 0]
    uc = u.clamp(0, k.width - 1)
    vc = v.clamp(0, k.height - 1)
    q = torch.stack([(uc - k.cx) * s / k.fx, (vc - k.cy) * s / k.fy, s], dim=-1)
    q = q.reshape(b, -1, 3)
    rot_st = rot_ts.transpose(1, 2)
    q_t = (q - piv) @ rot_st.transpose(1, 2) + piv
    depth = q_t[..., 2].reshape(b, 1, k.height, k.width) * mask
    return WarpResult(rgb=rgb, depth=depth, mask=mask)
