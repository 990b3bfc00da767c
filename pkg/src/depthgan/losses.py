"""Training objectives: adversarial terms, rotation consistency, depth classification, R1."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Tuple

import torch
import torch.nn.functional as F

from .camera import CameraIntrinsics, RotationSpec, backward_warp

logger = logging.getLogger(__name__)

__all__ = [
    "LossWeights",
    "adversarial_d",
    "adversarial_g",
    "masked_l1",
    "rotation_losses",
    "quantize_depth",
    "downsample_depth",
    "depth_ce",
    "r1_penalty",
    "totals",
    "clamp_events",
]

# number of depth pixels clamped by quantize_depth since import
clamp_events = {"count": 0}


@dataclass
class LossWeights:
    """``rot_depth``, ``rot_rgb``, ``fake_depth``, ``real_depth`` are λ1..λ4."""

    rot_depth: float = 50.0
    rot_rgb: float = 0.3
    fake_depth: float = 1e-3
    real_depth: float = 0.8
    r1: float = 0.3

    def __post_init__(self):
        for name, value in self.as_dict().items():
            if not value >= 0:
                raise ValueError(f"loss weight {name} must be nonnegative, got {value}")

    def as_dict(self) -> Dict[str, float]:
        return {
            "rot_depth": self.rot_depth,
            "rot_rgb": self.rot_rgb,
            "fake_depth": self.fake_depth,
            "real_depth": self.real_depth,
            "r1": self.r1,
        }

    @property
    def lambdas(self) -> Tuple[float, float, float, float]:
        return (self.rot_depth, self.rot_rgb, self.fake_depth, self.real_depth)


def _require_finite(name, *tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise FloatingPointError(f"{name}: non-finite input")


def adversarial_d(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """Discriminator loss ``-log σ(real) - log(1 - σ(fake))`` in logit form."""
    _require_finite("adversarial_d", real_logits, fake_logits)
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def adversarial_g(fake_logits: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss ``-log σ(fake)``."""
    _require_finite("adversarial_g", fake_logits)
    return F.softplus(-fake_logits).mean()


def masked_l1(a: torch.Tensor, b: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over valid pixels; 0 for an empty mask.

    ``a`` and ``b`` are (B, C, H, W); ``mask`` is (B, 1, H, W) and broadcast
    over channels.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if mask.shape[0] != a.shape[0] or mask.shape[-2:] != a.shape[-2:] or mask.shape[1] not in (1, a.shape[1]):
        raise ValueError(f"mask {tuple(mask.shape)} does not fit images {tuple(a.shape)}")
    channels = a.shape[1] if mask.shape[1] == 1 else 1
    denom = torch.clamp(mask.sum() * channels, min=1.0)
    return ((a - b).abs() * mask).sum() / denom


def rotation_losses(
    view1: Tuple[torch.Tensor, torch.Tensor],
    view2: Tuple[torch.Tensor, torch.Tensor],
    k: CameraIntrinsics,
    spec: RotationSpec,
    near: float,
    far: float,
):
    """Warp ``view1`` (rgb, depth) into the frame of ``view2`` and compare.

    Returns ``(depth_loss, rgb_loss, mask)``. Depth differences are divided by
    ``far - near`` so the depth term is in normalized units.
    """
    rgb1, depth1 = view1
    rgb2, depth2 = view2
    warped = backward_warp(rgb1, depth1, depth2, k, spec)
    scale = far - near
    loss_d = masked_l1(warped.depth / scale, depth2 / scale, warped.mask)
    loss_rgb = masked_l1(warped.rgb, rgb2, warped.mask)
    return loss_d, loss_rgb, warped.mask


def quantize_depth(depth: torch.Tensor, k: int, near: float, far: float) -> torch.Tensor:
    """Uniform depth bins: ``min(k-1, floor((d - near) / (far - near) * k))``.

    Out-of-range values are clamped and counted in ``clamp_events``.
    """
    if k < 2:
        raise ValueError(f"need at least two classes, got {k}")
    out_of_range = (depth < near) | (depth > far)
    n_bad = int(out_of_range.sum())
    if n_bad:
        clamp_events["count"] += n_bad
        logger.warning("quantize_depth: clamped %d depth values outside [%g, %g]", n_bad, near, far)
        depth = depth.clamp(near, far)
    cls = torch.floor((depth - near) / (far - near) * k).long()
    return cls.clamp(0, k - 1)


def downsample_depth(depth: torch.Tensor, size: int) -> torch.Tensor:
    """Area-average a (B, 1, H, W) depth map down to ``size`` x ``size``."""
    if depth.shape[-1] == size and depth.shape[-2] == size:
        return depth
    return F.adaptive_avg_pool2d(depth, size)


def depth_ce(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Pixel-wise cross-entropy between (B, k, h, w) logits and (B, h, w) classes."""
    if target.ndim == 4 and target.shape[1] == 1:
        target = target[:, 0]
    if logits.shape[0] != target.shape[0] or logits.shape[-2:] != target.shape[-2:]:
        raise ValueError(f"logits {tuple(logits.shape)} and targets {tuple(target.shape)} disagree")
    return F.cross_entropy(logits, target.long())


def r1_penalty(scores: torch.Tensor, inputs: torch.Tensor, weight: float) -> torch.Tensor:
    """``weight / 2 * E ||∇_x D(x)||²`` over a batch of real inputs.

    ``inputs`` must have ``requires_grad`` and ``scores`` must depend on it.
    A constant discriminator gives zero.
    """
    (grad,) = torch.autograd.grad(scores.sum(), inputs, create_graph=True, allow_unused=True)
    if grad is None:
        return scores.new_zeros(())
    sq = grad.pow(2).reshape(grad.shape[0], -1).sum(dim=1)
    return 0.5 * weight * sq.mean()


def totals(components: Dict[str, torch.Tensor], weights: LossWeights):
    """Combine component losses into ``(L_Gd, L_Grgb, L_D)``.

    Expected keys: ``g_adv``, ``rot_depth``, ``rot_rgb``, ``fake_depth``,
    ``d_adv``, ``real_depth``.
    """
    for name, value in components.items():
        v = torch.as_tensor(value)
        if not torch.isfinite(v).all():
            raise FloatingPointError(f"loss component {name} is not finite")
    c = components
    l_gd = c["g_adv"] + weights.rot_depth * c["rot_depth"]
    l_grgb = c["g_adv"] + weights.rot_rgb * c["rot_rgb"] + weights.fake_depth * c["fake_depth"]
    l_d = c["d_adv"] + weights.real_depth * c["real_depth"]
    return l_gd, l_grgb, l_d
