"""Dual-path generator: an angle-aware depth path and a depth-conditioned appearance path."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn

from .layers import EqualConv2d, EqualLinear, ModulatedConv2d, StyledLayer, lrelu

__all__ = [
    "GeneratorConfig",
    "LatentPair",
    "angle_features",
    "AngleEncoder",
    "MappingNetwork",
    "inject_angle",
    "FeatureFusion",
    "SynthesisNetwork",
    "DepthGenerator",
    "AppearanceRenderer",
    "DualPathGenerator",
]


@dataclass
class GeneratorConfig:
    latent_dim: int = 128
    mapping_layers: int = 2
    angle_frequencies: int = 4
    resolution: int = 64
    channel_base: int = 1024
    channel_max: int = 64
    near: float = 0.5
    far: float = 10.0
    theta_min_deg: float = -15.0
    theta_max_deg: float = 15.0

    def __post_init__(self):
        r = self.resolution
        if r < 8 or r & (r - 1):
            raise ValueError(f"resolution must be a power of two >= 8, got {r}")
        if self.angle_frequencies < 1:
            raise ValueError(f"angle_frequencies must be >= 1, got {self.angle_frequencies}")
        if not 0 < self.near < self.far:
            raise ValueError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        if self.theta_min_deg > self.theta_max_deg:
            raise ValueError("theta_min_deg must not exceed theta_max_deg")

    def channels(self, res: int) -> int:
        return max(1, min(self.channel_max, self.channel_base // res))

    @property
    def resolutions(self) -> List[int]:
        return [4 * 2**i for i in range(int(math.log2(self.resolution // 4)) + 1)]

    @property
    def theta_range(self) -> Tuple[float, float]:
        return math.radians(self.theta_min_deg), math.radians(self.theta_max_deg)


@dataclass
class LatentPair:
    """Batched generator input: ``z_d``, ``z_rgb`` of shape (B, m) and ``theta`` (B,) radians."""

    z_d: torch.Tensor
    z_rgb: torch.Tensor
    theta: torch.Tensor

    @classmethod
    def sample(cls, n: int, cfg: GeneratorConfig, generator: Optional[torch.Generator] = None, dtype=torch.float32):
        z_d = torch.randn(n, cfg.latent_dim, generator=generator, dtype=dtype)
        z_rgb = torch.randn(n, cfg.latent_dim, generator=generator, dtype=dtype)
        lo, hi = cfg.theta_range
        theta = lo + (hi - lo) * torch.rand(n, generator=generator, dtype=dtype)
        return cls(z_d, z_rgb, theta)

    def validate(self, cfg: GeneratorConfig, tol: float = 1e-6):
        for name in ("z_d", "z_rgb"):
            z = getattr(self, name)
            if z.ndim != 2 or z.shape[1] != cfg.latent_dim:
                raise ValueError(f"{name} must have shape (B, {cfg.latent_dim}), got {tuple(z.shape)}")
        lo, hi = cfg.theta_range
        if self.theta.numel() and (self.theta.min() < lo - tol or self.theta.max() > hi + tol):
            raise ValueError(f"theta outside the configured range [{lo:.4f}, {hi:.4f}] rad")


def angle_features(theta: torch.Tensor, t: int) -> torch.Tensor:
    """``(sin θ, cos θ, sin 2θ, cos 2θ, ..., sin tθ, cos tθ)`` for each angle."""
    if t < 1:
        raise ValueError(f"frequency count must be >= 1, got {t}")
    theta = torch.as_tensor(theta)
    freqs = torch.arange(1, t + 1, dtype=theta.dtype, device=theta.device)
    ang = theta[..., None] * freqs
    return torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1).flatten(-2)


class AngleEncoder(nn.Module):
    """Two fully connected layers lifting the sinusoidal features to ``m`` dims."""

    def __init__(self, t: int, dim: int):
        super().__init__()
        if t < 1:
            raise ValueError(f"frequency count must be >= 1, got {t}")
        self.t = t
        self.fc1 = EqualLinear(2 * t, dim, activation=True)
        self.fc2 = EqualLinear(dim, dim)

    def forward(self, theta):
        return self.fc2(self.fc1(angle_features(theta, self.t)))


class MappingNetwork(nn.Module):
    def __init__(self, dim: int, n_layers: int, lr_mul: float = 0.01):
        super().__init__()
        self.dim = dim
        self.layers = nn.ModuleList(
            EqualLinear(dim, dim, lr_mul=lr_mul, activation=True) for _ in range(n_layers)
        )

    def forward(self, z):
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise ValueError(f"latent must have shape (B, {self.dim}), got {tuple(z.shape)}")
        x = z * torch.rsqrt(z.pow(2).mean(dim=1, keepdim=True) + 1e-8)
        for layer in self.layers:
            x = layer(x)
        return x


def inject_angle(w: torch.Tensor, gamma: torch.Tensor) -> torch.Tensor:
    if w.shape != gamma.shape:
        raise ValueError(f"style {tuple(w.shape)} and angle code {tuple(gamma.shape)} differ")
    return w * gamma


class FeatureFusion(nn.Module):
    """Concatenate depth and appearance features, then two 3x3 convolutions."""

    def __init__(self, depth_ch: int, rgb_ch: int):
        super().__init__()
        self.conv1 = EqualConv2d(depth_ch + rgb_ch, rgb_ch, 3, activation=True)
        self.conv2 = EqualConv2d(rgb_ch, rgb_ch, 3)

    def forward(self, psi, phi):
        if psi.shape[-2:] != phi.shape[-2:] or psi.shape[0] != phi.shape[0]:
            raise ValueError(f"cannot fuse {tuple(psi.shape)} with {tuple(phi.shape)}")
        return self.conv2(self.conv1(torch.cat([psi, phi], dim=1)))


class SynthesisNetwork(nn.Module):
    """Constant 4x4 input, two styled convs per resolution, 1x1 modulated output.

    ``layers[0]`` runs at 4x4; each later resolution has an upsampling conv and
    a plain conv. Feature maps after the last conv of each resolution are the
    per-level features handed to (or fused from) the other path.
    """

    def __init__(self, cfg: GeneratorConfig, out_channels: int):
        super().__init__()
        self.cfg = cfg
        res = cfg.resolutions
        self.const = nn.Parameter(torch.randn(1, cfg.channels(4), 4, 4))
        layers = [StyledLayer(cfg.channels(4), cfg.channels(4), cfg.latent_dim, 4)]
        for r in res[1:]:
            layers.append(StyledLayer(cfg.channels(r // 2), cfg.channels(r), cfg.latent_dim, r, upsample=True))
            layers.append(StyledLayer(cfg.channels(r), cfg.channels(r), cfg.latent_dim, r))
        self.layers = nn.ModuleList(layers)
        self.to_out = ModulatedConv2d(cfg.channels(cfg.resolution), out_channels, 1, cfg.latent_dim, demodulate=False)
        self.out_bias = nn.Parameter(torch.zeros(out_channels))

    @property
    def num_styles(self) -> int:
        return len(self.layers) + 1

    def level_ends(self) -> Dict[int, int]:
        """Index of the layer that closes each resolution level."""
        ends = {4: 0}
        for i, r in enumerate(self.cfg.resolutions[1:]):
            ends[r] = 2 + 2 * i
        return ends

    def forward(self, styles, fusions=None, conditions=None, noise_mode="const", generator=None, feature_hook=None):
        """``styles`` holds one (B, m) style per layer plus one for the output conv.

        With ``fusions``/``conditions`` the features closing each level are
        replaced by ``fusions[str(res)](conditions[i], features)``.
        ``feature_hook(layer_index, x)`` may return a replacement for the
        input of that layer (used for probing).
        """
        if len(styles) != self.num_styles:
            raise ValueError(f"expected {self.num_styles} styles, got {len(styles)}")
        b = styles[0].shape[0]
        x = self.const.expand(b, -1, -1, -1).to(styles[0].dtype)
        ends = {v: k for k, v in self.level_ends().items()}
        features = []
        level = 0
        for i, layer in enumerate(self.layers):
            if feature_hook is not None:
                x = feature_hook(i, x)
            x = layer(x, styles[i], noise_mode=noise_mode, generator=generator)
            if i in ends:
                if fusions is not None:
                    cond = conditions[level]
                    if cond.shape[-1] != x.shape[-1]:
                        raise ValueError(
                            f"condition at level {level} is {cond.shape[-1]}px, features are {x.shape[-1]}px"
                        )
                    x = fusions[str(ends[i])](cond, x)
                features.append(x)
                level += 1
        out = self.to_out(x, styles[-1]) + self.out_bias[None, :, None, None]
        return out, features


class DepthGenerator(nn.Module):
    """Depth path: mapping, angle encoding and one-channel synthesis."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.mapping = MappingNetwork(cfg.latent_dim, cfg.mapping_layers)
        self.angle_encoder = AngleEncoder(cfg.angle_frequencies, cfg.latent_dim)
        self.synthesis = SynthesisNetwork(cfg, 1)

    def styles(self, w, w_prime):
        # only the first two styled convolutions see the angle
        n = self.synthesis.num_styles
        return [w_prime if i < 2 else w for i in range(n)]

    def synthesize(self, w, w_prime, noise_mode="const", generator=None, feature_hook=None):
        raw, psi = self.synthesis(
            self.styles(w, w_prime), noise_mode=noise_mode, generator=generator, feature_hook=feature_hook
        )
        depth = self.cfg.near + (self.cfg.far - self.cfg.near) * torch.sigmoid(raw)
        return depth, psi

    def forward(self, z_d, theta, noise_mode="const", generator=None):
        w = self.mapping(z_d)
        gamma = self.angle_encoder(theta.to(w.dtype))
        return self.synthesize(w, inject_angle(w, gamma), noise_mode, generator)


class AppearanceRenderer(nn.Module):
    """RGB path conditioned on every level of the depth path's features."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.mapping = MappingNetwork(cfg.latent_dim, cfg.mapping_layers)
        self.synthesis = SynthesisNetwork(cfg, 3)
        self.fusions = nn.ModuleDict(
            {str(r): FeatureFusion(cfg.channels(r), cfg.channels(r)) for r in cfg.resolutions}
        )

    def synthesize(self, w_rgb, psi, noise_mode="const", generator=None):
        if len(psi) != len(self.cfg.resolutions):
            raise ValueError(f"expected {len(self.cfg.resolutions)} condition maps, got {len(psi)}")
        styles = [w_rgb] * self.synthesis.num_styles
        raw, _ = self.synthesis(styles, self.fusions, psi, noise_mode=noise_mode, generator=generator)
        return torch.tanh(raw)

    def forward(self, z_rgb, psi, noise_mode="const", generator=None):
        return self.synthesize(self.mapping(z_rgb), psi, noise_mode, generator)


class DualPathGenerator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.depth = DepthGenerator(cfg)
        self.rgb = AppearanceRenderer(cfg)

    def forward(self, z_d, z_rgb, theta, noise_mode="const", generator=None):
        """Returns ``(rgb (B,3,H,W) in [-1,1], depth (B,1,H,W) in [near, far])``."""
        depth, psi = self.depth(z_d, theta, noise_mode, generator)
        rgb = self.rgb(z_rgb, psi, noise_mode, generator)
        return rgb, depth

    def generate(self, pair: LatentPair, noise_mode="const", generator=None) -> torch.Tensor:
        """RGBD batch ``(B, 4, H, W)`` for a validated :class:`LatentPair`."""
        pair.validate(self.cfg)
        rgb, depth = self(pair.z_d, pair.z_rgb, pair.theta, noise_mode, generator)
        return torch.cat([rgb, depth], dim=1)

    # metric protocol shared with the toy renderer
    def sample_codes(self, n, generator):
        z_d = torch.randn(n, self.cfg.latent_dim, generator=generator)
        z_rgb = torch.randn(n, self.cfg.latent_dim, generator=generator)
        return z_d, z_rgb

    def render(self, codes, theta):
        z_d, z_rgb = codes
        theta = torch.as_tensor(theta, dtype=z_d.dtype).expand(z_d.shape[0])
        return self(z_d, z_rgb, theta)
