"""Equalized-learning-rate building blocks shared by the generator and discriminator."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

_LRELU_GAIN = math.sqrt(2.0)


def lrelu(x: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(x, 0.2) * _LRELU_GAIN


class EqualLinear(nn.Module):
    def __init__(self, in_dim, out_dim, bias=True, bias_init=0.0, lr_mul=1.0, activation=False):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_dim, in_dim) / lr_mul)
        self.bias = nn.Parameter(torch.full((out_dim,), float(bias_init))) if bias else None
        self.scale = lr_mul / math.sqrt(in_dim)
        self.lr_mul = lr_mul
        self.activation = activation

    def forward(self, x):
        b = self.bias * self.lr_mul if self.bias is not None else None
        out = F.linear(x, self.weight * self.scale, b)
        return lrelu(out) if self.activation else out


class EqualConv2d(nn.Module):
    def __init__(self, in_ch, out_ch, kernel_size, bias=True, activation=False):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_ch)) if bias else None
        self.scale = 1.0 / math.sqrt(in_ch * kernel_size**2)
        self.padding = kernel_size // 2
        self.activation = activation

    def forward(self, x):
        out = F.conv2d(x, self.weight * self.scale, self.bias, padding=self.padding)
        return lrelu(out) if self.activation else out


class ModulatedConv2d(nn.Module):
    """Style-modulated convolution with optional demodulation.

    Modulation is applied to the input activations and demodulation to the
    output, which is algebraically the same as scaling the weights per sample
    but runs as one ordinary convolution for the whole batch.
    """

    def __init__(self, in_ch, out_ch, kernel_size, style_dim, demodulate=True, upsample=False):
        super().__init__()
        self.affine = EqualLinear(style_dim, in_ch, bias_init=1.0)
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel_size, kernel_size))
        self.scale = 1.0 / math.sqrt(in_ch * kernel_size**2)
        self.padding = kernel_size // 2
        self.demodulate = demodulate
        self.upsample = upsample

    def forward(self, x, w):
        s = self.affine(w)
        weight = self.weight * self.scale
        x = x * s[:, :, None, None]
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        out = F.conv2d(x, weight, padding=self.padding)
        if self.demodulate:
            wsq = weight.pow(2).sum(dim=(2, 3))  # (out, in)
            d = torch.rsqrt(s.pow(2) @ wsq.t() + 1e-8)  # (B, out)
            out = out * d[:, :, None, None]
        return out


class StyledLayer(nn.Module):
    """Modulated conv, per-pixel noise, bias and activation."""

    def __init__(self, in_ch, out_ch, style_dim, resolution, upsample=False):
        super().__init__()
        self.conv = ModulatedConv2d(in_ch, out_ch, 3, style_dim, upsample=upsample)
        self.noise_strength = nn.Parameter(torch.zeros(()))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.register_buffer("noise_const", torch.randn(1, 1, resolution, resolution))
        self.resolution = resolution

    def forward(self, x, w, noise_mode="const", generator=None):
        x = self.conv(x, w)
        if noise_mode == "const":
            noise = self.noise_const
        elif noise_mode == "random":
            noise = torch.randn(
                x.shape[0], 1, self.resolution, self.resolution,
                generator=generator, dtype=x.dtype, device=x.device,
            )
        elif noise_mode == "none":
            noise = None
        else:
            raise ValueError(f"unknown noise_mode {noise_mode!r}")
        if noise is not None:
            x = x + noise.to(x.dtype) * self.noise_strength
        return lrelu(x + self.bias[None, :, None, None])
