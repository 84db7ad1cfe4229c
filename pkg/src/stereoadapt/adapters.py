"""Spatial (bottleneck MLP) and stereo (cross-view temperature attention) adapters."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidConfig, InvalidInput, InvalidShape


def temperature_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, tau: float) -> torch.Tensor:
    """softmax(tau * q k^T / sqrt(C)) v over the key axis.

    Works on any leading batch dims: q (..., Nq, C), k (..., Nk, C), v (..., Nk, Cv).
    """
    if not tau > 0:
        raise InvalidConfig(f"temperature must be positive, got {tau!r}")
    if q.shape[-1] != k.shape[-1]:
        raise InvalidShape(f"query/key channel mismatch: {q.shape[-1]} vs {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise InvalidShape(f"key/value row mismatch: {k.shape[-2]} vs {v.shape[-2]}")
    if not (torch.isfinite(q).all() and torch.isfinite(k).all() and torch.isfinite(v).all()):
        raise InvalidInput("temperature_attention got non-finite input")
    logits = (tau / math.sqrt(q.shape[-1])) * (q @ k.transpose(-2, -1))
    logits = logits - logits.amax(dim=-1, keepdim=True).detach()
    weights = logits.exp()
    weights = weights / weights.sum(dim=-1, keepdim=True)
    return weights @ v


class SpatialAdapter(nn.Module):
    """Bottleneck MLP ``up(GELU(down(x)))``; returns the branch only, the caller adds the residual.

    ``up_proj`` starts at exactly zero so a fresh adapter is a no-op.
    """

    def __init__(self, dim: int, bottleneck: int):
        super().__init__()
        if not 0 < bottleneck < dim:
            raise InvalidConfig(f"spatial adapter bottleneck must satisfy 0 < d < {dim}, got {bottleneck}")
        self.dim = dim
        self.bottleneck = bottleneck
        self.down_proj = nn.Linear(dim, bottleneck)
        self.up_proj = nn.Linear(bottleneck, dim)
        nn.init.zeros_(self.up_proj.weight)
        nn.init.zeros_(self.up_proj.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.dim:
            raise InvalidShape(f"spatial adapter expects last dim {self.dim}, got {x.shape[-1]}")
        return self.up_proj(F.gelu(self.down_proj(x)))


class StereoAdapter(nn.Module):
    """Cross-view attention between left and right feature maps.

    Each view is layer-normed, projected to queries/keys with its own ``w1`` and
    to values with its own ``w2`` (unnormalized input). Left queries attend over
    right keys/values and vice versa, along each image row by default
    (rectified pairs have horizontal disparity only). The fused features are
    scaled by ``gamma_left``/``gamma_right`` (zero at init) and added back.
    """

    def __init__(self, channels: int, tau: float = 1.0, attention: str = "row"):
        super().__init__()
        if not tau > 0:
            raise InvalidConfig(f"stereo adapter temperature must be positive, got {tau!r}")
        if attention not in ("row", "global"):
            raise InvalidConfig(f"stereo_attention must be 'row' or 'global', got {attention!r}")
        self.channels = channels
        self.tau = float(tau)
        self.attention = attention
        self.norm_left = nn.LayerNorm(channels)
        self.norm_right = nn.LayerNorm(channels)
        self.w1_left = nn.Linear(channels, channels, bias=False)
        self.w1_right = nn.Linear(channels, channels, bias=False)
        self.w2_left = nn.Linear(channels, channels, bias=False)
        self.w2_right = nn.Linear(channels, channels, bias=False)
        self.gamma_left = nn.Parameter(torch.zeros(()))
        self.gamma_right = nn.Parameter(torch.zeros(()))

    def forward(self, x_left: torch.Tensor, x_right: torch.Tensor):
        if x_left.shape != x_right.shape:
            raise InvalidShape(f"view shapes differ: {tuple(x_left.shape)} vs {tuple(x_right.shape)}")
        if x_left.dim() != 4 or x_left.shape[1] != self.channels:
            raise InvalidShape(f"expected (B, {self.channels}, H, W) views, got {tuple(x_left.shape)}")
        b, c, h, w = x_left.shape
        xl = x_left.permute(0, 2, 3, 1)
        xr = x_right.permute(0, 2, 3, 1)
        if self.attention == "global":
            xl = xl.reshape(b, 1, h * w, c)
            xr = xr.reshape(b, 1, h * w, c)
        ql = self.w1_left(self.norm_left(xl))
        qr = self.w1_right(self.norm_right(xr))
        r2l = temperature_attention(ql, qr, self.w2_right(xr), self.tau)
        l2r = temperature_attention(qr, ql, self.w2_left(xl), self.tau)
        r2l = r2l.reshape(b, h, w, c).permute(0, 3, 1, 2)
        l2r = l2r.reshape(b, h, w, c).permute(0, 3, 1, 2)
        return x_left + self.gamma_left * r2l, x_right + self.gamma_right * l2r
