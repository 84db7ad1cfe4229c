"""HAT-style single-image SR transformer.

Shallow 3x3 conv, a stack of residual hybrid attention groups (RHAG) made of
hybrid attention blocks (HAB), then a pixel-shuffle reconstruction tail.
Parameter names mirror the published HAT layout (minus the overlapping
cross-attention block) so pretrained weights map over by name.

The forward pass is split into stages (``shallow``, ``enter_body``,
``layers[i]``, ``leave_body``, ``reconstruct``) so a stereo wrapper can run
both views through shared weights and interleave cross-view modules between
groups.
"""

from __future__ import annotations

import dataclasses
import functools
import math
from typing import NamedTuple, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidConfig, InvalidInput, InvalidShape


@dataclasses.dataclass
class BackboneConfig:
    embed_dim: int = 32
    num_groups: int = 2
    blocks_per_group: int = 2
    num_heads: int = 4
    window_size: int = 4
    mlp_ratio: float = 2.0
    cab_weight: float = 0.01
    # CAB conv reduction D -> D/cab_compress, and squeeze-excite reduction inside the gate
    cab_compress: int = 2
    cab_squeeze: int = 4
    scale: int = 2
    img_channels: int = 3
    upsample_feat: int = 64
    img_range: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("embed_dim", "num_groups", "blocks_per_group", "num_heads", "window_size",
                     "cab_compress", "cab_squeeze", "img_channels", "upsample_feat"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise InvalidConfig(f"backbone.{name} must be a positive int, got {value!r}")
        if self.embed_dim % self.num_heads:
            raise InvalidConfig(f"backbone.embed_dim={self.embed_dim} not divisible by num_heads={self.num_heads}")
        if self.embed_dim % self.cab_compress:
            raise InvalidConfig(f"backbone.cab_compress={self.cab_compress} does not divide embed_dim={self.embed_dim}")
        if self.embed_dim % self.cab_squeeze:
            raise InvalidConfig(f"backbone.cab_squeeze={self.cab_squeeze} does not divide embed_dim={self.embed_dim}")
        if self.scale not in (2, 4):
            raise InvalidConfig(f"backbone.scale must be 2 or 4, got {self.scale!r}")
        if not self.mlp_ratio > 0:
            raise InvalidConfig(f"backbone.mlp_ratio must be positive, got {self.mlp_ratio!r}")

    @classmethod
    def hat_l(cls, scale: int = 4) -> "BackboneConfig":
        """The HAT-L layout: D=180, 12 groups of 6 blocks, window 16."""
        return cls(embed_dim=180, num_groups=12, blocks_per_group=6, num_heads=6, window_size=16,
                   mlp_ratio=2.0, cab_weight=0.01, cab_compress=3, cab_squeeze=30, scale=scale)

    @classmethod
    def toy(cls, **overrides) -> "BackboneConfig":
        base = dict(embed_dim=32, num_groups=2, blocks_per_group=2, num_heads=4, window_size=4,
                    mlp_ratio=2.0, cab_compress=2, cab_squeeze=4, scale=2, upsample_feat=32)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class TokenGrid(NamedTuple):
    """Tokens (B, H*W, D) together with the spatial size they came from."""

    data: torch.Tensor
    height: int
    width: int

    def to_feature_map(self) -> torch.Tensor:
        return tokens_to_map(self.data, (self.height, self.width))


def map_to_tokens(x: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, H*W, C)."""
    if x.dim() != 4 or min(x.shape) <= 0:
        raise InvalidShape(f"expected a non-empty (B, C, H, W) array, got {tuple(x.shape)}")
    return x.flatten(2).transpose(1, 2)


def tokens_to_map(x: torch.Tensor, x_size: Sequence[int]) -> torch.Tensor:
    """(B, H*W, C) -> (B, C, H, W)."""
    h, w = x_size
    b, n, c = x.shape
    if n != h * w:
        raise InvalidShape(f"token count {n} != {h}x{w}")
    return x.transpose(1, 2).reshape(b, c, h, w)


def window_partition(x: torch.Tensor, window_size: int) -> torch.Tensor:
    """(B, H, W, C) -> (B*nW, ws, ws, C)."""
    b, h, w, c = x.shape
    x = x.reshape(b, h // window_size, window_size, w // window_size, window_size, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window_size, window_size, c)


def window_reverse(windows: torch.Tensor, window_size: int, h: int, w: int) -> torch.Tensor:
    b = windows.shape[0] // ((h // window_size) * (w // window_size))
    x = windows.reshape(b, h // window_size, w // window_size, window_size, window_size, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, -1)


def relative_position_index(window_size: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(window_size), torch.arange(window_size), indexing="ij"))
    coords = coords.flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0).contiguous()
    rel[:, :, 0] += window_size - 1
    rel[:, :, 1] += window_size - 1
    rel[:, :, 0] *= 2 * window_size - 1
    return rel.sum(-1)


@functools.lru_cache(maxsize=32)
def shift_attention_mask(h: int, w: int, window_size: int, shift_size: int) -> torch.Tensor:
    """Additive mask (nW, ws*ws, ws*ws) keeping shifted windows from mixing wrapped regions."""
    img_mask = torch.zeros((1, h, w, 1))
    slices = (slice(0, -window_size), slice(-window_size, -shift_size), slice(-shift_size, None))
    cnt = 0
    for hs in slices:
        for ws in slices:
            img_mask[:, hs, ws, :] = cnt
            cnt += 1
    mask_windows = window_partition(img_mask, window_size).reshape(-1, window_size * window_size)
    mask = mask_windows.unsqueeze(1) - mask_windows.unsqueeze(2)
    return mask.masked_fill(mask != 0, -100.0).masked_fill(mask == 0, 0.0)


def init_weights(m: nn.Module):
    """Linear: truncated normal (std 0.02), zero bias. Conv: fan-in uniform, zero bias. LN: 1/0."""
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.Conv2d):
        m.reset_parameters()
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, WindowAttention):
        nn.init.trunc_normal_(m.relative_position_bias_table, std=0.02)


class WindowAttention(nn.Module):
    def __init__(self, dim: int, window_size: int, num_heads: int):
        super().__init__()
        self.dim = dim
        self.window_size = window_size
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.relative_position_bias_table = nn.Parameter(torch.zeros((2 * window_size - 1) ** 2, num_heads))
        self.register_buffer("relative_position_index", relative_position_index(window_size), persistent=False)
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.apply(init_weights)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """x: (B*nW, n, C) windows; mask: (nW, n, n) or None."""
        b_, n, c = x.shape
        qkv = self.qkv(x).reshape(b_, n, 3, self.num_heads, c // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_position_bias_table[self.relative_position_index.view(-1)]
        bias = bias.view(n, n, -1).permute(2, 0, 1)
        attn = attn + bias.unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(b_ // nw, nw, self.num_heads, n, n) + mask.to(attn).unsqueeze(1).unsqueeze(0)
            attn = attn.view(-1, self.num_heads, n, n)
        attn = attn.softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(b_, n, c)
        return self.proj(x)


def window_attention(x: torch.Tensor, x_size: Sequence[int], attn: WindowAttention, shift: bool) -> torch.Tensor:
    """(Shifted-)window multi-head self-attention over a (B, H*W, C) token grid."""
    h, w = x_size
    b, n, c = x.shape
    ws = attn.window_size
    if n != h * w:
        raise InvalidShape(f"token count {n} != {h}x{w}")
    if h % ws or w % ws:
        raise InvalidShape(f"window_size {ws} does not divide feature size {h}x{w}")
    x = x.reshape(b, h, w, c)
    shift_size = ws // 2 if shift else 0
    if shift_size:
        x = torch.roll(x, shifts=(-shift_size, -shift_size), dims=(1, 2))
        mask = shift_attention_mask(h, w, ws, shift_size)
    else:
        mask = None
    windows = window_partition(x, ws).reshape(-1, ws * ws, c)
    out = attn(windows, mask).reshape(-1, ws, ws, c)
    out = window_reverse(out, ws, h, w)
    if shift_size:
        out = torch.roll(out, shifts=(shift_size, shift_size), dims=(1, 2))
    return out.reshape(b, n, c)


class ChannelAttention(nn.Module):
    def __init__(self, num_feat: int, squeeze_factor: int):
        super().__init__()
        self.attention = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(num_feat, num_feat // squeeze_factor, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(num_feat // squeeze_factor, num_feat, 1),
            nn.Sigmoid(),
        )

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        return self.attention(x)

    def forward(self, x):
        return x * self.attention(x)


class CAB(nn.Module):
    """Channel attention block: conv -> GELU -> conv -> squeeze-excite gate."""

    def __init__(self, num_feat: int, compress_ratio: int, squeeze_factor: int):
        super().__init__()
        self.cab = nn.Sequential(
            nn.Conv2d(num_feat, num_feat // compress_ratio, 3, 1, 1),
            nn.GELU(),
            nn.Conv2d(num_feat // compress_ratio, num_feat, 3, 1, 1),
            ChannelAttention(num_feat, squeeze_factor),
        )
        self.apply(init_weights)

    def forward(self, x):
        return self.cab(x)


def channel_attention_block(x: torch.Tensor, cab: CAB) -> torch.Tensor:
    if x.dim() != 4 or x.shape[1] != cab.cab[0].in_channels:
        raise InvalidShape(f"CAB expects (B, {cab.cab[0].in_channels}, H, W), got {tuple(x.shape)}")
    return cab(x)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)
        self.apply(init_weights)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class HAB(nn.Module):
    """Hybrid attention block.

    ``hybrid = attn(LN(x)) + alpha * CAB(LN(x))`` (one LayerNorm shared by both
    branches), ``y = x + hybrid``, ``out = y + MLP(LN(y))``.

    Spatial adapters are not owned by the block; they are passed in per call so
    that injecting them never renames a backbone parameter. ``adapter`` acts on
    the hybrid-attention output ("after_HA") or on its input ("parallel");
    ``mlp_adapter`` acts on the MLP output. Each adapter returns only its branch
    and the block adds the residual.
    """

    def __init__(self, cfg: BackboneConfig, shift: bool):
        super().__init__()
        self.dim = cfg.embed_dim
        self.shift = shift
        self.cab_weight = cfg.cab_weight
        self.norm1 = nn.LayerNorm(cfg.embed_dim)
        self.attn = WindowAttention(cfg.embed_dim, cfg.window_size, cfg.num_heads)
        self.conv_block = CAB(cfg.embed_dim, cfg.cab_compress, cfg.cab_squeeze)
        self.norm2 = nn.LayerNorm(cfg.embed_dim)
        self.mlp = Mlp(cfg.embed_dim, int(cfg.embed_dim * cfg.mlp_ratio))
        self.apply(init_weights)

    def hybrid_attention(self, x: torch.Tensor, x_size) -> torch.Tensor:
        attn_x = window_attention(x, x_size, self.attn, self.shift)
        conv_x = map_to_tokens(self.conv_block(tokens_to_map(x, x_size)))
        return attn_x + self.cab_weight * conv_x

    def forward(self, x, x_size, adapter=None, mlp_adapter=None, parallel=False):
        normed = self.norm1(x)
        hybrid = self.hybrid_attention(normed, x_size)
        if adapter is not None:
            hybrid = hybrid + adapter(normed if parallel else hybrid)
        x = x + hybrid
        mlp_x = self.mlp(self.norm2(x))
        if mlp_adapter is not None:
            mlp_x = mlp_x + mlp_adapter(mlp_x)
        return x + mlp_x


class ResidualGroup(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.blocks = nn.ModuleList([HAB(cfg, shift=bool(i % 2)) for i in range(cfg.blocks_per_group)])


class RHAG(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.residual_group = ResidualGroup(cfg)
        self.conv = nn.Conv2d(cfg.embed_dim, cfg.embed_dim, 3, 1, 1)
        init_weights(self.conv)

    def forward(self, x, x_size, adapters: Optional[Sequence] = None):
        """``adapters``: None/empty, or one ``(adapter, mlp_adapter, parallel)`` triple per block."""
        blocks = self.residual_group.blocks
        if adapters and len(adapters) != len(blocks):
            raise InvalidConfig(f"got {len(adapters)} adapter slots for a group of {len(blocks)} blocks")
        y = x
        for i, blk in enumerate(blocks):
            if adapters:
                adapter, mlp_adapter, parallel = adapters[i]
                y = blk(y, x_size, adapter, mlp_adapter, parallel)
            else:
                y = blk(y, x_size)
        return map_to_tokens(self.conv(tokens_to_map(y, x_size))) + x


class PatchEmbed(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        return self.norm(map_to_tokens(x))


class Upsample(nn.Sequential):
    def __init__(self, scale: int, num_feat: int):
        layers = []
        for _ in range(int(math.log2(scale))):
            layers += [nn.Conv2d(num_feat, 4 * num_feat, 3, 1, 1), nn.PixelShuffle(2)]
        super().__init__(*layers)


class BodyState(NamedTuple):
    shallow: torch.Tensor
    x_size: tuple
    crop: tuple


class HATBackbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.embed_dim
        if cfg.img_channels == 3:
            mean = torch.tensor((0.4488, 0.4371, 0.4040)).view(1, 3, 1, 1)
        else:
            mean = torch.zeros(1, cfg.img_channels, 1, 1)
        self.register_buffer("mean", mean, persistent=False)
        self.conv_first = nn.Conv2d(cfg.img_channels, d, 3, 1, 1)
        self.patch_embed = PatchEmbed(d)
        self.layers = nn.ModuleList([RHAG(cfg) for _ in range(cfg.num_groups)])
        self.norm = nn.LayerNorm(d)
        self.conv_after_body = nn.Conv2d(d, d, 3, 1, 1)
        self.conv_before_upsample = nn.Sequential(nn.Conv2d(d, cfg.upsample_feat, 3, 1, 1), nn.LeakyReLU(inplace=True))
        self.upsample = Upsample(cfg.scale, cfg.upsample_feat)
        self.conv_last = nn.Conv2d(cfg.upsample_feat, cfg.img_channels, 3, 1, 1)
        self.reset_parameters()

    def reset_parameters(self):
        self.apply(init_weights)

    # -- stages -----------------------------------------------------------

    def check_input(self, img: torch.Tensor):
        if img.dim() != 4 or min(img.shape) <= 0:
            raise InvalidShape(f"expected (B, C, H, W) input, got {tuple(img.shape)}")
        if img.shape[1] != self.cfg.img_channels:
            raise InvalidShape(f"expected {self.cfg.img_channels} channels, got {img.shape[1]}")
        if not torch.isfinite(img).all():
            raise InvalidInput("input contains non-finite values")

    def shallow(self, img: torch.Tensor) -> torch.Tensor:
        x = (img - self.mean.to(img)) * self.cfg.img_range
        return self.conv_first(x)

    def embed_features(self, x: torch.Tensor) -> TokenGrid:
        """Token grid from either an image (shallow conv applied) or a D-channel feature map."""
        if x.dim() != 4 or min(x.shape) <= 0:
            raise InvalidShape(f"expected a non-empty (B, C, H, W) array, got {tuple(x.shape)}")
        if x.shape[1] == self.cfg.img_channels and x.shape[1] != self.cfg.embed_dim:
            x = self.shallow(x)
        elif x.shape[1] != self.cfg.embed_dim:
            raise InvalidShape(f"channel count {x.shape[1]} is neither img_channels nor embed_dim")
        return TokenGrid(map_to_tokens(x), x.shape[2], x.shape[3])

    def enter_body(self, feat: torch.Tensor):
        """Pad to a window multiple, tokenize, normalize. Returns (tokens, BodyState)."""
        h, w = feat.shape[-2:]
        ws = self.cfg.window_size
        ph, pw = (-h) % ws, (-w) % ws
        padded = feat
        if ph or pw:
            mode = "reflect" if ph < h and pw < w else "replicate"
            padded = F.pad(feat, (0, pw, 0, ph), mode=mode)
        x_size = (h + ph, w + pw)
        return self.patch_embed(padded), BodyState(feat, x_size, (h, w))

    def leave_body(self, tokens: torch.Tensor, state: BodyState) -> torch.Tensor:
        x = tokens_to_map(self.norm(tokens), state.x_size)
        h, w = state.crop
        x = x[..., :h, :w]
        return self.conv_after_body(x) + state.shallow

    def reconstruct(self, feat: torch.Tensor) -> torch.Tensor:
        x = self.conv_last(self.upsample(self.conv_before_upsample(feat)))
        return x / self.cfg.img_range + self.mean.to(x)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        self.check_input(img)
        x, state = self.enter_body(self.shallow(img))
        for layer in self.layers:
            x = layer(x, state.x_size)
        return self.reconstruct(self.leave_body(x, state))
