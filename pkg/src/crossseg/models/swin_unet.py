"""Encoder-decoder built from shifted-window self-attention blocks.

Tokens are kept channels-last, ``[B, H, W, C]``, throughout.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from crossseg.models import ProjectionHead, register_network


def window_partition(x, ws):
    b, h, w, c = x.shape
    x = x.view(b, h // ws, ws, w // ws, ws, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, c)


def window_reverse(windows, ws, b, h, w):
    x = windows.view(b, h // ws, w // ws, ws, ws, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, -1)


def shifted_window_mask(h, w, ws, shift, device=None):
    """Additive mask [nW, ws*ws, ws*ws] hiding pairs that come from different regions after the roll."""
    img = torch.zeros(1, h, w, 1, device=device)
    region = 0
    for hs in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
        for wsl in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
            img[:, hs, wsl, :] = region
            region += 1
    ids = window_partition(img, ws).squeeze(-1)
    diff = ids.unsqueeze(1) - ids.unsqueeze(2)
    return diff.ne(0).float() * -100.0


class WindowAttention(nn.Module):
    """Multi-head self-attention inside a window, with a learned relative position bias."""

    def __init__(self, dim, window_size, num_heads):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.window_size = window_size
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.relative_position_bias_table = nn.Parameter(torch.zeros((2 * window_size - 1) ** 2, num_heads))
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)
        self._index_cache = {}

    def _relative_index(self, ws, device):
        key = (ws, str(device))
        if key not in self._index_cache:
            coords = torch.stack(torch.meshgrid(torch.arange(ws), torch.arange(ws), indexing="ij")).flatten(1)
            rel = coords[:, :, None] - coords[:, None, :]
            # table is laid out for the configured window; smaller windows index a sub-grid
            span = 2 * self.window_size - 1
            index = (rel[0] + self.window_size - 1) * span + (rel[1] + self.window_size - 1)
            self._index_cache[key] = index.to(device)
        return self._index_cache[key]

    def forward(self, x, ws, mask=None):
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.num_heads, c // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_position_bias_table[self._relative_index(ws, x.device).reshape(-1)]
        attn = attn + bias.view(n, n, -1).permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.num_heads, n, n) + mask.to(attn.dtype).unsqueeze(1).unsqueeze(0)
            attn = attn.view(-1, self.num_heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        return self.proj(out)


class SwinBlock(nn.Module):
    def __init__(self, dim, num_heads, window_size, shifted, mlp_ratio=4.0):
        super().__init__()
        self.window_size = window_size
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window_size, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self._mask_cache = {}

    def _geometry(self, h, w):
        if min(h, w) <= self.window_size:
            ws, shift = min(h, w), 0
        else:
            ws = self.window_size
            shift = ws // 2 if self.shifted else 0
        if h % ws or w % ws:
            raise ValueError(f"window size {ws} does not divide the {h}x{w} token grid")
        return ws, shift

    def forward(self, x):
        b, h, w, c = x.shape
        ws, shift = self._geometry(h, w)
        shortcut = x
        x = self.norm1(x)
        if shift:
            x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
            key = (h, w, ws, shift, str(x.device))
            if key not in self._mask_cache:
                self._mask_cache[key] = shifted_window_mask(h, w, ws, shift, x.device)
            mask = self._mask_cache[key]
        else:
            mask = None
        windows = self.attn(window_partition(x, ws), ws, mask)
        x = window_reverse(windows, ws, b, h, w)
        if shift:
            x = torch.roll(x, shifts=(shift, shift), dims=(1, 2))
        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class SwinStage(nn.Sequential):
    def __init__(self, dim, depth, num_heads, window_size):
        super().__init__(*[SwinBlock(dim, num_heads, window_size, shifted=i % 2 == 1) for i in range(depth)])


class PatchEmbed(nn.Module):
    def __init__(self, in_ch, dim, patch):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, dim, kernel_size=patch, stride=patch)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        return self.norm(self.proj(x).permute(0, 2, 3, 1))


class PatchMerging(nn.Module):
    """2x2 neighbourhood -> one token with twice the channels."""

    def __init__(self, dim):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x):
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], dim=-1)
        return self.reduction(self.norm(x))


class PatchExpand(nn.Module):
    """Linear expansion followed by a pixel-shuffle style rearrangement: ``scale`` x upsampling."""

    def __init__(self, dim, out_dim, scale):
        super().__init__()
        self.scale = scale
        self.out_dim = out_dim
        self.expand = nn.Linear(dim, out_dim * scale * scale, bias=False)
        self.norm = nn.LayerNorm(out_dim)

    def forward(self, x):
        b, h, w, _ = x.shape
        s = self.scale
        x = self.expand(x).view(b, h, w, s, s, self.out_dim)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, h * s, w * s, self.out_dim)
        return self.norm(x)


@register_network("windowed_transformer_unet")
class SwinUNet(nn.Module):
    """U-shaped network of shifted-window attention stages.

    Encoder stage ``i`` works at ``embed_dim * 2**i`` channels and resolution
    ``H / (patch * 2**i)``; the last encoder stage is the bottleneck and feeds
    the projection head. The decoder mirrors the encoder with patch expansion
    and skip concatenation, then a final ``patch_size`` x expansion restores
    full resolution.
    """

    def __init__(self, cfg):
        super().__init__()
        n = len(cfg.depths)
        dims = [cfg.embed_dim * 2**i for i in range(n)]
        self.patch_size = cfg.patch_size
        self.num_stages = n
        self.patch_embed = PatchEmbed(cfg.in_channels, dims[0], cfg.patch_size)
        self.encoder = nn.ModuleList(
            SwinStage(dims[i], cfg.depths[i], cfg.num_heads[i], cfg.window_size) for i in range(n)
        )
        self.merges = nn.ModuleList(PatchMerging(dims[i]) for i in range(n - 1))
        self.norm = nn.LayerNorm(dims[-1])

        self.expands = nn.ModuleList(PatchExpand(dims[i + 1], dims[i], 2) for i in range(n - 1))
        self.concat_back = nn.ModuleList(nn.Linear(2 * dims[i], dims[i]) for i in range(n - 1))
        self.decoder = nn.ModuleList(
            SwinStage(dims[i], cfg.depths[i], cfg.num_heads[i], cfg.window_size) for i in range(n - 1)
        )
        self.norm_up = nn.LayerNorm(dims[0])
        self.final_expand = PatchExpand(dims[0], dims[0], cfg.patch_size)
        self.head = nn.Conv2d(dims[0], cfg.num_classes, kernel_size=1, bias=False)
        self.projection = ProjectionHead(dims[-1], cfg.projection_dim)
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(m):
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)

    @property
    def size_multiple(self):
        return self.patch_size * 2 ** (self.num_stages - 1)

    def forward(self, x, with_representation=False):
        h, w = x.shape[-2:]
        m = self.size_multiple
        if h % m or w % m:
            raise ValueError(f"SwinUNet needs H, W divisible by {m}; got {h}x{w}")
        x = self.patch_embed(x)
        skips = []
        for i, stage in enumerate(self.encoder):
            x = stage(x)
            if i < self.num_stages - 1:
                skips.append(x)
                x = self.merges[i](x)
        bottleneck = self.norm(x)

        y = bottleneck
        for i in reversed(range(self.num_stages - 1)):
            y = self.expands[i](y)
            y = self.concat_back[i](torch.cat([y, skips[i]], dim=-1))
            y = self.decoder[i](y)
        y = self.final_expand(self.norm_up(y))
        logits = self.head(y.permute(0, 3, 1, 2))
        z = None
        if with_representation:
            z = self.projection(bottleneck.mean(dim=(1, 2)))
        return logits, z
