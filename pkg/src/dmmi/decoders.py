"""Text-to-image and image-to-text decoder branches."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .mba import flatten_map, unflatten_map


class MergeSkip(nn.Module):
    """Upsample the coarser decoder map x2, concatenate the skip, two conv-BN-ReLU."""

    def __init__(self, up_dim, skip_dim, out_dim):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(up_dim + skip_dim, out_dim, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_dim),
            nn.ReLU(),
            nn.Conv2d(out_dim, out_dim, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_dim),
            nn.ReLU(),
        )

    def forward(self, y_next, skip):
        if y_next.shape[-2] * 2 != skip.shape[-2] or y_next.shape[-1] * 2 != skip.shape[-1]:
            raise ValueError(f"cannot merge {tuple(y_next.shape)} into skip {tuple(skip.shape)}")
        up = F.interpolate(y_next, scale_factor=2, mode="bilinear", align_corners=False)
        return self.body(torch.cat([up, skip], dim=1))


class DecoderLayer(nn.Module):
    """Post-norm transformer decoder layer: self-attn, cross-attn, feed-forward.

    ``memory`` may have a different width than the queries.
    """

    def __init__(self, dim, mem_dim, heads=8, ff_mult=4):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(dim, heads, kdim=mem_dim, vdim=mem_dim, batch_first=True)
        self.ff = nn.Sequential(nn.Linear(dim, ff_mult * dim), nn.GELU(), nn.Linear(ff_mult * dim, dim))
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, x, memory, query_valid=None, memory_valid=None):
        qpm = None if query_valid is None else ~query_valid
        mpm = None if memory_valid is None else ~memory_valid
        a, _ = self.self_attn(x, x, x, key_padding_mask=qpm, need_weights=False)
        x = self.norm1(x + a)
        c, _ = self.cross_attn(x, memory, memory, key_padding_mask=mpm, need_weights=False)
        x = self.norm2(x + c)
        return self.norm3(x + self.ff(x))


class TextQueryDecode(nn.Module):
    """Pixels of a feature map query the fused text features."""

    def __init__(self, dim, text_dim, heads=8):
        super().__init__()
        self.layer = DecoderLayer(dim, text_dim, heads)

    def forward(self, feature, e4, valid):
        tokens = self.layer(flatten_map(feature), e4, memory_valid=valid)
        return unflatten_map(tokens, feature.shape[2:])


@dataclass
class DecoderState:
    y4: torch.Tensor
    y3: torch.Tensor
    y2: torch.Tensor
    v_g: torch.Tensor
    v_d: torch.Tensor


@dataclass
class Prediction:
    logits: torch.Tensor  # (B, 2, H, W)

    @property
    def mask(self) -> torch.Tensor:
        # ties go to background
        return self.logits[:, 1] > self.logits[:, 0]


class TextToImageDecoder(nn.Module):
    """Y_4 = V*_4; Y_n = psi(phi(Y_{n+1}, V*_n), E*_4) for n = 3, 2, then a conv head."""

    def __init__(self, channels=(16, 32, 64, 128), text_dim=64, dec_dims=(64, 32),
                 agg_dim=64, heads=8):
        super().__init__()
        c1, c2, c3, c4 = channels
        d3, d2 = dec_dims
        self.merge3 = MergeSkip(c4, c3, d3)
        self.query3 = TextQueryDecode(d3, text_dim, heads)
        self.merge2 = MergeSkip(d3, c2, d2)
        self.query2 = TextQueryDecode(d2, text_dim, heads)
        self.head = nn.Sequential(
            nn.Conv2d(d2, d2, 3, padding=1), nn.ReLU(),
            nn.Conv2d(d2, d2, 3, padding=1), nn.ReLU(),
            nn.Conv2d(d2, 2, 1),
        )
        self.agg = nn.ModuleList(nn.Conv2d(c, agg_dim, 1) for c in (c4, d3, d2))

    def forward(self, fused, e4, valid, out_size):
        y4 = fused[3]
        y3 = self.query3(self.merge3(y4, fused[2]), e4, valid)
        y2 = self.query2(self.merge2(y3, fused[1]), e4, valid)
        logits = F.interpolate(self.head(y2), size=out_size, mode="bilinear", align_corners=False)
        grid = y3.shape[2:]
        v_d = sum(_resize(proj(y), grid) for proj, y in zip(self.agg, (y4, y3, y2)))
        return DecoderState(y4, y3, y2, v_g=y3, v_d=v_d), Prediction(logits)


def _resize(x, size):
    if tuple(x.shape[2:]) == tuple(size):
        return x
    if x.shape[2] > size[0]:
        return F.adaptive_avg_pool2d(x, size)
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class ContextClueRecovery(nn.Module):
    """Erased-text features query the mid-decoder visual tokens."""

    def __init__(self, text_dim, vis_dim, heads=8):
        super().__init__()
        self.layer = DecoderLayer(text_dim, vis_dim, heads)

    def forward(self, e_erased, v_g, valid):
        return self.layer(e_erased, flatten_map(v_g), query_valid=valid)


def masked_mean(x, valid):
    """Mean of (B, L, C) features over valid tokens."""
    w = valid.to(x.dtype).unsqueeze(-1)
    return (x * w).sum(1) / w.sum(1).clamp_min(1.0)


@dataclass
class PooledPair:
    v_o: torch.Tensor
    e_o: torch.Tensor


class PoolPair(nn.Module):
    """Global pooling, projection to a shared width and L2 normalisation."""

    def __init__(self, vis_dim, text_dim, embed_dim=64):
        super().__init__()
        self.proj_v = nn.Linear(vis_dim, embed_dim)
        self.proj_e = nn.Linear(text_dim, embed_dim)

    @staticmethod
    def pool(v_d, e4, valid):
        return v_d.mean(dim=(2, 3)), masked_mean(e4, valid)

    def forward(self, v_d, e4, valid):
        pv, pe = self.pool(v_d, e4, valid)
        return PooledPair(F.normalize(self.proj_v(pv), dim=-1), F.normalize(self.proj_e(pe), dim=-1))
