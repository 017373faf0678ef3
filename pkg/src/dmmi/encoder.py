"""Toy hierarchical visual backbone interleaved with MBA fusion."""
from __future__ import annotations

import torch.nn as nn

from .mba import MBA
from .text import TextEncoder


def conv_bn_relu(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=False),
    )


class ResidualBlock(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.conv1 = conv_bn_relu(dim, dim)
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(dim)
        self.relu = nn.ReLU()

    def forward(self, x):
        return self.relu(x + self.bn2(self.conv2(self.conv1(x))))


class Stage(nn.Module):
    """Stride-2 downsampling conv followed by one residual block."""

    def __init__(self, cin, cout):
        super().__init__()
        self.down = conv_bn_relu(cin, cout, stride=2)
        self.block = ResidualBlock(cout)

    def forward(self, x):
        return self.block(self.down(x))


class FeatureEncoder(nn.Module):
    """Visual stages and text encoder jointly refined by one MBA per stage.

    With the default stride-1 stem, stage outputs sit at 1/2, 1/4, 1/8 and
    1/16 of the input resolution (a stride-2 stem halves all four). After stage n the fused map V*_n feeds stage n+1
    and the fused text E*_n becomes the text input of the next MBA.
    """

    def __init__(self, vocab_size, channels=(16, 32, 64, 128), stem_channels=16,
                 text_dim=64, attn_dim=(64, 64, 64, 64), max_len=20, text_layers=2,
                 heads=8, region_sizes=(1, 3, 5), run_lengths=(1, 2, 3), stem_stride=1):
        super().__init__()
        self.text = TextEncoder(vocab_size, text_dim, max_len, text_layers, heads)
        self.stem = conv_bn_relu(3, stem_channels, stride=stem_stride)
        dims = [stem_channels, *channels]
        self.stages = nn.ModuleList(Stage(dims[i], dims[i + 1]) for i in range(len(channels)))
        self.fusions = nn.ModuleList(
            MBA(c, text_dim, a, region_sizes, run_lengths) for c, a in zip(channels, attn_dim)
        )

    def forward(self, image, ids, valid):
        """Returns ([V*_1, ..., V*_4], E*_4, E)."""
        e0 = self.text(ids, valid)
        return self.fuse(self.stem(image), e0, valid) + (e0,)

    def fuse(self, x, e, valid):
        fused = []
        for stage, mba in zip(self.stages, self.fusions):
            x, e = mba(stage(x), e, valid)
            fused.append(x)
        return fused, e

    def backbone_features(self, image):
        """Plain stage outputs without any fusion (for tests and ablations)."""
        x = self.stem(image)
        out = []
        for stage in self.stages:
            x = stage(x)
            out.append(x)
        return out


def run_encoder(image, ids, valid, encoder: FeatureEncoder):
    fused, e4, _ = encoder(image, ids, valid)
    return fused, e4
