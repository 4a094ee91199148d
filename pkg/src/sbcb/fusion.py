"""Explicit feature fusion between the SBD head and the segmentation head.

Both modules start as exact identities (zero-initialised residual / projection)
so enabling them does not perturb a model at step 0.  Once enabled, the
segmentation head depends on the SBD head and it can no longer be discarded at
export time.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

MODES = ("channel_merge", "two_stream")


@dataclass
class MergeConfig:
    mode: str | None = None
    mix_layers: int = 2
    mix_channels: int | None = None
    proj_channels: int | None = None

    def __post_init__(self):
        if self.mode is not None and self.mode not in MODES:
            raise ValueError(f"unknown fusion mode {self.mode!r}; choose from {MODES}")
        if self.mix_layers < 1:
            raise ValueError("mix_layers must be >= 1")

    @property
    def enabled(self) -> bool:
        return self.mode is not None


def _resize(x, size):
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class ChannelMerge(nn.Module):
    """Mix pre-upsample side maps with the segmentation head feature.

    Side maps are resized to the head resolution and concatenated with the
    head feature; ``mix_layers`` 1x1 convs produce a residual that is split
    back.  The head slice enriches the classifier input and each side slice is
    resized back and added to its side map before upsampling.
    """

    def __init__(self, side_channels, head_channels, mix_layers=2, mix_channels=None):
        super().__init__()
        self.side_channels = list(side_channels)
        self.head_channels = head_channels
        total = sum(self.side_channels) + head_channels
        self.total_channels = total
        hidden = mix_channels or total
        layers = []
        ch = total
        for i in range(mix_layers - 1):
            layers += [nn.Conv2d(ch, hidden, 1), nn.ReLU(inplace=True)]
            ch = hidden
        last = nn.Conv2d(ch, total, 1)
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)
        self.mix = nn.Sequential(*layers, last)

    def forward(self, projected, head_feat):
        if head_feat.dim() != 4 or any(p.shape[0] != head_feat.shape[0] for p in projected):
            raise ValueError("side maps and head feature must be batched 4-D tensors of equal batch size")
        if [p.shape[1] for p in projected] != self.side_channels or head_feat.shape[1] != self.head_channels:
            raise ValueError("channel layout does not match the ChannelMerge configuration")
        size = head_feat.shape[-2:]
        cat = torch.cat([_resize(p, size) for p in projected] + [head_feat], dim=1)
        delta = torch.split(self.mix(cat), self.side_channels + [self.head_channels], dim=1)
        new_sides = [p + _resize(d, p.shape[-2:]) for p, d in zip(projected, delta[:-1])]
        return new_sides, head_feat + delta[-1]


class TwoStreamMerge(nn.Module):
    """Use the fused boundary output as a shape stream: 1x1-project it, resize
    to the segmentation head input and concatenate."""

    def __init__(self, num_categories, proj_channels=None):
        super().__init__()
        self.out_channels = proj_channels or num_categories
        self.proj = nn.Conv2d(num_categories, self.out_channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, fuse_feature, head_input):
        if fuse_feature is None:
            raise ValueError("two-stream merge needs the fuse output of the SBD head")
        shape = _resize(self.proj(fuse_feature), head_input.shape[-2:])
        return torch.cat([head_input, shape], dim=1)


def channel_merge(side_feats_pre_upsample, head_feat, module: ChannelMerge):
    return module(side_feats_pre_upsample, head_feat)


def two_stream_merge(fuse_features, head_input, module: TwoStreamMerge):
    return module(fuse_features, head_input)
