"""Generalized semantic-boundary heads (CASENet, DFF, DDS, BBCB) and the FCN head.

Every head takes N tapped side features.  Sides 1..N-1 go through binary side
layers (one channel), side N through the semantic side layer (N_cat
channels).  The outputs are merged per category by sliced concatenation and a
fuse layer.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import ConvNormAct

VARIANTS = ("casenet", "dff", "dds", "bbcb")


@dataclass
class HeadConfig:
    variant: str = "casenet"
    num_categories: int = 19
    side_channels: tuple = ()
    dff_hidden: int = 32

    def __post_init__(self):
        self.variant = self.variant.lower()
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown head variant {self.variant!r}; choose from {VARIANTS}")
        if self.num_categories < 1:
            raise ValueError("num_categories must be >= 1")
        if self.side_channels and len(self.side_channels) < 2:
            raise ValueError("an SBD head needs at least two sides")

    @property
    def num_sides(self) -> int:
        return len(self.side_channels)

    @property
    def out_categories(self) -> int:
        return 1 if self.variant == "bbcb" else self.num_categories


@dataclass
class HeadOutputs:
    fuse_logits: torch.Tensor
    semantic_side_logits: torch.Tensor
    binary_side_logits: list = field(default_factory=list)

    @property
    def sbd(self) -> list:
        """Members of the semantic-boundary supervision set."""
        return [self.semantic_side_logits, self.fuse_logits]


def _check_upsample(x, size):
    h, w = x.shape[-2:]
    if size[0] < h or size[1] < w:
        raise ValueError(f"target {tuple(size)} is smaller than the side feature {(h, w)}")


class SideLayer(nn.Module):
    """1x1 projection, bilinear upsampling, then a per-channel 3x3 conv.

    Stands in for the transposed convolution of the original side layer, which
    leaves checkerboard artifacts; the 3x3 conv is depthwise so it adds only
    ``10 * out_channels`` parameters.  Replicate padding keeps the image border
    from looking like an edge.
    """

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.project = nn.Conv2d(in_channels, out_channels, 1)
        self.refine = nn.Conv2d(out_channels, out_channels, 3, padding=1, groups=out_channels,
                                padding_mode="replicate")

    def upsample(self, p, size):
        _check_upsample(p, size)
        if tuple(p.shape[-2:]) != tuple(size):
            p = F.interpolate(p, size=size, mode="bilinear", align_corners=False)
        return self.refine(p)

    def forward(self, x, size):
        return self.upsample(self.project(x), size)


def binary_side_layer(in_channels) -> SideLayer:
    return SideLayer(in_channels, 1)


def semantic_side_layer(in_channels, num_categories) -> SideLayer:
    return SideLayer(in_channels, num_categories)


def sliced_concat(binary, semantic):
    """Interleave per category: group ``c`` is ``[b_1, ..., b_{K-1}, semantic_c]``."""
    B, N, H, W = semantic.shape
    for b in binary:
        if b.shape[0] != B or b.shape[1] != 1 or b.shape[-2:] != semantic.shape[-2:]:
            raise ValueError(f"binary side of shape {tuple(b.shape)} incompatible with {tuple(semantic.shape)}")
    if not binary:
        return semantic
    b = torch.cat(list(binary), dim=1)
    b = b.unsqueeze(1).expand(B, N, len(binary), H, W)
    return torch.cat([b, semantic.unsqueeze(2)], dim=2).reshape(B, N * (len(binary) + 1), H, W)


class FuseLayer(nn.Module):
    """Grouped 1x1 conv: one group per category, each mixing its K slices."""

    def __init__(self, num_categories, num_sides):
        super().__init__()
        self.num_categories = num_categories
        self.conv = nn.Conv2d(num_categories * num_sides, num_categories, 1, groups=num_categories)
        nn.init.constant_(self.conv.weight, 1.0 / num_sides)
        nn.init.zeros_(self.conv.bias)

    def forward(self, sliced):
        if sliced.shape[1] % self.num_categories:
            raise ValueError(f"{sliced.shape[1]} channels not divisible by {self.num_categories} categories")
        return self.conv(sliced)


class AdaptiveWeightLearner(nn.Module):
    """Location-specific fusion weights, one per slice of the sliced tensor."""

    def __init__(self, num_categories, num_sides, hidden=32):
        super().__init__()
        ch = num_categories * num_sides
        self.body = nn.Sequential(ConvNormAct(ch, hidden), ConvNormAct(hidden, hidden),
                                  nn.Conv2d(hidden, ch, 1))

    def forward(self, sliced):
        return self.body(sliced)


def dff_fuse(sliced, weights, num_categories):
    if sliced.shape != weights.shape:
        raise ValueError(f"weights {tuple(weights.shape)} do not match sliced {tuple(sliced.shape)}")
    B, C, H, W = sliced.shape
    if C % num_categories:
        raise ValueError(f"{C} channels not divisible by {num_categories} categories")
    return (sliced * weights).view(B, num_categories, C // num_categories, H, W).sum(dim=2)


class BasicBlock(nn.Module):
    def __init__(self, channels, zero_init_last=False):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(channels)
        if zero_init_last:
            nn.init.zeros_(self.conv2.weight)

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + x)


class DDSSideBlock(nn.Module):
    """Two residual basic blocks at tap resolution followed by a side layer."""

    def __init__(self, in_channels, out_channels, zero_init_last=False):
        super().__init__()
        self.blocks = nn.Sequential(BasicBlock(in_channels, zero_init_last),
                                    BasicBlock(in_channels, zero_init_last))
        self.side = SideLayer(in_channels, out_channels)

    @property
    def refine(self):
        return self.side.refine

    def project(self, x):
        return self.side.project(self.blocks(x))

    def upsample(self, p, size):
        return self.side.upsample(p, size)

    def forward(self, x, size):
        return self.upsample(self.project(x), size)


class SBDHead(nn.Module):
    """Generalized SBD head over ``len(cfg.side_channels)`` sides.

    ``project`` returns the per-side maps before upsampling (what explicit
    fusion modules hook into); ``decode`` finishes the head from them.
    """

    def __init__(self, cfg: HeadConfig):
        super().__init__()
        if cfg.num_sides < 2:
            raise ValueError("HeadConfig.side_channels must list at least two sides")
        self.cfg = cfg
        n = cfg.out_categories
        *bin_ch, sem_ch = cfg.side_channels
        if cfg.variant == "dds":
            self.binary_sides = nn.ModuleList(DDSSideBlock(c, 1) for c in bin_ch)
            self.semantic_side = DDSSideBlock(sem_ch, n)
        else:
            self.binary_sides = nn.ModuleList(SideLayer(c, 1) for c in bin_ch)
            self.semantic_side = SideLayer(sem_ch, n)
        if cfg.variant == "dff":
            self.fuse = None
            self.weight_learner = AdaptiveWeightLearner(n, cfg.num_sides, cfg.dff_hidden)
        else:
            self.fuse = FuseLayer(n, cfg.num_sides)
            self.weight_learner = None

    @property
    def side_layers(self) -> list:
        return list(self.binary_sides) + [self.semantic_side]

    def project(self, sides):
        if len(sides) != self.cfg.num_sides:
            raise ValueError(f"head expects {self.cfg.num_sides} sides, got {len(sides)}")
        return [layer.project(x) for layer, x in zip(self.side_layers, sides)]

    def decode(self, projected, size) -> HeadOutputs:
        maps = [layer.upsample(p, size) for layer, p in zip(self.side_layers, projected)]
        *binary, semantic = maps
        sliced = sliced_concat(binary, semantic)
        if self.weight_learner is not None:
            fuse = dff_fuse(sliced, self.weight_learner(sliced), self.cfg.out_categories)
        else:
            fuse = self.fuse(sliced)
        supervised_binary = binary if self.cfg.variant == "dds" else []
        return HeadOutputs(fuse, semantic, supervised_binary)

    def forward(self, sides, size) -> HeadOutputs:
        return self.decode(self.project(sides), size)


def head_forward(sides, cfg: HeadConfig, head: SBDHead | None = None, size=None) -> HeadOutputs:
    """Run (building if needed) the head for ``cfg`` over the tapped side features."""
    if head is None:
        head = SBDHead(cfg)
    if len(sides) != cfg.num_sides:
        raise ValueError(f"config declares {cfg.num_sides} sides, got {len(sides)} features")
    if size is None:
        size = max((s.shape[-2:] for s in sides), key=lambda t: t[0] * t[1])
    return head(sides, tuple(size))


class FCNHead(nn.Module):
    """conv-norm-act stack plus 1x1 classifier; used as the toy segmentation
    head and as the stage-4 auxiliary head."""

    def __init__(self, in_channels, num_classes, channels=64, num_convs=1, extra_in=0):
        super().__init__()
        self.in_channels = in_channels
        self.extra_in = extra_in
        convs = [ConvNormAct(in_channels + extra_in, channels)]
        convs += [ConvNormAct(channels, channels) for _ in range(num_convs - 1)]
        self.convs = nn.Sequential(*convs)
        self.classifier = nn.Conv2d(channels, num_classes, 1)

    def features(self, x):
        return self.convs(x)

    def classify(self, feat, size=None):
        out = self.classifier(feat)
        if size is not None and tuple(out.shape[-2:]) != tuple(size):
            out = F.interpolate(out, size=size, mode="bilinear", align_corners=False)
        return out

    def forward(self, x, size=None):
        return self.classify(self.features(x), size)


def fcn_aux_head(in_channels, num_classes, channels=256) -> FCNHead:
    return FCNHead(in_channels, num_classes, channels)
