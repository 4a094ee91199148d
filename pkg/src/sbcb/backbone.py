"""Hierarchical backbones with per-stage feature taps.

A backbone here is any ``nn.Module`` exposing ``stage_specs`` (one
:class:`StageSpec` per side, stem included as side 1), ``out_index`` (the
position of the stage feeding the segmentation head) and a ``forward`` that
returns one entry per stage.  An entry is a tensor, or a list of tensors for
multi-branch stages such as HRNet's.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

StageRef = Union[int, str]

ALLOWED_RESOLUTIONS = {Fraction(1, 2 ** k) for k in range(6)}


@dataclass(frozen=True)
class StageSpec:
    index: int
    channels: int
    resolution: Fraction
    name: str = ""

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError(f"stage {self.index}: channels must be >= 1")
        if Fraction(self.resolution) not in ALLOWED_RESOLUTIONS:
            raise ValueError(f"stage {self.index}: unsupported resolution {self.resolution}")


def _as_selection(sel) -> tuple:
    if isinstance(sel, (int, str)):
        return (sel,)
    sel = tuple(sel)
    if not sel:
        raise ValueError("empty stage selection")
    return sel


@dataclass(frozen=True)
class SideTapSpec:
    """Which stages feed the binary side layers and the semantic side layer.

    Each selection is a tuple of stage references (1-based side index or stage
    name); a selection with several members is resized to its largest member
    and channel-concatenated.
    """

    binary_sides: tuple
    semantic_side: tuple

    def __post_init__(self):
        object.__setattr__(self, "binary_sides", tuple(_as_selection(s) for s in self.binary_sides))
        object.__setattr__(self, "semantic_side", _as_selection(self.semantic_side))
        if not self.binary_sides:
            raise ValueError("at least one binary side is required")

    @classmethod
    def from_sides(cls, sides: Sequence) -> "SideTapSpec":
        """``[1, 2, 3, 5]`` -> binary sides 1, 2, 3 and semantic side 5."""
        sides = list(sides)
        if len(sides) < 2:
            raise ValueError("need at least two sides")
        return cls(binary_sides=tuple(sides[:-1]), semantic_side=sides[-1])

    @property
    def selections(self) -> list:
        return list(self.binary_sides) + [self.semantic_side]

    @property
    def num_sides(self) -> int:
        return len(self.binary_sides) + 1


def two_path_taps(detail_stages: Sequence[StageRef], semantic_output: StageRef,
                  available: Sequence[StageRef] | None = None) -> SideTapSpec:
    """Taps for two-path networks: detail-path stages as binary sides, the
    aggregated output as the semantic side (BiSeNet spatial path + FFM-style
    aggregation, or STDC's first stages + FFM output)."""
    detail_stages = list(detail_stages)
    if not detail_stages:
        raise ValueError("at least one detail stage is required")
    if available is not None:
        missing = [s for s in detail_stages + [semantic_output] if s not in set(available)]
        if missing:
            raise KeyError(f"unknown stages {missing}; available: {list(available)}")
    return SideTapSpec(binary_sides=tuple(detail_stages), semantic_side=semantic_output)


@dataclass(frozen=True)
class BackboneTrickConfig:
    stem_stride: int
    strides: tuple
    dilations: tuple

    def __post_init__(self):
        if len(self.strides) != len(self.dilations):
            raise ValueError("strides and dilations must have equal length")


TRICK_ROWS = {
    "original": BackboneTrickConfig(2, (1, 2, 2, 2), (1, 1, 1, 1)),
    "segmentation": BackboneTrickConfig(2, (1, 2, 1, 1), (1, 1, 2, 4)),
    "edge": BackboneTrickConfig(1, (1, 2, 2, 1), (2, 2, 2, 4)),
}


def _resolve(specs: Sequence[StageSpec], ref: StageRef) -> int:
    """Position in ``specs`` of a 1-based index or stage name."""
    for pos, s in enumerate(specs):
        if (isinstance(ref, int) and s.index == ref) or (isinstance(ref, str) and s.name == ref):
            return pos
    raise KeyError(f"stage {ref!r} does not exist; have {[(s.index, s.name) for s in specs]}")


def resolve_taps(specs: Sequence[StageSpec], taps: SideTapSpec) -> list:
    """Map every selection to stage positions, validating the side layout."""
    positions = [[_resolve(specs, r) for r in sel] for sel in taps.selections]
    res = [max(specs[p].resolution for p in sel) for sel in positions]
    if any(r > res[0] for r in res[1:]):
        raise ValueError(f"first binary side must have the largest resolution, got {res}")
    deepest = max(p for sel in positions for p in sel)
    if deepest not in positions[-1]:
        raise ValueError("semantic side must contain the deepest selected stage")
    return positions


def gather_sides(feats, positions) -> list:
    """Side features for resolved selections; groups are bilinearly resized to
    their largest member and concatenated along channels."""
    sides = []
    for sel in positions:
        parts = []
        for p in sel:
            f = feats[p]
            parts.extend(f if isinstance(f, (list, tuple)) else [f])
        size = max((t.shape[-2:] for t in parts), key=lambda s: s[0] * s[1])
        parts = [t if t.shape[-2:] == size else
                 F.interpolate(t, size=size, mode="bilinear", align_corners=False)
                 for t in parts]
        sides.append(parts[0] if len(parts) == 1 else torch.cat(parts, dim=1))
    return sides


def side_channels(specs: Sequence[StageSpec], positions) -> list:
    return [sum(specs[p].channels for p in sel) for sel in positions]


class TappedBackbone(nn.Module):
    """Backbone plus read-only side taps.

    ``forward`` returns ``(final_features, side_features)``; the final features
    are exactly what the bare backbone would hand to the segmentation head.
    """

    def __init__(self, backbone: nn.Module, taps: SideTapSpec):
        super().__init__()
        self.backbone = backbone
        self.taps = taps
        self.positions = resolve_taps(backbone.stage_specs, taps)

    @property
    def side_channels(self) -> list:
        return side_channels(self.backbone.stage_specs, self.positions)

    @property
    def side_resolutions(self) -> list:
        specs = self.backbone.stage_specs
        return [max(specs[p].resolution for p in sel) for sel in self.positions]

    def forward(self, x):
        feats = self.backbone(x)
        return feats[self.backbone.out_index], gather_sides(feats, self.positions)


def register_taps(backbone: nn.Module, taps: SideTapSpec | Sequence) -> TappedBackbone:
    if not isinstance(taps, SideTapSpec):
        taps = SideTapSpec.from_sides(taps)
    return TappedBackbone(backbone, taps)


class ConvNormAct(nn.Sequential):
    def __init__(self, in_ch, out_ch, kernel_size=3, stride=1, dilation=1):
        padding = dilation * (kernel_size // 2)
        super().__init__(
            nn.Conv2d(in_ch, out_ch, kernel_size, stride, padding, dilation=dilation, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )


class ToyBackbone(nn.Module):
    """Small conv pyramid with the ResNet stage layout.

    Side 1 is the stem, followed by a stride-2 max-pool and one stage per
    remaining entry of ``stage_channels``.  Stage strides and dilations are
    reconfigurable in place, which is what the backbone trick rewrites.
    """

    def __init__(self, stage_channels=(16, 32, 64, 128, 128), in_channels=3, blocks=1,
                 trick: BackboneTrickConfig | str = "original"):
        super().__init__()
        if len(stage_channels) < 2:
            raise ValueError("need at least two stages")
        self.stage_channels = tuple(stage_channels)
        self.in_channels = in_channels
        self.blocks = blocks
        self.stem = ConvNormAct(in_channels, stage_channels[0], stride=2)
        self.pool = nn.MaxPool2d(3, stride=2, padding=1)
        self.stages = nn.ModuleList()
        prev = stage_channels[0]
        for ch in stage_channels[1:]:
            layers = [ConvNormAct(prev, ch)] + [ConvNormAct(ch, ch) for _ in range(blocks - 1)]
            self.stages.append(nn.Sequential(*layers))
            prev = ch
        self.out_index = len(stage_channels) - 1
        n = len(self.stages)
        self.configure_strides(2, (1,) + (2,) * (n - 1), (1,) * n)
        if trick is not None:
            cfg = TRICK_ROWS[trick] if isinstance(trick, str) else trick
            if len(cfg.strides) == n:
                self.configure_strides(cfg.stem_stride, cfg.strides, cfg.dilations)
            elif not isinstance(trick, str):
                raise ValueError(f"trick has {len(cfg.strides)} stages, backbone has {n}")

    def configure_strides(self, stem_stride, strides, dilations):
        n = len(self.stages)
        if len(strides) != n or len(dilations) != n:
            raise ValueError(f"expected {n} strides and dilations, got {len(strides)}/{len(dilations)}")
        self.stem[0].stride = (stem_stride, stem_stride)
        for stage, s, d in zip(self.stages, strides, dilations):
            for i, block in enumerate(stage):
                conv = block[0]
                conv.stride = (s, s) if i == 0 else (1, 1)
                conv.dilation = (d, d)
                conv.padding = (d, d)
        self.trick = BackboneTrickConfig(stem_stride, tuple(strides), tuple(dilations))

    @property
    def stage_specs(self) -> list:
        res = Fraction(1, self.trick.stem_stride)
        specs = [StageSpec(1, self.stage_channels[0], res, "stem")]
        res /= 2
        for i, (ch, s) in enumerate(zip(self.stage_channels[1:], self.trick.strides)):
            res /= s
            specs.append(StageSpec(i + 2, ch, res, f"stage{i + 1}"))
        return specs

    def forward(self, x):
        x = self.stem(x)
        feats = [x]
        x = self.pool(x)
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def toy_backbone(stage_channels=(16, 32, 64, 128, 128), input_channels=3, seed=None, blocks=1,
                 trick="original") -> ToyBackbone:
    if seed is None:
        return ToyBackbone(stage_channels, input_channels, blocks, trick)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return ToyBackbone(stage_channels, input_channels, blocks, trick)


def apply_backbone_trick(backbone: nn.Module, cfg: BackboneTrickConfig | str) -> nn.Module:
    """Return a copy of ``backbone`` with the given stem stride and per-stage
    strides/dilations.  Only hyper-parameters change, never the weights."""
    if isinstance(cfg, str):
        cfg = TRICK_ROWS[cfg]
    if not hasattr(backbone, "configure_strides"):
        raise TypeError(f"{type(backbone).__name__} does not expose configure_strides()")
    out = copy.deepcopy(backbone)
    out.configure_strides(cfg.stem_stride, cfg.strides, cfg.dilations)
    return out


def load_pretrained(backbone: nn.Module, path, strict: bool = False):
    """Load backbone weights from a state-dict file; returns the missing/unexpected keys."""
    state = torch.load(path, map_location="cpu", weights_only=True)
    if "state_dict" in state:
        state = state["state_dict"]
    return backbone.load_state_dict(state, strict=strict)


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
