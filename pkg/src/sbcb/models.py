"""Segmentation model with an optional, discardable SBD head."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import SideTapSpec, gather_sides, resolve_taps, side_channels
from .fusion import ChannelMerge, MergeConfig, TwoStreamMerge
from .sbd_heads import FCNHead, HeadConfig, HeadOutputs, SBDHead


@dataclass
class ModelOutputs:
    seg_logits: torch.Tensor
    head: HeadOutputs | None = None
    aux_logits: torch.Tensor | None = None


class SegmentationModel(nn.Module):
    """Backbone + segmentation head, plus training-time extras.

    The SBD head reads side features through taps and never writes back into
    the backbone, so dropping ``sbd_head`` (and ``aux_head``) leaves the
    segmentation path untouched unless a fusion module couples the two heads.
    """

    def __init__(self, backbone, seg_head, taps: SideTapSpec | None = None,
                 sbd_head: SBDHead | None = None, aux_head: FCNHead | None = None,
                 aux_index: int | None = None, fusion: nn.Module | None = None):
        super().__init__()
        self.backbone = backbone
        self.seg_head = seg_head
        self.sbd_head = sbd_head
        self.aux_head = aux_head
        self.fusion = fusion
        self.taps = taps
        self.aux_index = aux_index
        self.tap_positions = None
        if sbd_head is not None:
            if taps is None:
                raise ValueError("an SBD head needs a SideTapSpec")
            self.tap_positions = resolve_taps(backbone.stage_specs, taps)
        if fusion is not None and sbd_head is None:
            raise ValueError("fusion requires an SBD head")

    @property
    def fusion_mode(self) -> str | None:
        if isinstance(self.fusion, ChannelMerge):
            return "channel_merge"
        if isinstance(self.fusion, TwoStreamMerge):
            return "two_stream"
        return None

    def forward(self, x) -> ModelOutputs:
        size = tuple(x.shape[-2:])
        feats = self.backbone(x)
        final = feats[self.backbone.out_index]
        aux = None
        if self.aux_head is not None:
            aux = self.aux_head(feats[self.aux_index], size)
        if self.sbd_head is None:
            return ModelOutputs(self.seg_head(final, size), None, aux)

        projected = self.sbd_head.project(gather_sides(feats, self.tap_positions))
        if isinstance(self.fusion, ChannelMerge):
            projected, head_feat = self.fusion(projected, self.seg_head.features(final))
            seg = self.seg_head.classify(head_feat, size)
            head = self.sbd_head.decode(projected, size)
        elif isinstance(self.fusion, TwoStreamMerge):
            head = self.sbd_head.decode(projected, size)
            seg = self.seg_head(self.fusion(head.fuse_logits, final), size)
        else:
            seg = self.seg_head(final, size)
            head = self.sbd_head.decode(projected, size)
        return ModelOutputs(seg, head, aux)

    def baseline(self) -> "SegmentationModel":
        """Backbone + segmentation head only, sharing this model's modules."""
        if self.fusion is not None:
            raise ValueError(f"fusion mode {self.fusion_mode!r} makes the segmentation head "
                             "depend on the SBD head; it cannot be discarded")
        return SegmentationModel(self.backbone, self.seg_head)


def build_model(backbone, num_classes, taps: SideTapSpec | None = None, head: HeadConfig | None = None,
                seg_channels=64, aux: bool = False, aux_stage: int = 4, aux_channels=64,
                merge: MergeConfig | None = None, head_seed: int | None = None) -> SegmentationModel:
    """Assemble a model around an existing backbone.

    The segmentation head is created first from the global RNG; the SBD head,
    auxiliary head and fusion modules are initialised under ``head_seed`` in a
    forked RNG so the baseline parameters are identical with or without them.
    """
    merge = merge or MergeConfig()
    specs = backbone.stage_specs
    final_ch = specs[backbone.out_index].channels
    extra_in = 0
    if merge.mode == "two_stream":
        extra_in = merge.proj_channels or (head.out_categories if head else num_classes)
    seg_head = FCNHead(final_ch, num_classes, seg_channels, extra_in=extra_in)
    if head is None and not aux:
        return SegmentationModel(backbone, seg_head)

    with torch.random.fork_rng():
        if head_seed is not None:
            torch.manual_seed(head_seed)
        sbd = fusion = aux_head = None
        aux_index = None
        if head is not None:
            if taps is None:
                raise ValueError("taps are required with an SBD head")
            chans = side_channels(specs, resolve_taps(specs, taps))
            head = HeadConfig(head.variant, head.num_categories, tuple(chans), head.dff_hidden)
            sbd = SBDHead(head)
            if merge.mode == "channel_merge":
                outs = [1] * (len(chans) - 1) + [head.out_categories]
                fusion = ChannelMerge(outs, seg_channels, merge.mix_layers, merge.mix_channels)
            elif merge.mode == "two_stream":
                fusion = TwoStreamMerge(head.out_categories, merge.proj_channels)
        if aux:
            aux_index = next(i for i, s in enumerate(specs) if s.index == aux_stage)
            aux_head = FCNHead(specs[aux_index].channels, num_classes, aux_channels)
    return SegmentationModel(backbone, seg_head, taps if sbd else None, sbd, aux_head, aux_index, fusion)
