"""Joint objective: segmentation CE plus weighted boundary BCE terms.

    total = seg_ce + alpha * sum(sbd terms) + beta * sum(binary terms) [+ aux_weight * aux_ce]
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F


@dataclass
class LossWeights:
    alpha: float = 5.0
    beta: float = 1.0
    aux: float = 0.4

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.aux < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    total: torch.Tensor
    seg_ce: torch.Tensor
    sbd_bce: list = field(default_factory=list)
    bdry_bce: list = field(default_factory=list)
    aux_ce: torch.Tensor | None = None
    weights: LossWeights = field(default_factory=LossWeights)
    flags: set = field(default_factory=set)

    def recompose(self) -> torch.Tensor:
        total = self.seg_ce + self.weights.alpha * sum(self.sbd_bce, 0.0)
        total = total + self.weights.beta * sum(self.bdry_bce, 0.0)
        if self.aux_ce is not None:
            total = total + self.weights.aux * self.aux_ce
        return total

    def as_dict(self) -> dict:
        d = {"total": float(self.total.detach()), "seg_ce": float(self.seg_ce.detach()),
             "sbd_bce": [float(t.detach()) for t in self.sbd_bce],
             "bdry_bce": [float(t.detach()) for t in self.bdry_bce]}
        if self.aux_ce is not None:
            d["aux_ce"] = float(self.aux_ce.detach())
        if self.flags:
            d["flags"] = sorted(self.flags)
        return d


def seg_cross_entropy(logits, labels, ignore_index=255, flags: set | None = None):
    """Mean per-pixel CE over non-ignored pixels; 0 (flagged) if every pixel is ignored."""
    if logits.shape[0] != labels.shape[0] or logits.shape[-2:] != labels.shape[-2:]:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} disagree")
    labels = labels.long()
    if not (labels != ignore_index).any():
        if flags is not None:
            flags.add("all_ignored")
        return logits.sum() * 0.0
    return F.cross_entropy(logits, labels, ignore_index=ignore_index)


def balanced_multilabel_bce(logits, targets, valid=None, flags: set | None = None):
    """Class-balanced multi-label BCE, balanced per image.

    With ``rho`` the fraction of positive entries among the valid entries of an
    image, positives are weighted ``1 - rho`` and negatives ``rho``; the loss is
    the mean over all valid entries of the batch.  An image with ``rho`` of 0
    or 1 falls back to unweighted BCE (flag ``unbalanced``).

    ``valid`` is an optional ``B x H x W`` mask broadcast over categories.
    """
    if logits.shape != targets.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and targets {tuple(targets.shape)} disagree")
    targets = targets.to(logits.dtype)
    B = logits.shape[0]
    if valid is None:
        mask = torch.ones_like(targets)
    else:
        mask = valid.to(logits.dtype).unsqueeze(1).expand_as(targets)
    n = mask.reshape(B, -1).sum(1)
    if not (n > 0).any():
        if flags is not None:
            flags.add("all_ignored")
        return logits.sum() * 0.0
    pos = (targets * mask).reshape(B, -1).sum(1)
    rho = torch.where(n > 0, pos / n.clamp(min=1), torch.zeros_like(n))
    degenerate = (rho <= 0) | (rho >= 1)
    if degenerate.any() and flags is not None:
        flags.add("unbalanced")
    shape = (B,) + (1,) * (logits.dim() - 1)
    w_pos = torch.where(degenerate, torch.ones_like(rho), 1 - rho).view(shape)
    w_neg = torch.where(degenerate, torch.ones_like(rho), rho).view(shape)
    weight = (targets * w_pos + (1 - targets) * w_neg) * mask
    bce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    return (weight * bce).sum() / mask.sum()


def total_loss(seg_logits, head_out, labels, boundaries=None, binary_boundary=None,
               weights: LossWeights | None = None, ignore_index=255, aux_logits=None,
               mask_ignore=True) -> LossReport:
    """Assemble the joint objective for whatever the head produced.

    ``boundaries`` (B x N_cat x H x W) supervise every member of ``head_out.sbd``;
    ``binary_boundary`` (B x H x W) supervises ``head_out.binary_side_logits``.
    A single-channel head (binary boundary conditioning) is supervised with the
    binary map.
    """
    weights = weights or LossWeights()
    flags: set = set()
    seg = seg_cross_entropy(seg_logits, labels, ignore_index, flags)
    valid = (labels != ignore_index) if mask_ignore else None
    sbd, bdry = [], []
    if head_out is not None:
        members = head_out.sbd
        sbd_target = boundaries
        if members[0].shape[1] == 1:
            if binary_boundary is None:
                raise ValueError("single-channel head needs binary boundary targets")
            sbd_target = binary_boundary.unsqueeze(1)
        elif boundaries is None:
            raise ValueError("semantic boundary targets are required for the SBD head")
        sbd = [balanced_multilabel_bce(m, sbd_target, valid, flags) for m in members]
        if head_out.binary_side_logits:
            if binary_boundary is None:
                raise ValueError("binary boundary targets are required for deeply supervised sides")
            tgt = binary_boundary.unsqueeze(1)
            bdry = [balanced_multilabel_bce(b, tgt, valid, flags) for b in head_out.binary_side_logits]
    aux = None
    if aux_logits is not None:
        aux = seg_cross_entropy(aux_logits, labels, ignore_index, flags)
    report = LossReport(seg, seg, sbd, bdry, aux, weights, flags)
    report.total = report.recompose()
    return report
