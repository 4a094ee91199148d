"""Segmentation and boundary metrics.

* mIoU from a confusion matrix.
* Trimap boundary F-score: boundary pixels of each category mask are matched
  to the other side's boundary within a pixel tolerance.
* mF at ODS for semantic boundary detection, with thinning and greedy
  one-to-one matching.  The greedy matcher processes candidate pairs in order
  of increasing distance, which makes the matched count non-decreasing in the
  tolerance.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from skimage.morphology import thin

from .boundary_gen import _cutoff, _distance


class ConfusionMatrix:
    def __init__(self, num_classes, ignore_index=255):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred, gt):
        pred = np.asarray(pred).ravel()
        gt = np.asarray(gt).ravel()
        if pred.shape != gt.shape:
            raise ValueError("prediction and ground truth differ in size")
        keep = gt != self.ignore_index
        pred, gt = pred[keep].astype(np.int64), gt[keep].astype(np.int64)
        if pred.size and (pred.min() < 0 or pred.max() >= self.num_classes):
            raise ValueError("prediction outside the category range")
        self.counts += np.bincount(gt * self.num_classes + pred,
                                   minlength=self.num_classes ** 2).reshape(self.counts.shape)
        return self

    def merge(self, other: "ConfusionMatrix"):
        self.counts += other.counts
        return self

    def iou(self):
        """Per-category IoU (NaN where the category is absent from both pred and GT)."""
        tp = np.diag(self.counts).astype(np.float64)
        denom = self.counts.sum(0) + self.counts.sum(1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, tp / denom, np.nan)


def miou(preds, labels, num_classes, ignore_index=255):
    """Return ``(per_category_iou, mean_iou)`` over one map or a list of maps."""
    cm = ConfusionMatrix(num_classes, ignore_index)
    if isinstance(preds, np.ndarray) and preds.ndim == 2:
        preds, labels = [preds], [labels]
    for p, g in zip(preds, labels):
        cm.update(p, g)
    iou = cm.iou()
    return iou, float(np.nanmean(iou)) if np.isfinite(iou).any() else float("nan")


@dataclass
class BoundaryFScoreConfig:
    trimap_width: float = 3

    def __post_init__(self):
        if self.trimap_width < 1:
            raise ValueError("trimap_width must be >= 1")


def mask_boundary(mask):
    """Interior 1-px boundary: mask pixels with a 4-neighbour outside the mask."""
    mask = np.asarray(mask, bool)
    p = np.pad(mask, 1, mode="edge")
    inner = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return mask & ~inner


def _within(src, dst, width):
    """Count pixels of ``src`` within ``width`` of some pixel of ``dst``."""
    if not src.any() or not dst.any():
        return 0
    return int((_distance(dst)[src] <= _cutoff(width)).sum())


def _f(p_hit, p_total, r_hit, r_total):
    if p_total == 0 and r_total == 0:
        return 1.0
    if p_total == 0 or r_total == 0:
        return 0.0
    prec, rec = p_hit / p_total, r_hit / r_total
    return 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)


class BoundaryFScore:
    """Dataset-level boundary F-score per category.

    Counts are accumulated over images, then precision, recall and F are
    formed per category.  Categories with no boundary pixel on either side
    score 1 but are left out of the mean.
    """

    def __init__(self, num_classes, cfg: BoundaryFScoreConfig | None = None, ignore_index=255):
        self.num_classes = num_classes
        self.cfg = cfg or BoundaryFScoreConfig()
        self.ignore_index = ignore_index
        # pred matched, pred total, gt matched, gt total
        self.counts = np.zeros((num_classes, 4), dtype=np.int64)

    def update(self, pred, gt):
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError("prediction and ground truth differ in shape")
        valid = gt != self.ignore_index
        # ignore pixels copy the GT so both sides see the same ignore interface
        pred = np.where(valid, pred, gt)
        for c in range(self.num_classes):
            pb = mask_boundary(pred == c) & valid
            gb = mask_boundary(gt == c) & valid
            if not pb.any() and not gb.any():
                continue
            w = self.cfg.trimap_width
            self.counts[c] += (_within(pb, gb, w), int(pb.sum()), _within(gb, pb, w), int(gb.sum()))
        return self

    def scores(self):
        f = np.array([_f(*row) for row in self.counts])
        present = (self.counts[:, 1] + self.counts[:, 3]) > 0
        mean = float(f[present].mean()) if present.any() else 1.0
        return f, mean


def boundary_fscore(pred, gt, num_classes, cfg: BoundaryFScoreConfig | None = None, ignore_index=255):
    """Per-category F and their mean for one label map (or a list of maps)."""
    acc = BoundaryFScore(num_classes, cfg, ignore_index)
    if isinstance(pred, np.ndarray) and pred.ndim == 2:
        pred, gt = [pred], [gt]
    for p, g in zip(pred, gt):
        acc.update(p, g)
    return acc.scores()


@dataclass
class ODSConfig:
    thresholds: tuple = field(default_factory=lambda: tuple(np.round(np.linspace(0.01, 0.99, 99), 2)))
    match_tolerance: float = 2.0
    thinning: bool = True

    def __post_init__(self):
        t = np.asarray(self.thresholds, float)
        if t.size == 0 or np.any(np.diff(t) <= 0) or t.min() <= 0 or t.max() >= 1:
            raise ValueError("thresholds must be strictly increasing inside (0, 1)")


def match_boundaries(pred, gt, tolerance):
    """Greedy one-to-one matching of boundary pixels within ``tolerance``.

    Returns the number of matched pairs.  Candidate pairs are visited by
    increasing distance (ties by pixel order), each pixel used at most once.
    """
    py, px = np.nonzero(pred)
    gy, gx = np.nonzero(gt)
    if len(py) == 0 or len(gy) == 0:
        return 0
    pts_p = np.stack([py, px], 1).astype(float)
    pts_g = np.stack([gy, gx], 1).astype(float)
    pairs = cKDTree(pts_p).sparse_distance_matrix(cKDTree(pts_g), tolerance + 1e-9, output_type="ndarray")
    if len(pairs) == 0:
        return 0
    order = np.lexsort((pairs["j"], pairs["i"], pairs["v"]))
    used_p = np.zeros(len(py), bool)
    used_g = np.zeros(len(gy), bool)
    matched = 0
    for i, j in zip(pairs["i"][order], pairs["j"][order]):
        if not used_p[i] and not used_g[j]:
            used_p[i] = used_g[j] = True
            matched += 1
    return matched


class ODSAccumulator:
    """Accumulates per-threshold, per-category TP/FP/FN over a dataset."""

    def __init__(self, num_classes, cfg: ODSConfig | None = None):
        self.cfg = cfg or ODSConfig()
        self.num_classes = num_classes
        T = len(self.cfg.thresholds)
        self.tp = np.zeros((T, num_classes), np.int64)
        self.n_pred = np.zeros((T, num_classes), np.int64)
        self.n_gt = np.zeros((T, num_classes), np.int64)
        self.images = 0

    def update(self, probs, gt):
        probs = np.asarray(probs, float)
        gt = np.asarray(gt).astype(bool)
        if probs.shape != gt.shape or probs.shape[0] != self.num_classes:
            raise ValueError(f"probabilities {probs.shape} and GT {gt.shape} disagree")
        if probs.min() < 0 or probs.max() > 1:
            raise ValueError("probabilities must lie in [0, 1]")
        for c in range(self.num_classes):
            g = thin(gt[c]) if self.cfg.thinning else gt[c]
            for t, th in enumerate(self.cfg.thresholds):
                p = probs[c] >= th
                if self.cfg.thinning and p.any():
                    p = thin(p)
                self.tp[t, c] += match_boundaries(p, g, self.cfg.match_tolerance)
                self.n_pred[t, c] += int(p.sum())
                self.n_gt[t, c] += int(g.sum())
        self.images += 1
        return self

    def scores(self):
        """``(mF, per-category max F, per-category best threshold)``.

        Categories without any GT boundary in the dataset are NaN and excluded.
        """
        if self.images == 0:
            raise ValueError("no images accumulated")
        tp, npred, ngt = self.tp, self.n_pred, self.n_gt
        with np.errstate(invalid="ignore", divide="ignore"):
            prec = np.where(npred > 0, tp / np.maximum(npred, 1), 0.0)
            rec = np.where(ngt > 0, tp / np.maximum(ngt, 1), 0.0)
            f = np.where(prec + rec > 0, 2 * prec * rec / np.maximum(prec + rec, 1e-12), 0.0)
        best = f.max(0)
        best_t = np.asarray(self.cfg.thresholds)[f.argmax(0)]
        has_gt = ngt[0] > 0
        best = np.where(has_gt, best, np.nan)
        mf = float(np.nanmean(best)) if has_gt.any() else float("nan")
        return mf, best, best_t


def sbd_max_fscore_ods(prob_maps, gts, cfg: ODSConfig | None = None):
    """mF (ODS) over a dataset of ``N_cat x H x W`` probability maps."""
    prob_maps, gts = list(prob_maps), list(gts)
    if not prob_maps:
        raise ValueError("empty dataset")
    acc = ODSAccumulator(np.asarray(prob_maps[0]).shape[0], cfg)
    for p, g in zip(prob_maps, gts):
        acc.update(p, g)
    return acc.scores()


def error_map(pred, gt, ignore_index=255):
    """uint8 raster: 255 where the prediction disagrees with non-ignored GT."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    return (((pred != gt) & (gt != ignore_index)) * 255).astype(np.uint8)
