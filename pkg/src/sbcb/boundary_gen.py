"""On-the-fly semantic boundary generation from segmentation masks.

Boundaries are produced from exact Euclidean distance transforms: for every
category the label map is split into an inner set (pixels of that category)
and an outer set (every other non-ignore pixel).  A pixel belongs to the
category's boundary when the nearest pixel of opposite membership lies within
``radius``.  Because the band is defined in output pixels, generating after a
geometric transform keeps the band width constant regardless of rescaling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np

__all__ = [
    "BoundaryGenConfig",
    "distance_to_opposite",
    "category_boundary",
    "semantic_boundaries",
    "binary_boundaries",
    "rescale_nearest",
]

# label maps are processed in tiles with a halo of ceil(radius); a band pixel
# only depends on pixels inside its radius so the result is exact.
_TILE = 48


@dataclass(frozen=True)
class BoundaryGenConfig:
    radius: float = 2
    instance_sensitive: bool = False
    ignore_index: int = 255
    image_border_is_boundary: bool = False

    def __post_init__(self):
        if not 1 <= self.radius < 500:
            raise ValueError(f"radius must be in [1, 500), got {self.radius}")


def _distance(target: np.ndarray) -> np.ndarray:
    """Euclidean distance (float32) from each pixel to the nearest True pixel."""
    if not target.any():
        return np.full(target.shape, np.inf, dtype=np.float32)
    return cv2.distanceTransform(np.logical_not(target).view(np.uint8), cv2.DIST_L2,
                                 cv2.DIST_MASK_PRECISE)


def _cutoff(radius):
    """Threshold on float32 distances equivalent to exact ``d <= radius``.

    Squared pixel distances are integers, so ``d <= radius`` holds iff
    ``d <= sqrt(floor(radius**2))``; the float32 error (< 1e-5) is far below
    the gap to the next admissible distance for any radius under 500 px.
    """
    if radius >= 500:
        raise ValueError("radius must be below 500 px")
    return math.sqrt(math.floor(radius * radius)) + 1e-3


def distance_to_opposite(mask, valid=None, image_border_is_boundary=False):
    """Unsigned distance from every pixel to the nearest pixel of opposite membership.

    Inside pixels get the distance to the nearest valid outside pixel and
    outside pixels the distance to the nearest inside pixel.  Pixels where
    ``valid`` is False belong to neither set and get ``inf``.  With
    ``image_border_is_boundary`` the ring just beyond the raster counts as
    outside.
    """
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    valid = np.ones_like(mask) if valid is None else np.asarray(valid).astype(bool)
    inner = mask & valid
    outer = ~mask & valid
    if image_border_is_boundary:
        inner = np.pad(inner, 1, constant_values=False)
        outer = np.pad(outer, 1, constant_values=True)
    d = np.full(inner.shape, np.inf, dtype=np.float32)
    d[inner] = _distance(outer)[inner]
    d[outer] = _distance(inner)[outer]
    if image_border_is_boundary:
        d = d[1:-1, 1:-1]
    # snap to the exact root of the integer squared distance
    return np.sqrt(np.rint(d.astype(np.float64) ** 2))


def _band(inner, valid, radius):
    outer = ~inner & valid
    d = np.where(inner, _distance(outer), _distance(inner))
    return (d <= _cutoff(radius)) & valid


def _category_band(labels, instances, category, radius, ignore_index):
    valid = labels != ignore_index
    inner = labels == category
    band = _band(inner, valid, radius)
    if instances is not None:
        ids = np.unique(instances[inner])
        for k in ids[ids != 0]:
            band |= _band(inner & (instances == k), valid, radius)
    return band


def _region_bands(labels, instances, values, radius, ignore_index):
    """Bands of every value present in a region from one distance map per value.

    Each valid pixel has exactly one zero entry in the per-value stack (its own
    value), so the minimum over the non-zero entries is its distance to the
    nearest different valid label.
    """
    cut = _cutoff(radius)
    valid = labels != ignore_index
    stack = np.stack([_distance(labels == v) for v in values])
    near_other = np.where(stack == 0, np.inf, stack).min(axis=0) <= cut
    bands = {}
    for i, v in enumerate(values):
        inner = labels == v
        band = np.where(inner, near_other, stack[i] <= cut) & valid
        if instances is not None:
            ids = np.unique(instances[inner])
            for k in ids[ids != 0]:
                band |= _band(inner & (instances == k), valid, radius)
        bands[int(v)] = band
    return bands


def _check(labels, instances, cfg, num_categories=None):
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.size == 0:
        raise ValueError(f"labels must be a non-empty 2-D raster, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise TypeError(f"labels must be integer-valued, got {labels.dtype}")
    labels = labels.astype(np.int64)
    if num_categories is not None:
        bad = (labels != cfg.ignore_index) & ((labels < 0) | (labels >= num_categories))
        if bad.any():
            raise ValueError(
                f"label values {np.unique(labels[bad])[:8].tolist()} outside [0, {num_categories})"
            )
    if cfg.instance_sensitive and instances is None:
        raise ValueError("instance_sensitive boundaries requested but no instance map given")
    if instances is not None:
        instances = np.asarray(instances)
        if instances.shape != labels.shape:
            raise ValueError(f"instance map shape {instances.shape} != label shape {labels.shape}")
        instances = instances.astype(np.int64)
    return labels, instances


def category_boundary(labels, category, cfg=None, instances=None):
    """Binary H x W boundary band of one category.

    Instances (ids > 0) of the category each contribute their own band, so
    touching instances of the same category are separated.  An absent
    category yields an all-zero map.
    """
    cfg = cfg or BoundaryGenConfig()
    labels, instances = _check(labels, instances, cfg)
    if not cfg.instance_sensitive:
        instances = None
    if cfg.image_border_is_boundary:
        sentinel = _outside_value(labels, cfg.ignore_index)
        labels = np.pad(labels, 1, constant_values=sentinel)
        if instances is not None:
            instances = np.pad(instances, 1, constant_values=0)
        band = _category_band(labels, instances, category, cfg.radius, cfg.ignore_index)
        return band[1:-1, 1:-1].astype(np.uint8)
    return _category_band(labels, instances, category, cfg.radius, cfg.ignore_index).astype(np.uint8)


def _outside_value(labels, ignore_index):
    # a valid label that matches no category
    return int(min(labels.min(), ignore_index, 0)) - 1


def semantic_boundaries(labels, num_categories, cfg=None, instances=None):
    """Generate the ``num_categories x H x W`` semantic boundary tensor (uint8).

    Channel ``c`` equals ``category_boundary(labels, c, cfg, instances)``;
    channels may overlap.  Pixels with ``cfg.ignore_index`` never carry a
    boundary.
    """
    cfg = cfg or BoundaryGenConfig()
    labels, instances = _check(labels, instances, cfg, num_categories)
    if not cfg.instance_sensitive:
        instances = None
    H, W = labels.shape
    out = np.zeros((num_categories, H, W), dtype=np.uint8)

    off = 0
    if cfg.image_border_is_boundary:
        off = 1
        labels = np.pad(labels, 1, constant_values=_outside_value(labels, cfg.ignore_index))
        if instances is not None:
            instances = np.pad(instances, 1, constant_values=0)
    halo = int(math.ceil(cfg.radius))
    PH, PW = labels.shape

    for y0 in range(0, H, _TILE):
        y1 = min(y0 + _TILE, H)
        ry0, ry1 = max(y0 + off - halo, 0), min(y1 + off + halo, PH)
        for x0 in range(0, W, _TILE):
            x1 = min(x0 + _TILE, W)
            rx0, rx1 = max(x0 + off - halo, 0), min(x1 + off + halo, PW)
            reg = labels[ry0:ry1, rx0:rx1]
            valid = reg != cfg.ignore_index
            values = np.unique(reg[valid])
            inst = None
            if instances is not None:
                inst = instances[ry0:ry1, rx0:rx1]
                uniform = len(values) <= 1 and len(np.unique(inst[valid])) <= 1
            else:
                uniform = len(values) <= 1
            if uniform:
                continue
            cy, cx = y0 + off - ry0, x0 + off - rx0
            bands = _region_bands(reg, inst, values, cfg.radius, cfg.ignore_index)
            for c, band in bands.items():
                if 0 <= c < num_categories:
                    out[c, y0:y1, x0:x1] = band[cy:cy + y1 - y0, cx:cx + x1 - x0]
    return out


def binary_boundaries(labels, cfg=None, instances=None, num_categories=None):
    """Category-agnostic H x W boundary: the channel-wise OR of the semantic tensor."""
    cfg = cfg or BoundaryGenConfig()
    labels = np.asarray(labels)
    if num_categories is None:
        valid = labels[labels != cfg.ignore_index]
        num_categories = int(valid.max()) + 1 if valid.size else 1
    sem = semantic_boundaries(labels, num_categories, cfg, instances)
    return sem.any(axis=0).astype(np.uint8)


def rescale_nearest(arr, scale=None, size=None):
    """Nearest-neighbour resize over the last two axes.

    Sampling uses pixel centres, ``src = floor((dst + 0.5) * in / out)``, so
    no new values are ever introduced.
    """
    arr = np.asarray(arr)
    H, W = arr.shape[-2:]
    if size is None:
        if scale is None:
            raise ValueError("either scale or size is required")
        sy, sx = (scale, scale) if np.isscalar(scale) else scale
        size = (max(1, int(round(H * sy))), max(1, int(round(W * sx))))
    oh, ow = size
    rows = np.minimum(((np.arange(oh) + 0.5) * H / oh).astype(np.int64), H - 1)
    cols = np.minimum(((np.arange(ow) + 0.5) * W / ow).astype(np.int64), W - 1)
    return arr[..., rows[:, None], cols[None, :]]
