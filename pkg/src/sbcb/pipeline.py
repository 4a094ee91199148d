"""Datasets, augmentation and on-the-fly boundary targets.

Boundary targets are always generated *after* the geometric transforms, from
the transformed label map, so the band width is the configured radius in
output pixels whatever the random scale.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.v2.functional as TF
from PIL import Image, UnidentifiedImageError
from skimage import draw

from .boundary_gen import BoundaryGenConfig, rescale_nearest, semantic_boundaries

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
MEAN = (0.485, 0.456, 0.406)
STD = (0.229, 0.224, 0.225)


@dataclass
class Sample:
    image: np.ndarray
    labels: np.ndarray
    instances: np.ndarray | None = None
    boundaries: np.ndarray | None = None
    binary_boundary: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"{self.name or 'sample'}: image must be 3 x H x W, got {self.image.shape}")
        hw = self.image.shape[1:]
        for attr in ("labels", "instances", "binary_boundary"):
            a = getattr(self, attr)
            if a is not None and a.shape != hw:
                raise ValueError(f"{self.name or 'sample'}: {attr} shape {a.shape} != image {hw}")
        if self.boundaries is not None and self.boundaries.shape[1:] != hw:
            raise ValueError(f"{self.name or 'sample'}: boundaries shape {self.boundaries.shape} != image {hw}")


@dataclass
class AugmentConfig:
    scale_range: tuple = (0.5, 2.0)
    crop: tuple | None = (512, 1024)
    hflip: float = 0.5
    photometric: bool = True
    brightness: float = 32 / 255
    contrast: tuple = (0.5, 1.5)
    saturation: tuple = (0.5, 1.5)
    hue: float = 0.1

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid scale_range {self.scale_range}")
        if self.crop is not None:
            self.crop = tuple(int(c) for c in self.crop)
            if min(self.crop) < 1:
                raise ValueError(f"invalid crop {self.crop}")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(scale_range=(1.0, 1.0), crop=None, hflip=0.0, photometric=False)


def attach_boundaries(sample: Sample, num_categories, cfg: BoundaryGenConfig) -> Sample:
    sem = semantic_boundaries(sample.labels, num_categories, cfg,
                              sample.instances if cfg.instance_sensitive else None)
    return replace(sample, boundaries=sem, binary_boundary=sem.any(0).astype(np.uint8))


def _resize_image(image, size):
    t = torch.from_numpy(np.ascontiguousarray(image)).unsqueeze(0)
    return F.interpolate(t, size=size, mode="bilinear", align_corners=False)[0].numpy()


def _photometric(image, cfg: AugmentConfig, rng):
    img = torch.from_numpy(np.ascontiguousarray(image))
    if rng.random() < 0.5:
        img = img + float(rng.uniform(-cfg.brightness, cfg.brightness))
    contrast_first = rng.random() < 0.5
    if contrast_first and rng.random() < 0.5:
        img = TF.adjust_contrast(img.clamp(0, 1), float(rng.uniform(*cfg.contrast)))
    if rng.random() < 0.5:
        img = TF.adjust_saturation(img.clamp(0, 1), float(rng.uniform(*cfg.saturation)))
    if rng.random() < 0.5:
        img = TF.adjust_hue(img.clamp(0, 1), float(rng.uniform(-cfg.hue, cfg.hue)))
    if not contrast_first and rng.random() < 0.5:
        img = TF.adjust_contrast(img.clamp(0, 1), float(rng.uniform(*cfg.contrast)))
    return img.clamp(0, 1).numpy()


def augment(sample: Sample, cfg: AugmentConfig, rng, num_categories=None,
            boundary_cfg: BoundaryGenConfig | None = None) -> Sample:
    """Random scale -> random crop (ignore-padded) -> hflip -> photometric jitter.

    Images are resized bilinearly, label and instance maps by nearest
    neighbour.  When ``num_categories`` is given the boundary targets are
    regenerated from the transformed labels.
    """
    bcfg = boundary_cfg or BoundaryGenConfig()
    image, labels, inst = sample.image, sample.labels, sample.instances
    H, W = labels.shape

    s = float(rng.uniform(*cfg.scale_range))
    if s != 1.0:
        size = (max(1, int(round(H * s))), max(1, int(round(W * s))))
        image = _resize_image(image, size)
        labels = rescale_nearest(labels, size=size)
        inst = None if inst is None else rescale_nearest(inst, size=size)

    if cfg.crop is not None:
        ch, cw = cfg.crop
        h, w = labels.shape
        ph, pw = max(ch - h, 0), max(cw - w, 0)
        if ph or pw:
            image = np.pad(image, ((0, 0), (0, ph), (0, pw)))
            labels = np.pad(labels, ((0, ph), (0, pw)), constant_values=bcfg.ignore_index)
            inst = None if inst is None else np.pad(inst, ((0, ph), (0, pw)))
        h, w = labels.shape
        y = int(rng.integers(0, h - ch + 1))
        x = int(rng.integers(0, w - cw + 1))
        image = image[:, y:y + ch, x:x + cw]
        labels = labels[y:y + ch, x:x + cw]
        inst = None if inst is None else inst[y:y + ch, x:x + cw]

    if rng.random() < cfg.hflip:
        image, labels = image[..., ::-1], labels[..., ::-1]
        inst = None if inst is None else inst[..., ::-1]

    if cfg.photometric:
        image = _photometric(image, cfg, rng)

    out = Sample(np.ascontiguousarray(image, dtype=np.float32), np.ascontiguousarray(labels),
                 None if inst is None else np.ascontiguousarray(inst), name=sample.name)
    if num_categories is not None:
        out = attach_boundaries(out, num_categories, bcfg)
    return out


def hflip(sample: Sample) -> Sample:
    f = lambda a: None if a is None else np.ascontiguousarray(a[..., ::-1])
    return Sample(f(sample.image), f(sample.labels), f(sample.instances), f(sample.boundaries),
                  f(sample.binary_boundary), sample.name)


# -- synthetic shapes ---------------------------------------------------------

def _bar(rng, size):
    """Thin rotated rectangle 1-3 px wide."""
    width = rng.uniform(1.0, 3.0)
    length = rng.uniform(0.3, 0.8) * size
    cy, cx = rng.uniform(0.15, 0.85, 2) * size
    a = rng.uniform(0, math.pi)
    d = np.array([math.sin(a), math.cos(a)])
    n = np.array([d[1], -d[0]])
    c = np.array([cy, cx])
    corners = [c + d * length / 2 + n * width / 2, c + d * length / 2 - n * width / 2,
               c - d * length / 2 - n * width / 2, c - d * length / 2 + n * width / 2]
    r, cc = draw.polygon([p[0] for p in corners], [p[1] for p in corners], (size, size))
    if len(r) == 0:
        r, cc = draw.line(*np.clip(np.round([c[0] - d[0] * length / 2, c[1] - d[1] * length / 2,
                                             c[0] + d[0] * length / 2, c[1] + d[1] * length / 2]),
                                   0, size - 1).astype(int))
    return r, cc


def _blob(rng, size):
    kind = rng.integers(0, 3)
    if kind == 0:
        r, c = draw.ellipse(*(rng.uniform(0.1, 0.9, 2) * size), *(rng.uniform(0.06, 0.25, 2) * size),
                            shape=(size, size), rotation=rng.uniform(0, math.pi))
    elif kind == 1:
        y0, x0 = rng.uniform(0, 0.8, 2) * size
        h, w = rng.uniform(0.1, 0.4, 2) * size
        r, c = draw.rectangle((int(y0), int(x0)), extent=(max(2, int(h)), max(2, int(w))),
                              shape=(size, size))
        r, c = np.asarray(r).ravel(), np.asarray(c).ravel()
    else:
        k = int(rng.integers(3, 7))
        center = rng.uniform(0.2, 0.8, 2) * size
        ang = np.sort(rng.uniform(0, 2 * math.pi, k))
        rad = rng.uniform(0.08, 0.3, k) * size
        r, c = draw.polygon(center[0] + rad * np.sin(ang), center[1] + rad * np.cos(ang), (size, size))
    return r, c


class SyntheticShapes:
    """Deterministic random scenes of ellipses, polygons, rectangles and thin bars.

    Category 0 is background.  Every object gets its own instance id.  Images
    are drawn from per-category base colours with per-instance jitter, a smooth
    background gradient and pixel noise.  Splits meant to be used together
    (train/val) must share ``palette_seed`` so categories keep their colours.
    """

    def __init__(self, num_samples, size=64, num_categories=5, seed=0, max_objects=7,
                 bars_per_image=(2, 4), noise=0.08, instance_jitter=0.12, palette_seed=None):
        if num_categories < 2:
            raise ValueError("need background plus at least one shape category")
        self.num_samples = num_samples
        self.size = size
        self.num_categories = num_categories
        self.seed = seed
        self.max_objects = max_objects
        self.bars_per_image = bars_per_image
        self.noise = noise
        self.instance_jitter = instance_jitter
        self.palette_seed = seed if palette_seed is None else palette_seed
        self.palette = np.random.default_rng([self.palette_seed, 7919]).uniform(0.1, 0.9, (num_categories, 3))
        self._get = lru_cache(maxsize=4096)(self._generate)
        self._bar_ids = {}

    def __getstate__(self):
        state = dict(self.__dict__)
        del state["_get"]
        state["_bar_ids"] = {}
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._get = lru_cache(maxsize=4096)(self._generate)

    def __len__(self):
        return self.num_samples

    def __getitem__(self, idx) -> Sample:
        if not 0 <= idx < self.num_samples:
            raise IndexError(idx)
        return self._get(idx)

    def thin_mask(self, idx) -> np.ndarray:
        """Visible pixels of the 1-3 px bars in sample ``idx``."""
        s = self[idx]
        return np.isin(s.instances, self._bar_ids[idx])

    def _generate(self, idx) -> Sample:
        size = self.size
        rng = np.random.default_rng([self.seed, idx])
        labels = np.zeros((size, size), np.int64)
        inst = np.zeros((size, size), np.int64)
        n_blobs = int(rng.integers(2, self.max_objects + 1))
        n_bars = int(rng.integers(self.bars_per_image[0], self.bars_per_image[1] + 1))
        kinds = ["blob"] * n_blobs + ["bar"] * n_bars
        rng.shuffle(kinds)
        colors = []
        self._bar_ids[idx] = [k for k, kind in enumerate(kinds, start=1) if kind == "bar"]
        for k, kind in enumerate(kinds, start=1):
            r, c = _bar(rng, size) if kind == "bar" else _blob(rng, size)
            cat = int(rng.integers(1, self.num_categories))
            labels[r, c] = cat
            inst[r, c] = k
            colors.append(self.palette[cat] + rng.normal(0, self.instance_jitter, 3))
        yy, xx = np.mgrid[:size, :size] / size
        g = rng.uniform(-0.2, 0.2, 2)
        image = np.empty((3, size, size))
        image[:] = (self.palette[0] + rng.normal(0, self.instance_jitter, 3))[:, None, None]
        image += g[0] * yy + g[1] * xx
        for k, col in enumerate(colors, start=1):
            m = inst == k
            image[:, m] = col[:, None]
        image += rng.normal(0, self.noise, image.shape)
        return Sample(np.clip(image, 0, 1).astype(np.float32), labels, inst, name=f"synth_{idx:05d}")


def synth_shapes(num_samples, size=64, num_categories=5, seed=0, **kw) -> SyntheticShapes:
    return SyntheticShapes(num_samples, size, num_categories, seed, **kw)


# -- files ----------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError, SyntaxError) as e:
        raise ValueError(f"cannot read image {path}: {e}") from e
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def read_label(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P", "I", "I;16", "I;16B", "1"):
                raise ValueError(f"label PNG must be single-channel, got mode {im.mode}")
            arr = np.array(im)
    except (OSError, UnidentifiedImageError, SyntaxError) as e:
        raise ValueError(f"cannot read label map {path}: {e}") from e
    return arr.astype(np.int64)


def write_label(path, arr):
    arr = np.asarray(arr)
    if arr.min() < 0 or arr.max() > 65535:
        raise ValueError("label values must fit in uint16")
    img = Image.fromarray(arr.astype(np.uint8)) if arr.max() < 256 else Image.fromarray(arr.astype(np.uint16))
    img.save(path)


def write_image(path, image):
    arr = (np.clip(np.asarray(image).transpose(1, 2, 0), 0, 1) * 255).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def _by_stem(d: Path):
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def _image_size(path):
    try:
        with Image.open(path) as im:
            return im.size[::-1]
    except (OSError, UnidentifiedImageError, SyntaxError) as e:
        raise ValueError(f"cannot read {path}: {e}") from e


class DirectoryDataset:
    """``root/images``, ``root/labels`` (single-channel integer PNG) and
    optional ``root/instances``, paired by file stem."""

    def __init__(self, root, instance_sensitive=False):
        root = Path(root)
        self.root = root
        img_dir, lab_dir, inst_dir = root / "images", root / "labels", root / "instances"
        for d in (img_dir, lab_dir):
            if not d.is_dir():
                raise FileNotFoundError(f"missing directory {d}")
        if instance_sensitive and not inst_dir.is_dir():
            raise FileNotFoundError(f"instance-sensitive boundaries need {inst_dir}")
        images, labels = _by_stem(img_dir), _by_stem(lab_dir)
        insts = _by_stem(inst_dir) if inst_dir.is_dir() else None
        unpaired = sorted(set(images) ^ set(labels))
        if insts is not None:
            unpaired += sorted(set(images) - set(insts))
        if unpaired:
            raise ValueError(f"unpaired files in {root}: {unpaired[:10]}")
        self.items = []
        for stem in sorted(images):
            paths = [images[stem], labels[stem]] + ([insts[stem]] if insts is not None else [])
            sizes = [_image_size(p) for p in paths]
            if len(set(sizes)) != 1:
                raise ValueError(f"shape mismatch for {stem}: " +
                                 ", ".join(f"{p.name}={s}" for p, s in zip(paths, sizes)))
            self.items.append((stem, *paths))
        self.has_instances = insts is not None

    def __len__(self):
        return len(self.items)

    def __getitem__(self, idx) -> Sample:
        stem, img, lab, *inst = self.items[idx]
        return Sample(read_image(img), read_label(lab), read_label(inst[0]) if inst else None, name=stem)


def load_directory_dataset(root, instance_sensitive=False) -> DirectoryDataset:
    return DirectoryDataset(root, instance_sensitive)


def write_directory_dataset(dataset, root):
    root = Path(root)
    for sub in ("images", "labels", "instances"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i in range(len(dataset)):
        s = dataset[i]
        name = s.name or f"{i:05d}"
        write_image(root / "images" / f"{name}.png", s.image)
        write_label(root / "labels" / f"{name}.png", s.labels)
        if s.instances is not None:
            write_label(root / "instances" / f"{name}.png", s.instances)


# -- torch side -------------------------------------------------------------------

class SegDataset(torch.utils.data.Dataset):
    """Materialises augmented samples with boundary targets.

    Indexing with ``(epoch, idx)`` draws augmentation randomness from a stream
    seeded by ``(seed, epoch, idx)``, so worker count and order never change
    the produced samples.
    """

    def __init__(self, source, num_categories, boundary_cfg: BoundaryGenConfig | None = None,
                 augment_cfg: AugmentConfig | None = None, seed=0):
        self.source = source
        self.num_categories = num_categories
        self.boundary_cfg = boundary_cfg or BoundaryGenConfig()
        self.augment_cfg = augment_cfg
        self.seed = seed

    def __len__(self):
        return len(self.source)

    def __getitem__(self, key) -> Sample:
        epoch, idx = key if isinstance(key, tuple) else (0, key)
        raw = self.source[idx]
        if self.augment_cfg is None:
            return attach_boundaries(raw, self.num_categories, self.boundary_cfg)
        rng = np.random.default_rng([self.seed, epoch, idx])
        return augment(raw, self.augment_cfg, rng, self.num_categories, self.boundary_cfg)


def normalize(image, mean=MEAN, std=STD):
    m = torch.tensor(mean, dtype=image.dtype).view(-1, 1, 1)
    s = torch.tensor(std, dtype=image.dtype).view(-1, 1, 1)
    return (image - m) / s


def collate(samples) -> dict:
    batch = {
        "image": torch.stack([normalize(torch.from_numpy(s.image)) for s in samples]),
        "labels": torch.stack([torch.from_numpy(s.labels.astype(np.int64)) for s in samples]),
    }
    if all(s.boundaries is not None for s in samples):
        batch["boundaries"] = torch.stack([torch.from_numpy(s.boundaries) for s in samples]).float()
        batch["binary_boundary"] = torch.stack([torch.from_numpy(s.binary_boundary) for s in samples]).float()
    return batch


@dataclass
class EpochBatchSampler:
    """Yields lists of ``(epoch, idx)`` keys; drops the last partial batch.

    Batch ``k`` of the run is a pure function of ``(seed, k)``, which lets a
    resumed run start at any iteration.
    """

    num_samples: int
    batch_size: int
    seed: int = 0
    start_iter: int = 0
    max_iter: int | None = None
    shuffle: bool = True
    _perms: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.num_samples < self.batch_size:
            raise ValueError(f"dataset of {self.num_samples} samples is smaller than one batch")

    @property
    def batches_per_epoch(self):
        return self.num_samples // self.batch_size

    def batch(self, k):
        epoch, pos = divmod(k, self.batches_per_epoch)
        if epoch not in self._perms:
            self._perms = {epoch: (np.random.default_rng([self.seed, 104729, epoch]).permutation(self.num_samples)
                                   if self.shuffle else np.arange(self.num_samples))}
        idx = self._perms[epoch][pos * self.batch_size:(pos + 1) * self.batch_size]
        return [(epoch, int(i)) for i in idx]

    def __iter__(self):
        k = self.start_iter
        while self.max_iter is None or k < self.max_iter:
            yield self.batch(k)
            k += 1

    def __len__(self):
        if self.max_iter is None:
            raise TypeError("unbounded sampler")
        return max(0, self.max_iter - self.start_iter)
