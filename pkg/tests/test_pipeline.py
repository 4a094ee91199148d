import pickle

import numpy as np
import pytest
import torch
from PIL import Image

from oracles import mean_band_thickness
from sbcb.boundary_gen import BoundaryGenConfig, semantic_boundaries
from sbcb.pipeline import (AugmentConfig, EpochBatchSampler, Sample, SegDataset, augment, collate, hflip,
                           load_directory_dataset, synth_shapes, write_directory_dataset, write_label)


def make_sample(rng, H=24, W=32, n=4):
    labels = rng.integers(0, n, (H // 4, W // 4)).repeat(4, 0).repeat(4, 1)
    inst = labels * 10 + rng.integers(0, 2, labels.shape)
    return Sample(rng.random((3, H, W)).astype(np.float32), labels, inst, name="s")


def test_identity_augment(rng):
    s = make_sample(rng)
    out = augment(s, AugmentConfig.identity(), np.random.default_rng(1))
    assert np.array_equal(out.labels, s.labels) and np.array_equal(out.image, s.image)
    assert np.array_equal(out.instances, s.instances)


def test_hflip_involution(rng):
    s = make_sample(rng)
    s = SegDataset([s], 4)[0]
    twice = hflip(hflip(s))
    for a in ("image", "labels", "instances", "boundaries", "binary_boundary"):
        assert np.array_equal(getattr(twice, a), getattr(s, a))


def test_crop_pads_with_ignore(rng):
    s = make_sample(rng, 16, 16)
    out = augment(s, AugmentConfig(scale_range=(1, 1), crop=(40, 40), hflip=0, photometric=False),
                  np.random.default_rng(0), num_categories=4)
    assert out.labels.shape == (40, 40)
    pad = out.labels == 255
    assert pad.sum() == 40 * 40 - 16 * 16
    assert not out.boundaries[:, pad].any()
    assert np.all(out.image[:, pad] == 0) and np.all(out.instances[pad] == 0)


def test_scale_then_generate_keeps_band_width():
    labels = np.zeros((64, 64), int)
    labels[:, 32:] = 1
    s = Sample(np.zeros((3, 64, 64), np.float32), labels)
    cfg = AugmentConfig(scale_range=(2.0, 2.0), crop=None, hflip=0, photometric=False)
    out = augment(s, cfg, np.random.default_rng(0), num_categories=2, boundary_cfg=BoundaryGenConfig(radius=2))
    assert out.labels.shape == (128, 128)
    assert abs(mean_band_thickness(out.boundaries[0]) - 4) <= 1


def test_boundaries_regenerate_exactly(rng):
    ds = SegDataset(synth_shapes(6, 48, 4, 0), 4, BoundaryGenConfig(radius=2),
                    AugmentConfig(crop=(40, 40)), seed=3)
    for k in range(6):
        s = ds[(1, k)]
        assert np.array_equal(s.boundaries, semantic_boundaries(s.labels, 4, BoundaryGenConfig(radius=2)))
        assert np.array_equal(s.binary_boundary, s.boundaries.any(0))


def test_instance_sensitive_augmented_boundaries():
    bcfg = BoundaryGenConfig(radius=1, instance_sensitive=True)
    ds = SegDataset(synth_shapes(3, 48, 4, 0), 4, bcfg, AugmentConfig(crop=(48, 48)), seed=0)
    s = ds[(0, 1)]
    assert np.array_equal(s.boundaries, semantic_boundaries(s.labels, 4, bcfg, s.instances))


def test_augmentation_reproducible():
    src = synth_shapes(4, 32, 3, 0)
    a = SegDataset(src, 3, augment_cfg=AugmentConfig(crop=(32, 32)), seed=5)
    b = SegDataset(pickle.loads(pickle.dumps(src)), 3, augment_cfg=AugmentConfig(crop=(32, 32)), seed=5)
    for key in [(0, 0), (2, 3), (7, 1)]:
        x, y = a[key], b[key]
        assert np.array_equal(x.image, y.image) and np.array_equal(x.boundaries, y.boundaries)
    assert not np.array_equal(a[(0, 0)].image, a[(1, 0)].image)


def test_photometric_touches_image_only(rng):
    s = make_sample(rng)
    cfg = AugmentConfig(scale_range=(1, 1), crop=None, hflip=0, photometric=True)
    out = augment(s, cfg, np.random.default_rng(2))
    assert np.array_equal(out.labels, s.labels)
    assert out.image.min() >= 0 and out.image.max() <= 1


def test_augment_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(scale_range=(0, 1))
    with pytest.raises(ValueError):
        AugmentConfig(scale_range=(2, 1))
    with pytest.raises(ValueError):
        AugmentConfig(crop=(0, 5))


def test_sample_shape_validation():
    with pytest.raises(ValueError):
        Sample(np.zeros((3, 4, 4), np.float32), np.zeros((4, 5), int))


def test_synth_determinism_and_ranges():
    a, b = synth_shapes(20, 64, 5, 7), synth_shapes(20, 64, 5, 7)
    for i in range(20):
        assert np.array_equal(a[i].labels, b[i].labels) and np.array_equal(a[i].image, b[i].image)
        assert a[i].labels.max() < 5 and a[i].labels.min() >= 0
    assert not np.array_equal(a[0].labels, synth_shapes(1, 64, 5, 8)[0].labels)
    with pytest.raises(ValueError):
        synth_shapes(1, 64, 1, 0)
    with pytest.raises(IndexError):
        a[20]


def test_synth_thin_structure_share():
    ds = synth_shapes(100, 64, 5, 0)
    thin = sum(int(ds.thin_mask(i).sum()) for i in range(100))
    fg = sum(int((ds[i].labels > 0).sum()) for i in range(100))
    assert thin / fg >= 0.10


def test_synth_bars_are_thin():
    ds = synth_shapes(10, 64, 5, 1)
    from scipy import ndimage
    for i in range(10):
        s = ds[i]
        m = ds.thin_mask(i)
        # nothing survives an opening with a 4x4 square: bars are at most 3 px wide
        assert not ndimage.binary_opening(m, np.ones((4, 4), bool)).any()


def test_directory_roundtrip(tmp_path):
    src = synth_shapes(3, 32, 4, 0)
    write_directory_dataset(src, tmp_path)
    ds = load_directory_dataset(tmp_path, instance_sensitive=True)
    assert len(ds) == 3 and ds.has_instances
    for i in range(3):
        a, b = ds[i], src[i]
        assert np.array_equal(a.labels, b.labels) and np.array_equal(a.instances, b.instances)
        assert np.abs(a.image - b.image).max() <= 1 / 255


def test_directory_train_ids_pass_through(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "labels").mkdir()
    labels = np.arange(20).repeat(5).reshape(10, 10) % 19
    labels[0, 0] = 255
    write_label(tmp_path / "labels" / "a.png", labels)
    Image.fromarray(np.zeros((10, 10, 3), np.uint8)).save(tmp_path / "images" / "a.png")
    assert np.array_equal(load_directory_dataset(tmp_path)[0].labels, labels)


def test_directory_errors(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "labels").mkdir()
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(tmp_path / "images" / "a.png")
    Image.fromarray(np.zeros((8, 9), np.uint8)).save(tmp_path / "labels" / "a.png")
    with pytest.raises(ValueError, match="a.png"):
        load_directory_dataset(tmp_path)
    Image.fromarray(np.zeros((8, 8), np.uint8)).save(tmp_path / "labels" / "a.png")
    with pytest.raises(FileNotFoundError, match="instances"):
        load_directory_dataset(tmp_path, instance_sensitive=True)
    Image.fromarray(np.zeros((8, 8), np.uint8)).save(tmp_path / "labels" / "b.png")
    with pytest.raises(ValueError, match="unpaired"):
        load_directory_dataset(tmp_path)
    (tmp_path / "labels" / "b.png").unlink()
    (tmp_path / "labels" / "a.png").write_bytes(b"\x89PNG\r\n\x1a\n not really a png")
    with pytest.raises(ValueError, match="a.png"):
        load_directory_dataset(tmp_path)[0]


def test_batch_sampler_is_resumable():
    s = EpochBatchSampler(10, 4, seed=1, max_iter=7)
    batches = list(s)
    assert len(batches) == 7 and all(len(b) == 4 for b in batches)
    assert batches[2][0][0] == 1  # 10 // 4 = 2 batches per epoch, partial batch dropped
    resumed = list(EpochBatchSampler(10, 4, seed=1, start_iter=4, max_iter=7))
    assert resumed == batches[4:]
    with pytest.raises(ValueError):
        EpochBatchSampler(3, 4)


def test_collate_shapes():
    ds = SegDataset(synth_shapes(2, 32, 3, 0), 3)
    b = collate([ds[0], ds[1]])
    assert b["image"].shape == (2, 3, 32, 32) and b["labels"].dtype == torch.int64
    assert b["boundaries"].shape == (2, 3, 32, 32) and b["binary_boundary"].shape == (2, 32, 32)
