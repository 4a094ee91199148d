import json
import math

import numpy as np
import pytest
import torch
import yaml

from sbcb.backbone import param_count
from sbcb.metrics import ODSConfig
from sbcb.pipeline import SegDataset, synth_shapes
from sbcb.trainer import (Evaluator, RunConfig, build_datasets, build_from_config, evaluate, export_inference,
                          infer, load_checkpoint, load_config, load_for_eval, load_inference, poly_lr, train)


def small_cfg(tmp, **over):
    d = {"data": {"train_samples": 24, "val_samples": 6, "size": 32, "num_categories": 4},
         "backbone": {"stage_channels": [4, 8, 8, 16, 16]},
         "augment": {"crop": [32, 32]},
         "model": {"seg_channels": 8},
         "schedule": {"max_iter": 12}, "batch_size": 4, "output_dir": str(tmp)}
    for k, v in over.items():
        node = d
        *parents, leaf = k.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = v
    return RunConfig.from_dict(d)


def test_poly_lr_closed_form():
    assert poly_lr(0, 100, 0.01, 9) == 0.01
    assert poly_lr(100, 100, 0.01, 9) == 0.0
    assert math.isclose(poly_lr(50, 100, 0.01, 9), 0.01 / 512, rel_tol=1e-12)
    with pytest.raises(ValueError):
        poly_lr(101, 100, 0.01, 9)


def test_config_defaults_and_overrides(tmp_path):
    cfg = RunConfig()
    assert (cfg.optim.lr0, cfg.optim.momentum, cfg.optim.weight_decay) == (0.01, 0.9, 5e-4)
    assert (cfg.loss.alpha, cfg.loss.beta, cfg.schedule.power) == (5.0, 1.0, 9.0)
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"optim": {"lr0": 0.02}, "augment": {"crop": [16, 24]}, "head": {"variant": "dds"}}))
    cfg = load_config(path, ["loss.alpha=2.5", "merge.mode=channel_merge", "head.sides=[1, 2, 5]"])
    assert cfg.optim.lr0 == 0.02 and cfg.augment.crop == (16, 24)
    assert cfg.loss.alpha == 2.5 and cfg.merge.mode == "channel_merge" and cfg.head.sides == [1, 2, 5]
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(KeyError):
        load_config(None, ["optim.learning_rate=1"])
    with pytest.raises(ValueError):
        load_config(None, ["optim.lr0"])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = small_cfg(out, **{"schedule.max_iter": 200, "optim.lr0": 0.05})
    return cfg, train(cfg)


def test_toy_run_reduces_loss(trained):
    _, result = trained
    totals = [h["total"] for h in result.history]
    assert len(totals) == 200
    assert np.mean(totals[-10:]) < np.mean(totals[:10])
    log = [json.loads(l) for l in (result.checkpoint.parent / "train_log.jsonl").read_text().splitlines()]
    assert {"total", "seg_ce", "sbd_bce", "bdry_bce", "lr"} <= set(log[0])


def test_resume_matches_uninterrupted(tmp_path):
    full = train(small_cfg(tmp_path / "a"))
    part = train(small_cfg(tmp_path / "b"), stop_at=5)
    resumed = train(small_cfg(tmp_path / "b"), resume=part.checkpoint)
    a, b = full.model.state_dict(), resumed.model.state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert [h["total"] for h in full.history[5:]] == [h["total"] for h in resumed.history]


def test_identical_configs_identical_checkpoints(tmp_path):
    a = load_checkpoint(train(small_cfg(tmp_path / "a", **{"schedule.max_iter": 4})).checkpoint)
    b = load_checkpoint(train(small_cfg(tmp_path / "b", **{"schedule.max_iter": 4})).checkpoint)
    assert all(torch.equal(a["model"][k], b["model"][k]) for k in a["model"])


def test_zero_weights_follow_baseline(tmp_path):
    sbcb = train(small_cfg(tmp_path / "s", **{"loss.alpha": 0.0, "loss.beta": 0.0, "head.variant": "dds",
                                              "schedule.max_iter": 8}))
    base = train(small_cfg(tmp_path / "b", **{"head.variant": None, "schedule.max_iter": 8}))
    assert [h["seg_ce"] for h in sbcb.history] == [h["seg_ce"] for h in base.history]
    ref = base.model.state_dict()
    got = sbcb.model.state_dict()
    assert all(torch.equal(v, got[k]) for k, v in ref.items())


class NaNImages:
    def __init__(self, ds):
        self.ds = ds
        self.num_categories = ds.num_categories

    def __len__(self):
        return len(self.ds)

    def __getitem__(self, key):
        s = self.ds[key]
        s.image[:] = np.nan
        return s


def test_non_finite_loss_aborts_with_dump(tmp_path):
    cfg = small_cfg(tmp_path)
    tr, va = build_datasets(cfg)
    with pytest.raises(FloatingPointError, match="nonfinite_batch"):
        train(cfg, datasets=(NaNImages(tr), va))
    dumps = list(tmp_path.glob("nonfinite_batch_*.pt"))
    assert len(dumps) == 1 and "batch" in torch.load(dumps[0], weights_only=False)


def test_export_discards_head(trained, tmp_path):
    cfg, result = trained
    manifest = export_inference(result.checkpoint, tmp_path / "inf.pt")
    model, loaded = load_inference(tmp_path / "inf.pt")
    assert loaded == manifest
    assert manifest["config_hash"] == cfg.hash() and manifest["fusion_mode"] is None
    assert manifest["categories"] == ["0", "1", "2", "3"] and manifest["discarded_head"] == "casenet"
    assert param_count(model) == param_count(build_from_config(cfg, with_head=False))
    full = result.model.eval()
    x = torch.randn(3, 3, 32, 32)
    with torch.no_grad():
        assert (full(x).seg_logits - model(x).seg_logits).abs().max() <= 1e-6


def test_export_refuses_with_fusion(tmp_path):
    cfg = small_cfg(tmp_path, **{"merge.mode": "two_stream", "schedule.max_iter": 2})
    result = train(cfg)
    with pytest.raises(ValueError, match="fusion"):
        export_inference(result.checkpoint, tmp_path / "inf.pt")


def test_gt_against_itself_is_perfect():
    ds = SegDataset(synth_shapes(4, 32, 4, 0), 4)
    ev = Evaluator(4, ods=ODSConfig())
    for i in range(4):
        s = ds[i]
        ev.update(s.labels, s.labels, s.boundaries.astype(float), s.boundaries)
    r = ev.report()["summary"]
    assert r["miou"] == 1.0 and r["mf_ods"] == 1.0
    assert all(r[f"bf{w}"] == 1.0 for w in (3, 5, 9, 12))


def test_width_ladder_monotone(trained, tmp_path):
    cfg, result = trained
    _, val = build_datasets(cfg)
    rep = evaluate(result.model, val, out_dir=tmp_path, error_maps=True)
    s = rep["summary"]
    assert s["bf3"] <= s["bf5"] <= s["bf9"] <= s["bf12"]
    assert 0 <= s["mf_ods"] <= 1
    lines = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert lines[0]["type"] == "summary" and lines[0]["miou"] == s["miou"]
    assert "mean" in (tmp_path / "summary.txt").read_text()
    assert len(list((tmp_path / "error_maps").glob("*.png"))) == len(val)


def test_whole_and_slide_agree_on_single_window(trained):
    _, result = trained
    m = result.model.eval()
    x = torch.randn(2, 3, 32, 32)
    seg_w, sbd_w = infer(m, x, "whole")
    seg_s, sbd_s = infer(m, x, "slide", window=(32, 48), stride=(16, 16))
    assert torch.equal(seg_w, seg_s) and torch.equal(sbd_w, sbd_s)
    seg_o, _ = infer(m, x, "slide", window=(16, 16), stride=(8, 8))
    assert seg_o.shape == seg_w.shape


def test_multiscale_flip_inference(trained):
    _, result = trained
    m = result.model.eval()
    x = torch.randn(1, 3, 32, 32)
    seg, sbd = infer(m, x, scales=(0.5, 1.0, 1.5), flip=True)
    assert seg.shape == (1, 4, 32, 32) and sbd.shape == (1, 4, 32, 32)
    assert torch.equal(infer(m, x)[0], infer(m, x, scales=(1.0,), flip=False)[0])


def test_category_mismatch(trained):
    _, result = trained
    ds = SegDataset(synth_shapes(2, 32, 3, 0), 3)
    with pytest.raises(ValueError, match="categories"):
        evaluate(result.model, ds)


def test_load_for_eval_handles_both(trained, tmp_path):
    cfg, result = trained
    export_inference(result.checkpoint, tmp_path / "inf.pt")
    m1, n1, _ = load_for_eval(tmp_path / "inf.pt")
    m2, n2, _ = load_for_eval(result.checkpoint)
    assert n1 == n2 == 4 and m1.sbd_head is None and m2.sbd_head is not None
