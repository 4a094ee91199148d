"""Training loop, checkpoints, head-discard export and evaluation."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import yaml

from .backbone import SideTapSpec, load_pretrained, param_count, toy_backbone
from .boundary_gen import BoundaryGenConfig
from .fusion import MergeConfig
from .losses import LossWeights, total_loss
from .metrics import (BoundaryFScore, BoundaryFScoreConfig, ConfusionMatrix, ODSAccumulator, ODSConfig,
                      error_map)
from .models import SegmentationModel, build_model
from .pipeline import (AugmentConfig, EpochBatchSampler, SegDataset, collate, load_directory_dataset,
                       normalize, synth_shapes, write_label)
from .sbd_heads import HeadConfig

log = logging.getLogger(__name__)


# -- configuration ----------------------------------------------------------------

@dataclass
class DataConfig:
    kind: str = "synthetic"  # or "directory"
    root: str | None = None
    val_root: str | None = None
    num_categories: int = 5
    category_names: list | None = None
    size: int = 64
    train_samples: int = 500
    val_samples: int = 100
    synth_seed: int = 0
    radius: float = 2
    instance_sensitive: bool = False
    ignore_index: int = 255


@dataclass
class BackboneConfig:
    kind: str = "toy"
    stage_channels: tuple = (16, 32, 64, 128, 128)
    blocks: int = 1
    trick: str = "segmentation"
    pretrained: str | None = None


@dataclass
class HeadSection:
    variant: str | None = "casenet"  # None trains the plain baseline
    sides: list = field(default_factory=lambda: [1, 2, 3, 5])
    dff_hidden: int = 32


@dataclass
class ModelConfig:
    seg_channels: int = 64
    aux: bool = False
    aux_stage: int = 4
    aux_channels: int = 64


@dataclass
class OptimConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4


@dataclass
class ScheduleConfig:
    max_iter: int = 2000
    # Taken literally from the reference recipe; 0.9 is the more common value.
    power: float = 9.0


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadSection = field(default_factory=HeadSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    augment: AugmentConfig = field(default_factory=lambda: AugmentConfig(crop=(64, 64)))
    merge: MergeConfig = field(default_factory=MergeConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    batch_size: int = 8
    seed: int = 0
    eval_interval: int = 0
    checkpoint_interval: int = 0
    log_interval: int = 1
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        return _build(cls, d or {}, "")

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _build(cls, d, prefix):
    if not isinstance(d, dict):
        raise TypeError(f"{prefix or 'config'} must be a mapping, got {type(d).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise KeyError(f"unknown config keys under {prefix or '<root>'}: {sorted(unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in d.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value or {}, f"{prefix}{name}.")
        elif isinstance(current, tuple) and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def apply_overrides(d: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` strings (values parsed as YAML) to a nested dict."""
    d = copy.deepcopy(d)
    for item in overrides or ():
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        node = d
        *parents, leaf = key.strip().split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise KeyError(f"{key}: {p} is not a section")
        node[leaf] = yaml.safe_load(raw)
    return d


def load_config(path=None, overrides=()) -> RunConfig:
    d = {}
    if path is not None:
        with open(path) as f:
            d = yaml.safe_load(f) or {}
    return RunConfig.from_dict(apply_overrides(d, overrides))


def dump_config(cfg: RunConfig, path):
    with open(path, "w") as f:
        yaml.safe_dump(json.loads(json.dumps(cfg.to_dict())), f, sort_keys=False)


# -- building blocks --------------------------------------------------------------

def poly_lr(it, max_iter, lr0, power):
    if not 0 <= it <= max_iter:
        raise ValueError(f"iteration {it} outside [0, {max_iter}]")
    return lr0 * (1 - it / max_iter) ** power


def _taps(sides) -> SideTapSpec:
    return SideTapSpec.from_sides([tuple(s) if isinstance(s, list) else s for s in sides])


def build_from_config(cfg: RunConfig, with_head=True) -> SegmentationModel:
    """Seeded model construction; ``with_head=False`` gives the matching baseline."""
    b = cfg.backbone
    if b.kind != "toy":
        raise ValueError(f"unsupported backbone kind {b.kind!r}")
    torch.manual_seed(cfg.seed)
    backbone = toy_backbone(tuple(b.stage_channels), 3, blocks=b.blocks, trick=b.trick)
    if b.pretrained:
        load_pretrained(backbone, b.pretrained)
    n = cfg.data.num_categories
    head = None
    if with_head and cfg.head.variant is not None:
        head = HeadConfig(cfg.head.variant, n, dff_hidden=cfg.head.dff_hidden)
    m = cfg.model
    return build_model(backbone, n, _taps(cfg.head.sides) if head else None, head,
                       seg_channels=m.seg_channels, aux=m.aux and with_head, aux_stage=m.aux_stage,
                       aux_channels=m.aux_channels, merge=cfg.merge if head else None,
                       head_seed=cfg.seed + 1)


def build_datasets(cfg: RunConfig):
    d = cfg.data
    bcfg = BoundaryGenConfig(radius=d.radius, instance_sensitive=d.instance_sensitive,
                             ignore_index=d.ignore_index)
    if d.kind == "synthetic":
        train_src = synth_shapes(d.train_samples, d.size, d.num_categories, d.synth_seed)
        val_src = synth_shapes(d.val_samples, d.size, d.num_categories, d.synth_seed + 10_000,
                               palette_seed=d.synth_seed)
    elif d.kind == "directory":
        if not d.root:
            raise ValueError("data.root is required for directory datasets")
        train_src = load_directory_dataset(d.root, d.instance_sensitive)
        val_src = load_directory_dataset(d.val_root, d.instance_sensitive) if d.val_root else None
    else:
        raise ValueError(f"unknown data kind {d.kind!r}")
    train = SegDataset(train_src, d.num_categories, bcfg, cfg.augment, seed=cfg.seed)
    val = None if val_src is None else SegDataset(val_src, d.num_categories, bcfg, None)
    return train, val


def _rng_state():
    return {"torch": torch.get_rng_state(), "numpy": np.random.get_state(), "python": random.getstate()}


def _set_rng_state(state):
    torch.set_rng_state(state["torch"])
    np.random.set_state(state["numpy"])
    random.setstate(state["python"])


def save_checkpoint(path, iteration, model, optimizer, cfg: RunConfig):
    torch.save({"iteration": iteration, "model": model.state_dict(), "optimizer": optimizer.state_dict(),
                "config": cfg.to_dict(), "rng": _rng_state()}, path)


def load_checkpoint(path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if "model" not in ckpt or "config" not in ckpt:
        raise ValueError(f"{path} is not a training checkpoint")
    return ckpt


@dataclass
class TrainResult:
    model: SegmentationModel
    checkpoint: Path
    history: list


def _dump_bad_batch(out_dir, it, batch, report):
    path = Path(out_dir) / f"nonfinite_batch_{it:06d}.pt"
    torch.save({"iteration": it, "batch": batch,
                "loss": {k: v for k, v in report.as_dict().items()}}, path)
    return path


def train(cfg: RunConfig, resume=None, datasets=None, stop_at=None) -> TrainResult:
    """Joint optimisation with SGD and poly LR.

    ``stop_at`` ends the run early (after that many iterations in total) while
    keeping the schedule of the full ``max_iter`` run, which is how interrupted
    runs are emulated.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    train_ds, val_ds = datasets or build_datasets(cfg)
    model = build_from_config(cfg)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.optim.lr0, momentum=cfg.optim.momentum,
                          weight_decay=cfg.optim.weight_decay)
    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        model.load_state_dict(ckpt["model"])
        opt.load_state_dict(ckpt["optimizer"])
        _set_rng_state(ckpt["rng"])
        start = ckpt["iteration"]
    max_iter = cfg.schedule.max_iter
    end = max_iter if stop_at is None else min(stop_at, max_iter)
    sampler = EpochBatchSampler(len(train_ds), cfg.batch_size, cfg.seed)
    log_path = out / "train_log.jsonl"
    history = []
    model.train()
    t0 = time.time()
    with open(log_path, "a") as log_file:
        for it in range(start, end):
            lr = poly_lr(it, max_iter, cfg.optim.lr0, cfg.schedule.power)
            for g in opt.param_groups:
                g["lr"] = lr
            batch = collate([train_ds[k] for k in sampler.batch(it)])
            outputs = model(batch["image"])
            report = total_loss(outputs.seg_logits, outputs.head, batch["labels"], batch.get("boundaries"),
                                batch.get("binary_boundary"), cfg.loss, cfg.data.ignore_index,
                                outputs.aux_logits)
            if not torch.isfinite(report.total):
                path = _dump_bad_batch(out, it, batch, report)
                raise FloatingPointError(f"non-finite loss at iteration {it}; batch saved to {path}")
            opt.zero_grad(set_to_none=True)
            report.total.backward()
            opt.step()
            rec = {"iter": it + 1, "lr": lr, **report.as_dict()}
            history.append(rec)
            if cfg.log_interval and (it + 1) % cfg.log_interval == 0:
                log_file.write(json.dumps(rec) + "\n")
            if cfg.eval_interval and val_ds is not None and (it + 1) % cfg.eval_interval == 0:
                snapshot = copy.deepcopy(model)
                metrics = evaluate(snapshot, val_ds, widths=(3,), ods=None)
                log_file.write(json.dumps({"iter": it + 1, "eval": metrics["summary"]}) + "\n")
                log.info("iter %d  mIoU %.4f", it + 1, metrics["summary"]["miou"])
            if cfg.checkpoint_interval and (it + 1) % cfg.checkpoint_interval == 0 and it + 1 < end:
                save_checkpoint(out / f"iter_{it + 1:06d}.pt", it + 1, model, opt, cfg)
    log.info("trained %d iterations in %.1fs", end - start, time.time() - t0)
    final = out / f"iter_{end:06d}.pt"
    save_checkpoint(final, end, model, opt, cfg)
    return TrainResult(model, final, history)


# -- export ---------------------------------------------------------------------

def export_inference(checkpoint, out_path) -> dict:
    """Write backbone + segmentation head weights and a manifest.

    Refuses when an explicit fusion module is enabled, since the segmentation
    head then reads SBD-head features and cannot run without them.
    """
    ckpt = load_checkpoint(checkpoint)
    cfg = RunConfig.from_dict(ckpt["config"])
    if cfg.merge.enabled and cfg.head.variant is not None:
        raise ValueError(f"fusion mode {cfg.merge.mode!r} couples the segmentation head to the SBD "
                         "head; refusing to discard it")
    full = build_from_config(cfg)
    full.load_state_dict(ckpt["model"])
    base = full.baseline()
    n = cfg.data.num_categories
    manifest = {
        "config_hash": cfg.hash(),
        "num_categories": n,
        "categories": list(cfg.data.category_names or [str(i) for i in range(n)]),
        "fusion_mode": None,
        "discarded_head": cfg.head.variant,
        "param_count": param_count(base),
        "iteration": ckpt["iteration"],
        "config": cfg.to_dict(),
    }
    torch.save({"state_dict": base.state_dict(), "manifest": manifest}, out_path)
    return manifest


def load_inference(path):
    art = torch.load(path, map_location="cpu", weights_only=False)
    if "manifest" not in art:
        raise ValueError(f"{path} is not an inference artifact")
    manifest = art["manifest"]
    model = build_from_config(RunConfig.from_dict(manifest["config"]), with_head=False)
    model.load_state_dict(art["state_dict"])
    if param_count(model) != manifest["param_count"]:
        raise ValueError("artifact parameter count disagrees with its manifest")
    return model.eval(), manifest


def load_for_eval(path):
    """Model and category count from either an artifact or a checkpoint."""
    obj = torch.load(path, map_location="cpu", weights_only=False)
    if "manifest" in obj:
        model, manifest = load_inference(path)
        return model, manifest["num_categories"], RunConfig.from_dict(manifest["config"])
    cfg = RunConfig.from_dict(obj["config"])
    model = build_from_config(cfg)
    model.load_state_dict(obj["model"])
    return model.eval(), cfg.data.num_categories, cfg


# -- inference ------------------------------------------------------------------

def _forward(model, image):
    out = model(image)
    sbd = out.head.fuse_logits if out.head is not None else None
    return out.seg_logits, sbd


def slide_inference(model, image, window, stride):
    """Average logits over overlapping windows covering ``image``."""
    H, W = image.shape[-2:]
    wh, ww = min(window[0], H), min(window[1], W)
    sh, sw = stride
    rows = max(H - wh + sh - 1, 0) // sh + 1
    cols = max(W - ww + sw - 1, 0) // sw + 1
    seg_sum = sbd_sum = None
    count = image.new_zeros((1, 1, H, W))
    for r in range(rows):
        for c in range(cols):
            y2, x2 = min(r * sh + wh, H), min(c * sw + ww, W)
            y1, x1 = max(y2 - wh, 0), max(x2 - ww, 0)
            seg, sbd = _forward(model, image[..., y1:y2, x1:x2])
            if seg_sum is None:
                seg_sum = image.new_zeros(image.shape[:1] + seg.shape[1:2] + (H, W))
                if sbd is not None:
                    sbd_sum = image.new_zeros(image.shape[:1] + sbd.shape[1:2] + (H, W))
            seg_sum[..., y1:y2, x1:x2] += seg
            if sbd is not None:
                sbd_sum[..., y1:y2, x1:x2] += sbd
            count[..., y1:y2, x1:x2] += 1
    return seg_sum / count, None if sbd_sum is None else sbd_sum / count


@torch.no_grad()
def infer(model, image, mode="whole", window=(512, 1024), stride=(341, 683), scales=(1.0,), flip=False):
    """Segmentation logits (and SBD fuse logits when present) for a normalised batch.

    Multi-scale/flip averaging resizes logits back to the input size and
    averages them over all views.
    """
    H, W = image.shape[-2:]

    def run(x):
        if mode == "whole":
            return _forward(model, x)
        if mode == "slide":
            return slide_inference(model, x, window, stride)
        raise ValueError(f"unknown inference mode {mode!r}")

    seg_acc = sbd_acc = None
    n = 0
    for s in scales:
        x = image if s == 1.0 else F.interpolate(image, scale_factor=s, mode="bilinear", align_corners=False)
        views = [(x, False)] + ([(x.flip(-1), True)] if flip else [])
        for v, flipped in views:
            seg, sbd = run(v)
            if flipped:
                seg = seg.flip(-1)
                sbd = None if sbd is None else sbd.flip(-1)
            if seg.shape[-2:] != (H, W):
                seg = F.interpolate(seg, size=(H, W), mode="bilinear", align_corners=False)
                sbd = None if sbd is None else F.interpolate(sbd, size=(H, W), mode="bilinear",
                                                             align_corners=False)
            seg_acc = seg if seg_acc is None else seg_acc + seg
            if sbd is not None:
                sbd_acc = sbd if sbd_acc is None else sbd_acc + sbd
            n += 1
    return seg_acc / n, None if sbd_acc is None else sbd_acc / n


# -- evaluation -----------------------------------------------------------------

class Evaluator:
    """Accumulates mIoU, boundary F-scores over a width ladder and, when
    boundary probabilities are supplied, mF (ODS)."""

    def __init__(self, num_categories, widths=(3, 5, 9, 12), ods: ODSConfig | None = None,
                 ignore_index=255):
        self.n = num_categories
        self.cm = ConfusionMatrix(num_categories, ignore_index)
        self.bf = {w: BoundaryFScore(num_categories, BoundaryFScoreConfig(w), ignore_index) for w in widths}
        self.ods_cfg = ods
        self.ods = None
        self.images = 0

    def update(self, pred, gt, boundary_probs=None, gt_boundaries=None):
        self.cm.update(pred, gt)
        for acc in self.bf.values():
            acc.update(pred, gt)
        if boundary_probs is not None and self.ods_cfg is not None:
            if self.ods is None:
                self.ods = ODSAccumulator(boundary_probs.shape[0], self.ods_cfg)
            self.ods.update(boundary_probs, gt_boundaries)
        self.images += 1

    def report(self) -> dict:
        iou = self.cm.iou()
        summary = {"images": self.images,
                   "miou": float(np.nanmean(iou)) if np.isfinite(iou).any() else float("nan")}
        per_cat = {"iou": iou.tolist()}
        for w, acc in self.bf.items():
            f, mean = acc.scores()
            summary[f"bf{w:g}"] = mean
            per_cat[f"bf{w:g}"] = f.tolist()
        if self.ods is not None:
            mf, best, best_t = self.ods.scores()
            summary["mf_ods"] = mf
            per_cat["mf_ods"] = best.tolist()
            per_cat["ods_threshold"] = best_t.tolist()
        return {"summary": summary, "per_category": per_cat}


def summary_table(report, names=None) -> str:
    per = report["per_category"]
    n = len(per["iou"])
    names = names or [str(i) for i in range(n)]
    cols = [c for c in per if c != "ods_threshold"]
    lines = [f"{'category':<12}" + "".join(f"{c:>10}" for c in cols)]
    for i in range(n):
        lines.append(f"{names[i]:<12}" + "".join(f"{per[c][i]:10.4f}" for c in cols))
    s = report["summary"]
    means = [s["miou"] if c == "iou" else s[c] for c in cols]
    lines.append(f"{'mean':<12}" + "".join(f"{m:10.4f}" for m in means))
    return "\n".join(lines)


def write_report(report, out_dir, names=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.jsonl", "w") as f:
        f.write(json.dumps({"type": "summary", **report["summary"]}) + "\n")
        for metric, values in report["per_category"].items():
            for c, v in enumerate(values):
                f.write(json.dumps({"type": "category", "metric": metric, "category": c,
                                    "name": names[c] if names else str(c),
                                    "value": None if v is None or (isinstance(v, float) and math.isnan(v)) else v})
                        + "\n")
    (out / "summary.txt").write_text(summary_table(report, names) + "\n")


def evaluate(model, dataset, widths=(3, 5, 9, 12), ods: ODSConfig | None = ODSConfig(), mode="whole",
             window=(512, 1024), stride=(341, 683), scales=(1.0,), flip=False, out_dir=None,
             error_maps=False, names=None) -> dict:
    """Evaluate ``model`` on a dataset of samples with attached boundaries."""
    num_categories = dataset.num_categories
    model.eval()
    ev = Evaluator(num_categories, widths, ods, dataset.boundary_cfg.ignore_index)
    err_dir = None
    if error_maps and out_dir is not None:
        err_dir = Path(out_dir) / "error_maps"
        err_dir.mkdir(parents=True, exist_ok=True)
    for i in range(len(dataset)):
        s = dataset[i]
        image = normalize(torch.from_numpy(s.image)).unsqueeze(0)
        seg, sbd = infer(model, image, mode, window, stride, scales, flip)
        if seg.shape[1] != num_categories:
            raise ValueError(f"model predicts {seg.shape[1]} categories, dataset has {num_categories}")
        pred = seg[0].argmax(0).numpy()
        probs, gtb = None, None
        if sbd is not None and ods is not None:
            probs = torch.sigmoid(sbd[0]).double().numpy()
            gtb = s.boundaries if probs.shape[0] == num_categories else s.binary_boundary[None]
        ev.update(pred, s.labels, probs, gtb)
        if err_dir is not None:
            write_label(err_dir / f"{s.name or i}.png", error_map(pred, s.labels, dataset.boundary_cfg.ignore_index))
    report = ev.report()
    if out_dir is not None:
        write_report(report, out_dir, names)
    return report
