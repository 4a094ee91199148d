"""Command line entry points: train, eval, export, gen-boundaries, synth."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .boundary_gen import BoundaryGenConfig, semantic_boundaries
from .metrics import ODSConfig
from .pipeline import SegDataset, load_directory_dataset, read_label, synth_shapes, write_directory_dataset
from .trainer import evaluate, export_inference, load_config, load_for_eval, train


def _pair(text):
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    return int(parts[0]), int(parts[1])


def _floats(text):
    return tuple(float(t) for t in text.split(",") if t)


def cmd_train(args):
    overrides = list(args.override or [])
    if args.crop:
        overrides.append(f"augment.crop=[{args.crop[0]}, {args.crop[1]}]")
    if args.out:
        overrides.append(f"output_dir={args.out}")
    cfg = load_config(args.config, overrides)
    result = train(cfg, resume=args.resume)
    print(f"checkpoint: {result.checkpoint}")
    if result.history:
        print(json.dumps(result.history[-1]))


def cmd_eval(args):
    model, n, cfg = load_for_eval(args.weights)
    data = load_directory_dataset(args.data, cfg.data.instance_sensitive)
    bcfg = BoundaryGenConfig(radius=cfg.data.radius, instance_sensitive=cfg.data.instance_sensitive,
                             ignore_index=cfg.data.ignore_index)
    ds = SegDataset(data, n, bcfg)
    widths = _floats(args.widths)
    scales = _floats(args.scales) if args.tta else (1.0,)
    report = evaluate(model, ds, widths=widths, ods=None if args.no_ods else ODSConfig(match_tolerance=args.tolerance),
                      mode=args.mode, window=args.window, stride=args.stride, scales=scales, flip=args.tta,
                      out_dir=args.out, error_maps=args.error_maps, names=cfg.data.category_names)
    print(json.dumps(report["summary"]))


def cmd_export(args):
    manifest = export_inference(args.checkpoint, args.out)
    print(json.dumps({k: v for k, v in manifest.items() if k != "config"}))


def cmd_gen_boundaries(args):
    from PIL import Image

    cfg = BoundaryGenConfig(radius=args.radius, instance_sensitive=args.instances is not None,
                            ignore_index=args.ignore_index, image_border_is_boundary=args.border)
    src = Path(args.labels)
    files = sorted(src.glob("*.png")) if src.is_dir() else [src]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for f in files:
        labels = read_label(f)
        inst = None
        if args.instances is not None:
            inst_path = Path(args.instances) / f.name
            if not inst_path.exists():
                raise FileNotFoundError(f"no instance map for {f.name} in {args.instances}")
            inst = read_label(inst_path)
        n = args.num_categories
        if n is None:
            valid = labels[labels != cfg.ignore_index]
            n = int(valid.max()) + 1 if valid.size else 1
        sem = semantic_boundaries(labels, n, cfg, inst)
        if args.format == "npz":
            np.savez_compressed(out / f"{f.stem}.npz", boundaries=sem)
        else:
            d = out / f.stem
            d.mkdir(exist_ok=True)
            for c in range(n):
                Image.fromarray(sem[c] * 255).save(d / f"{c:03d}.png")
        print(f"{f.name}: {n} categories, {int(sem.any(0).sum())} boundary pixels")


def cmd_synth(args):
    ds = synth_shapes(args.num, args.size, args.num_categories, args.seed,
                      palette_seed=args.palette_seed)
    write_directory_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")


def build_parser():
    p = argparse.ArgumentParser(prog="sbcb", description="Boundary-conditioned segmentation training toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a YAML config")
    t.add_argument("--config", help="YAML run config (defaults used when omitted)")
    t.add_argument("--override", action="append", metavar="KEY=VALUE", help="dotted config override")
    t.add_argument("--crop", type=_pair, help="training crop, e.g. 512x1024")
    t.add_argument("--out", help="output directory")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or inference artifact")
    e.add_argument("--weights", required=True)
    e.add_argument("--data", required=True, help="directory with images/ and labels/")
    e.add_argument("--widths", default="3,5,9,12", help="boundary F-score trimap widths")
    e.add_argument("--tolerance", type=float, default=2.0, help="mF matching tolerance in pixels")
    e.add_argument("--no-ods", action="store_true", help="skip mF (ODS) even if an SBD head is present")
    e.add_argument("--mode", choices=("whole", "slide"), default="whole")
    e.add_argument("--window", type=_pair, default=(512, 1024))
    e.add_argument("--stride", type=_pair, default=(341, 683))
    e.add_argument("--tta", action="store_true", help="multi-scale + flip averaging")
    e.add_argument("--scales", default="0.5,0.75,1.0,1.25,1.5,1.75,2.0")
    e.add_argument("--out", default="eval_out")
    e.add_argument("--error-maps", action="store_true")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export", help="drop the SBD head and write an inference artifact")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)

    g = sub.add_parser("gen-boundaries", help="write semantic boundary masks for label PNGs")
    g.add_argument("--labels", required=True, help="label PNG or directory of them")
    g.add_argument("--out", required=True)
    g.add_argument("--radius", type=float, default=2)
    g.add_argument("--instances", help="directory of instance PNGs (enables instance-sensitive bands)")
    g.add_argument("--num-categories", type=int)
    g.add_argument("--ignore-index", type=int, default=255)
    g.add_argument("--border", action="store_true", help="treat the image border as an interface")
    g.add_argument("--format", choices=("png", "npz"), default="png")
    g.set_defaults(func=cmd_gen_boundaries)

    s = sub.add_parser("synth", help="write a synthetic-shapes dataset to disk")
    s.add_argument("--out", required=True)
    s.add_argument("--num", type=int, default=100)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--num-categories", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--palette-seed", type=int, default=0,
                   help="category colours; keep equal to data.synth_seed of the training run")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
