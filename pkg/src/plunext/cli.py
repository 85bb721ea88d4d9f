"""Command-line entry point: synth, train (single run or ablation sweep), eval, infer, params."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import train as engine
from .checkpoint import Checkpoint
from .config import ABLATION_GRID, HEAD_NAMES, RunConfig, SynthSection, load_config, parse_heads, save_config
from .data import IMAGE_SUFFIXES, load_dataset, resize_image, synth_dataset, write_dataset
from .errors import ConfigError, ContractError, DivergenceError

log = logging.getLogger("plunext")

OVERLAY_RGB = (255, 0, 0)


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "heads", None) is not None:
        cfg.model = dataclasses.replace(cfg.model, heads=parse_heads(args.heads))
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def _prepare_out(out: Path, force: bool):
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
        for sub in ("images", "masks", "overlays"):
            shutil.rmtree(out / sub, ignore_errors=True)
    out.mkdir(parents=True, exist_ok=True)


def _datasets(cfg: RunConfig):
    d = cfg.data
    if d.train_root:
        train = load_dataset(d.train_root, d.layout, d.image_size)
        val = load_dataset(d.val_root, d.layout, d.image_size) if d.val_root else None
        return train, val
    syn = d.synth or SynthSection()
    sc = syn.synth_config()
    return synth_dataset(sc, syn.train_count), synth_dataset(sc, syn.val_count, start=syn.train_count) or None


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    syn = cfg.data.synth or SynthSection()
    if args.seed is not None:
        syn.seed = args.seed
    cfg.data.synth = syn
    count = syn.train_count if args.count is None else args.count
    if count < 0:
        raise ConfigError("--count must be >= 0")
    out = Path(args.out or cfg.out_dir)
    _prepare_out(out, args.force)
    paths = write_dataset(synth_dataset(syn.synth_config(), count, start=args.start), out)
    cfg.out_dir = str(out)
    save_config(cfg, out / "config.json")
    print(f"wrote {len(paths) // 2} samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg.out_dir)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    train_set, val_set = _datasets(cfg)
    if args.sweep:
        seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.train.seed]
        save_config(cfg, out / "config.json")
        results = engine.ablation_sweep(cfg, train_set, val_set or train_set, seeds, out)
        table = engine.ablation_table(results)
        (out / "ablation.json").write_text(json.dumps(results, indent=2) + "\n")
        (out / "ablation.md").write_text(table)
        print(table, end="")
        return 0
    save_config(cfg, out / "config.json")
    ckpt, _, records = engine.train(cfg, train_set, val_set, log_path=out / "log.jsonl")
    engine.save_run(ckpt, out)
    last = records[-1]
    print(json.dumps({k: last[k] for k in ("epoch", "total", "lr")} | ({"val": last["val"]} if "val" in last else {})))
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    ckpt = Checkpoint.load(args.checkpoint)
    root = args.data or cfg.data.val_root
    if root is None:
        raise ConfigError("no evaluation data: pass --data or set data.val_root in the config")
    layout = args.layout or cfg.data.layout
    samples = load_dataset(root, layout, args.size or cfg.data.image_size)
    report = engine.evaluate(ckpt, samples, args.mode)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "metrics.json").write_text(text + "\n")
    print(text)
    return 0


def _images(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise FileNotFoundError(f"no images under {path}")
        return files
    if not path.exists():
        raise FileNotFoundError(f"missing input {path}")
    return [path]


def overlay(image_rgb: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Paint line pixels pure red on a uint8 (H, W, 3) image."""
    out = image_rgb.copy()
    out[mask.astype(bool)] = OVERLAY_RGB
    return out


def cmd_infer(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    model = engine.inference_model(ckpt)
    size = args.size or ckpt.config.get("data", {}).get("image_size", 512)
    out = Path(args.out or "predictions")
    _prepare_out(out, args.force)
    (out / "masks").mkdir()
    if args.overlay:
        (out / "overlays").mkdir()
    for p in _images(Path(args.input)):
        try:
            with Image.open(p) as im:
                rgb = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        except OSError as e:
            raise OSError(f"unreadable image {p}: {e}") from e
        image = resize_image(rgb.transpose(2, 0, 1), (size, size))
        mask, _ = model.forward_infer(torch.from_numpy(image)[None])
        mask = mask[0].numpy().astype(np.uint8)
        Image.fromarray(mask * 255, "L").save(out / "masks" / f"{p.stem}.png")
        if args.overlay:
            base = np.round(image.transpose(1, 2, 0) * 255.0).astype(np.uint8)
            Image.fromarray(overlay(base, mask), "RGB").save(out / "overlays" / f"{p.stem}.png")
    print(f"wrote predictions to {out}")
    return 0


def _millions(n: int) -> str:
    return f"{n / 1e6:.2f}"


def cmd_params(args) -> int:
    cfg = _resolve(args)
    model = engine.build_model(cfg.model, cfg.train.seed)
    comps = model.component_params()
    rows = []
    for name in ("backbone",) + HEAD_NAMES:
        n = comps.get(name, 0)
        rows.append((name, n if name == "backbone" else 0, n))
    infer, train_ = model.count_params("infer"), model.count_params("train")
    if args.json:
        print(json.dumps({"components": {n: {"infer": i, "train": t} for n, i, t in rows},
                          "total": {"infer": infer, "train": train_}}, indent=2))
        return 0
    print(f"{'component':<10} {'infer(train)':>24}")
    for name, i, t in rows:
        print(f"{name:<10} {f'{i}({t})':>24}")
    print(f"{'total':<10} {f'{infer}({train_})':>24}")
    print(f"{'total [M]':<10} {f'{_millions(infer)}({_millions(train_)})':>24}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="plunext", description="Power-line segmentation with detachable booster heads.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, heads=True):
        sp.add_argument("--config", type=Path, help="YAML or JSON run config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=str)
        sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
        if heads:
            sp.add_argument("--heads", help="comma list from ed1,ed2,lf1,lf2 or 'none'")

    sp = sub.add_parser("synth", help="write a synthetic thin-line dataset")
    common(sp, heads=False)
    sp.add_argument("--count", type=int, help="number of samples (default: data.synth.train_count)")
    sp.add_argument("--start", type=int, default=0, help="first sample index")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train one model or the ablation grid")
    common(sp)
    sp.add_argument("--sweep", action="store_true", help=f"train every variant in {', '.join(ABLATION_GRID)}")
    sp.add_argument("--seeds", help="comma list of training seeds for --sweep")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a dataset folder")
    sp.add_argument("--config", type=Path)
    sp.add_argument("--checkpoint", required=True, type=Path)
    sp.add_argument("--data", type=Path)
    sp.add_argument("--layout", choices=("ttpla_like", "vitl_like"))
    sp.add_argument("--size", type=int)
    sp.add_argument("--mode", choices=("pooled", "per_image"), default="pooled")
    sp.add_argument("--out", type=str)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("infer", help="predict masks (and overlays) for images")
    sp.add_argument("--checkpoint", required=True, type=Path)
    sp.add_argument("--input", required=True, type=Path, help="image file or folder")
    sp.add_argument("--size", type=int, help="square model input size, multiple of 32")
    sp.add_argument("--overlay", action="store_true", help="also write red overlays")
    sp.add_argument("--out", type=str)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("params", help="parameter counts per component, infer(train)")
    common(sp)
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_params)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractError, DivergenceError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
