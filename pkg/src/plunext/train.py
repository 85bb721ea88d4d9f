"""Training loop (AdamW + per-step cosine annealing), evaluation and inference export."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from collections import defaultdict
from pathlib import Path

import numpy as np
import torch

from .backbone import PLUNeXt
from .checkpoint import Checkpoint, export_inference
from .config import ABLATION_GRID, ModelConfig, RunConfig, save_config
from .errors import ConfigError, DivergenceError
from .losses import LOSS_NAMES
from .metrics import MetricReport, aggregate_dataset_metrics, confusion_counts

log = logging.getLogger(__name__)


def cosine_lr(step: int, total_steps: int, lr0: float = 5e-4, lr_min: float = 5e-6) -> float:
    """Cosine annealing from lr0 at step 0 to lr_min at step total_steps - 1, no restarts."""
    if total_steps <= 1:
        return lr0
    step = min(max(step, 0), total_steps - 1)
    f = 0.5 * (1.0 + math.cos(math.pi * step / (total_steps - 1)))
    # written as a convex mix so both endpoints are exact in floating point
    return f * lr0 + (1.0 - f) * lr_min


def build_model(cfg: ModelConfig, seed: int) -> PLUNeXt:
    torch.manual_seed(seed)
    return PLUNeXt(cfg)


def to_batch(samples, device="cpu"):
    images = torch.from_numpy(np.stack([s.image for s in samples])).to(device)
    masks = torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.int64)).to(device)
    return images, masks


def _check_finite(bundle, epoch, step):
    for name, v in bundle.components().items():
        if not torch.isfinite(v):
            raise DivergenceError(f"non-finite {name} ({float(v.detach())}) at epoch {epoch}, step {step}")
    if not torch.isfinite(bundle.total):
        raise DivergenceError(f"non-finite total loss at epoch {epoch}, step {step}")


def make_optimizer(model, cfg) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr0, weight_decay=cfg.weight_decay)


def train(cfg: RunConfig, train_samples, val_samples=None, log_path=None, augment_fn=None):
    """Train a fresh model; returns (checkpoint, model, log records).

    Each log record holds the epoch, the mean of every loss component over
    the epoch's steps, the total and the last learning rate used.
    """
    from .data import augment as default_augment

    if not train_samples:
        raise ConfigError("training dataset is empty")
    tc = cfg.train
    model = build_model(cfg.model, tc.seed)
    model.train()
    opt = make_optimizer(model, tc)
    n = len(train_samples)
    steps_per_epoch = math.ceil(n / tc.batch_size)
    total_steps = steps_per_epoch * tc.epochs
    order_gen = torch.Generator().manual_seed(tc.seed)
    augment_fn = augment_fn or default_augment
    weights = tc.loss
    records = []
    step = 0
    sink = open(log_path, "w") if log_path else None
    try:
        for epoch in range(tc.epochs):
            sums = defaultdict(float)
            perm = torch.randperm(n, generator=order_gen).tolist()
            for b in range(steps_per_epoch):
                batch = [train_samples[i] for i in perm[b * tc.batch_size:(b + 1) * tc.batch_size]]
                if tc.augment:
                    batch = [augment_fn(s, tc.seed * 100003 + epoch) for s in batch]
                images, masks = to_batch(batch)
                lr = cosine_lr(step, total_steps, tc.lr0, tc.lr_min)
                for g in opt.param_groups:
                    g["lr"] = lr
                bundle = model.forward_train(images, masks, weights)
                _check_finite(bundle, epoch, step)
                opt.zero_grad(set_to_none=True)
                bundle.total.backward()
                opt.step()
                step += 1
                for k, v in bundle.as_floats().items():
                    sums[k] += v
            rec = {"epoch": epoch}
            rec.update({k: sums[k] / steps_per_epoch for k in LOSS_NAMES + ("total",)})
            rec["lr"] = lr
            if val_samples is not None and (epoch == tc.epochs - 1):
                rec["val"] = evaluate_model(model, val_samples).to_dict()
                model.train()
            records.append(rec)
            log.info("epoch %d total %.4f lr %.2e", epoch, rec["total"], lr)
            if sink:
                sink.write(json.dumps(rec) + "\n")
                sink.flush()
    finally:
        if sink:
            sink.close()
    ckpt = Checkpoint.from_model(model, opt, step, cfg.to_dict())
    return ckpt, model, records


# ---------------------------------------------------------------- inference / evaluation

def inference_model(ckpt: Checkpoint) -> PLUNeXt:
    """Head-free model holding only the checkpoint's backbone tensors, in eval mode."""
    mcfg = dict(ckpt.config.get("model", {}))
    mcfg["heads"] = ()
    try:
        cfg = ModelConfig(**mcfg)
    except (TypeError, ConfigError) as e:
        raise ConfigError(f"checkpoint model config is not usable: {e}") from e
    model = PLUNeXt(cfg)
    ckpt.validate()
    backbone_only = Checkpoint([e for e in ckpt.manifest if e["component"] == "backbone"],
                               ckpt.state_dict(["backbone"]), config=ckpt.config)
    backbone_only.load_into(model)
    return model.eval()


@torch.no_grad()
def predict(model: PLUNeXt, samples, batch_size: int = 8):
    """Yield (sample, mask, probabilities) with the model's decode branch."""
    was_training = model.training
    model.eval()
    try:
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            images, _ = to_batch(chunk)
            masks, probs = model.forward_infer(images)
            for s, m, p in zip(chunk, masks, probs):
                yield s, m.numpy().astype(np.uint8), p.numpy()
    finally:
        model.train(was_training)


def evaluate_model(model: PLUNeXt, samples, mode: str = "pooled") -> MetricReport:
    counts = [confusion_counts(m, s.mask) for s, m, _ in predict(model, samples)]
    return aggregate_dataset_metrics(counts, mode)


def evaluate(ckpt: Checkpoint, samples, mode: str = "pooled") -> dict:
    """Metrics from the inference path only.

    Returns {"overall": report} and, when samples carry conditions, one
    report per condition plus ``average_miou`` = mean of condition mIoUs.
    """
    num_classes = ckpt.config.get("model", {}).get("num_classes", 2)
    if num_classes != 2:
        raise ConfigError(f"checkpoint predicts {num_classes} classes; evaluation expects 2")
    model = inference_model(ckpt)
    counts = {}
    for s, m, _ in predict(model, samples):
        counts[s.id] = (s.condition, confusion_counts(m, s.mask))
    out = {"overall": aggregate_dataset_metrics([c for _, c in counts.values()], mode).to_dict()}
    conditions = sorted({c for c, _ in counts.values() if c is not None})
    if conditions:
        per = {}
        for cond in conditions:
            per[cond] = aggregate_dataset_metrics([c for k, c in counts.values() if k == cond], mode).to_dict()
        out["conditions"] = per
        out["average_miou"] = float(np.mean([per[c]["miou"] for c in conditions]))
    return out


def save_run(ckpt: Checkpoint, out_dir, export: bool = True):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt.save(out_dir / "checkpoint.zip")
    if export:
        export_inference(ckpt).save(out_dir / "inference.zip")


# ---------------------------------------------------------------- ablation grid

def ablation_sweep(cfg: RunConfig, train_samples, val_samples, seeds=(0,), out_dir=None, grid=None):
    """Train every head variant for every seed; returns {variant: [val report dict per seed]}.

    With ``out_dir`` each run lands in out_dir/<variant>/seed<k>/.
    """
    grid = grid or ABLATION_GRID
    results = {}
    for name, heads in grid.items():
        results[name] = []
        for seed in seeds:
            run = RunConfig.from_dict(cfg.to_dict())
            run.model = dataclasses.replace(run.model, heads=heads)
            run.train = dataclasses.replace(run.train, seed=seed)
            run_dir = Path(out_dir) / name / f"seed{seed}" if out_dir else None
            if run_dir:
                run_dir.mkdir(parents=True, exist_ok=True)
                run.out_dir = str(run_dir)
                save_config(run, run_dir / "config.json")
            ckpt, model, _ = train(run, train_samples, log_path=run_dir / "log.jsonl" if run_dir else None)
            report = evaluate(ckpt, val_samples)["overall"]
            log.info("ablation %s seed %d: F1 %.4f", name, seed, report["f1"])
            if run_dir:
                save_run(ckpt, run_dir)
                (run_dir / "metrics.json").write_text(json.dumps(report, indent=2) + "\n")
            results[name].append(report)
    return results


def ablation_table(results: dict) -> str:
    """Markdown table of mean (and spread) of val metrics per variant."""
    rows = ["| variant | heads | seeds | F1 | IoU | mIoU | F1 min | F1 max |",
            "|---|---|---|---|---|---|---|---|"]
    for name, reports in results.items():
        f1 = [r["f1"] for r in reports]
        heads = ",".join(ABLATION_GRID.get(name, ())) or "none"
        rows.append(f"| {name} | {heads} | {len(reports)} | {np.mean(f1):.4f} | "
                    f"{np.mean([r['iou'] for r in reports]):.4f} | {np.mean([r['miou'] for r in reports]):.4f} | "
                    f"{min(f1):.4f} | {max(f1):.4f} |")
    return "\n".join(rows) + "\n"
