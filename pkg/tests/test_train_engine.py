import json
import math
import zipfile

import numpy as np
import pytest
import torch

from plunext.checkpoint import Checkpoint, export_inference
from plunext.config import LossWeights, ModelConfig, RunConfig, TrainConfig
from plunext.data import Sample, SynthConfig, synth_dataset
from plunext.errors import ConfigError, DivergenceError
from plunext.losses import LOSS_NAMES
from plunext.train import build_model, cosine_lr, evaluate, inference_model, to_batch, train

SMALL = dict(stage_channels=(4, 8, 8, 16), bottleneck_channels=16, mlp_ratio=2, dle_lengths=(1, 3, 5))


def small_run(epochs=2, batch_size=2, seed=0, heads=("ed1", "ed2", "lf1", "lf2"), **train_kw):
    return RunConfig(model=ModelConfig(heads=heads, **SMALL),
                     train=TrainConfig(epochs=epochs, batch_size=batch_size, seed=seed, **train_kw))


def small_data(n=4, seed=11, size=32):
    return synth_dataset(SynthConfig(canvas=(size, size), seed=seed), n)


# ---------------------------------------------------------------- schedule

def test_schedule_endpoints_exact():
    assert cosine_lr(0, 1000) == 0.0005
    assert cosine_lr(999, 1000) == 5e-6
    for total in (2, 3, 17, 400, 12345):
        assert cosine_lr(0, total) == 5e-4
        assert abs(cosine_lr(total - 1, total) - 5e-6) <= 1e-9


def test_schedule_monotone():
    vals = [cosine_lr(s, 500) for s in range(500)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    assert abs(cosine_lr(250, 501) - (5e-4 + 5e-6) / 2) <= 1e-12


def test_schedule_used_by_trainer():
    cfg = small_run(epochs=3, batch_size=2)
    _, _, records = train(cfg, small_data(4))
    assert records[-1]["lr"] == 5e-6
    assert records[0]["lr"] == cosine_lr(1, 6)


def test_config_invariants():
    with pytest.raises(ConfigError):
        TrainConfig(lr0=1e-6, lr_min=1e-5)
    with pytest.raises(ConfigError):
        LossWeights(iota=math.nan)
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"learning_rate": 0.1}})


# ---------------------------------------------------------------- training loop

def test_same_seed_same_trajectory():
    data = small_data(4)
    runs = [train(small_run(epochs=2), data)[2] for _ in range(2)]
    for a, b in zip(*runs):
        assert abs(a["total"] - b["total"]) <= 1e-6
    assert runs[0][-1]["total"] == runs[1][-1]["total"]


def test_log_records_every_component(tmp_path):
    path = tmp_path / "log.jsonl"
    train(small_run(epochs=2), small_data(4), log_path=path)
    lines = [json.loads(l) for l in path.read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [0, 1]
    for r in lines:
        assert set(r) == {"epoch", "total", "lr", *LOSS_NAMES}
        assert all(r[k] > 0 for k in LOSS_NAMES)


def test_empty_dataset_rejected():
    with pytest.raises(ConfigError):
        train(small_run(), [])


def test_nan_names_component(monkeypatch):
    from plunext import lf_head

    def poisoned(logits, gt, alpha=1.0, beta=0.4):
        z = torch.full((), math.nan, dtype=logits.dtype) + 0 * logits.sum()
        return z, z, z

    monkeypatch.setattr(lf_head, "lf_loss", poisoned)
    with pytest.raises(DivergenceError, match="l_lf1"):
        train(small_run(epochs=1), small_data(2))


def test_zero_booster_weights_match_head_free_first_step():
    x, y = to_batch(small_data(2))
    updates = []
    for heads, w in ((("ed1", "ed2", "lf1", "lf2"), LossWeights(iota=0, kappa=0, lam=0, mu=0)), ((), LossWeights())):
        m = build_model(ModelConfig(heads=heads, **SMALL), seed=3).double()
        opt = torch.optim.AdamW(m.parameters(), lr=5e-4, weight_decay=0.05)
        before = {k: v.clone() for k, v in m.backbone.state_dict().items()}
        m.forward_train(x.double(), y, w).total.backward()
        opt.step()
        updates.append({k: v - before[k] for k, v in m.backbone.state_dict().items()})
    for k in updates[0]:
        assert float((updates[0][k] - updates[1][k]).abs().max()) <= 1e-9, k


# ---------------------------------------------------------------- checkpoints

@pytest.fixture(scope="module")
def trained():
    torch.set_num_threads(1)
    ckpt, model, _ = train(small_run(epochs=1), small_data(4))
    return ckpt, model


def test_checkpoint_roundtrip(tmp_path, trained):
    ckpt, model = trained
    ckpt.save(tmp_path / "c.zip")
    back = Checkpoint.load(tmp_path / "c.zip")
    assert back.manifest == ckpt.manifest
    assert back.step == ckpt.step == 2
    assert back.config == ckpt.config
    for k, v in ckpt.tensors.items():
        assert torch.equal(back.tensors[k], v)
    for n, s in ckpt.optimizer["state"].items():
        for k, v in s.items():
            assert torch.equal(back.optimizer["state"][n][k], v)
    with zipfile.ZipFile(tmp_path / "c.zip") as zf:
        meta = json.loads(zf.read("manifest.json"))
    assert meta["format_version"] == 1
    assert {e["component"] for e in meta["manifest"]} == {"backbone", "ed1", "ed2", "lf1", "lf2"}


def test_manifest_shape_mismatch_rejected(trained):
    ckpt, _ = trained
    bad = Checkpoint([dict(e) for e in ckpt.manifest], dict(ckpt.tensors))
    bad.manifest[0]["shape"] = [999]
    with pytest.raises(ConfigError):
        bad.validate()


def test_untagged_parameter_is_hard_error(trained):
    ckpt, _ = trained
    bad = Checkpoint([dict(e) for e in ckpt.manifest], dict(ckpt.tensors))
    bad.manifest[0]["component"] = "decoder"
    with pytest.raises(ConfigError):
        export_inference(bad)

    class Stray(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.extra = torch.nn.Linear(2, 2)

    with pytest.raises(ConfigError, match="component tag"):
        Checkpoint.from_model(Stray())


def test_export_idempotent_and_counts(trained):
    ckpt, model = trained
    exp = export_inference(ckpt)
    again = export_inference(exp)
    assert again.manifest == exp.manifest
    assert all(torch.equal(again.tensors[k], exp.tensors[k]) for k in exp.tensors)
    assert exp.components() == {"backbone"}
    assert exp.count_params() == model.count_params("infer") < ckpt.count_params()
    assert not exp.optimizer


def test_default_config_export_count():
    torch.manual_seed(0)
    from plunext.backbone import PLUNeXt

    m = PLUNeXt(ModelConfig())
    exp = export_inference(Checkpoint.from_model(m))
    assert exp.count_params() == m.count_params("infer")


@torch.no_grad()
def test_export_preserves_masks_on_20_images(trained, tmp_path):
    ckpt, model = trained
    model.eval()
    export_inference(ckpt).save(tmp_path / "i.zip")
    stripped = inference_model(Checkpoint.load(tmp_path / "i.zip"))
    g = torch.Generator().manual_seed(21)
    for _ in range(20):
        x = torch.rand(1, 3, 32, 32, generator=g)
        a, b = model.forward_infer(x), stripped.forward_infer(x)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


# ---------------------------------------------------------------- evaluation

def test_evaluate_deterministic(trained):
    ckpt, _ = trained
    data = small_data(6, seed=5)
    assert evaluate(ckpt, data) == evaluate(ckpt, data)


def test_condition_average_is_mean(trained):
    ckpt, _ = trained
    conds = ("original", "day", "fog", "night", "snow")
    data = []
    for i, c in enumerate(conds):
        for s in small_data(2, seed=30 + i):
            data.append(Sample(s.image, s.mask, f"{c}/{s.id}", c))
    out = evaluate(ckpt, data)
    assert sorted(out["conditions"]) == sorted(conds)
    mean = sum(out["conditions"][c]["miou"] for c in conds) / 5
    assert abs(out["average_miou"] - mean) <= 1e-9


def test_class_count_mismatch(trained):
    ckpt, _ = trained
    bad = Checkpoint(ckpt.manifest, ckpt.tensors, config={"model": {**ckpt.config["model"], "num_classes": 3}})
    with pytest.raises(ConfigError):
        evaluate(bad, small_data(1))


def test_evaluate_uses_backbone_only(trained):
    ckpt, _ = trained
    data = small_data(3, seed=8)
    assert evaluate(ckpt, data) == evaluate(export_inference(ckpt), data)


def test_augmented_training_runs():
    _, _, rec = train(small_run(epochs=1, augment=True), small_data(2))
    assert np.isfinite(rec[0]["total"])
