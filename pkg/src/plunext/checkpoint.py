"""Versioned checkpoint archive: JSON manifest + raw little-endian tensor blobs in a zip.

Every tensor carries one component tag (backbone, ed1, ed2, lf1, lf2) taken
from its module path; stripping the booster tags yields the inference model.
"""
from __future__ import annotations

import dataclasses
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import HEAD_NAMES
from .errors import ConfigError

FORMAT_VERSION = 1
COMPONENTS = ("backbone",) + HEAD_NAMES

_DTYPES = {torch.float32: "<f4", torch.float64: "<f4", torch.int64: "<i8"}
_TORCH = {"<f4": torch.float32, "<i8": torch.int64}


def component_of(name: str) -> str:
    tag = name.split(".", 1)[0]
    if tag not in COMPONENTS:
        raise ConfigError(f"tensor {name!r} has no component tag (prefix must be one of {COMPONENTS})")
    return tag


@dataclass
class Checkpoint:
    manifest: list[dict]  # {name, shape, dtype, component, kind: param|buffer}
    tensors: dict[str, torch.Tensor]
    optimizer: dict = field(default_factory=dict)  # {"param_groups": [...], "state": {name: {key: tensor}}}
    step: int = 0
    config: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model, optimizer=None, step: int = 0, config: dict | None = None) -> "Checkpoint":
        manifest, tensors = [], {}
        param_names = {n for n, _ in model.named_parameters()}
        for name, t in model.state_dict().items():
            t = t.detach().cpu()
            if t.dtype not in _DTYPES:
                raise ConfigError(f"unsupported dtype {t.dtype} for {name}")
            manifest.append({
                "name": name,
                "shape": list(t.shape),
                "dtype": _DTYPES[t.dtype],
                "component": component_of(name),
                "kind": "param" if name in param_names else "buffer",
            })
            tensors[name] = t.to(_TORCH[_DTYPES[t.dtype]]).clone()
        opt = _optimizer_state(model, optimizer) if optimizer is not None else {}
        config = json.loads(json.dumps(config or {}))
        if "model" not in config and hasattr(model, "cfg"):
            config["model"] = json.loads(json.dumps(dataclasses.asdict(model.cfg)))
        return cls(manifest, tensors, opt, step, config)

    def validate(self):
        names = set()
        for e in self.manifest:
            comp = e.get("component")
            if comp not in COMPONENTS:
                raise ConfigError(f"manifest entry {e.get('name')!r} has invalid component tag {comp!r}")
            if comp != component_of(e["name"]):
                raise ConfigError(f"manifest entry {e['name']!r} tagged {comp!r}")
            t = self.tensors.get(e["name"])
            if t is None or list(t.shape) != list(e["shape"]):
                raise ConfigError(f"tensor {e['name']!r} missing or shape differs from manifest")
            names.add(e["name"])
        extra = set(self.tensors) - names
        if extra:
            raise ConfigError(f"tensors missing from manifest: {sorted(extra)}")

    def count_params(self, components=None) -> int:
        comps = set(components or COMPONENTS)
        return sum(int(np.prod(e["shape"], dtype=np.int64)) for e in self.manifest
                   if e["kind"] == "param" and e["component"] in comps)

    def components(self) -> set[str]:
        return {e["component"] for e in self.manifest}

    def state_dict(self, components=None) -> dict[str, torch.Tensor]:
        comps = set(components or COMPONENTS)
        return {e["name"]: self.tensors[e["name"]] for e in self.manifest if e["component"] in comps}

    def load_into(self, model, strict: bool = True):
        """Copy tensors into ``model``; booster tensors absent from the model are an error when strict."""
        self.validate()
        own = model.state_dict()
        missing = sorted(set(own) - set(self.tensors))
        unexpected = sorted(set(self.tensors) - set(own))
        if strict and (missing or unexpected):
            raise ConfigError(f"checkpoint/model mismatch: missing={missing} unexpected={unexpected}")
        with torch.no_grad():
            for name, t in self.tensors.items():
                if name not in own:
                    continue
                if own[name].shape != t.shape:
                    raise ConfigError(f"{name}: checkpoint shape {tuple(t.shape)} != model {tuple(own[name].shape)}")
                own[name].copy_(t.to(own[name].dtype))
        return model

    # ---------------------------------------------------------------- archive io

    def save(self, path):
        self.validate()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {
            "format_version": self.version,
            "step": self.step,
            "config": self.config,
            "manifest": self.manifest,
            "optimizer": {"param_groups": self.optimizer.get("param_groups", []),
                          "state": {n: {k: _blob_meta(v) for k, v in s.items()}
                                    for n, s in self.optimizer.get("state", {}).items()}},
        }
        with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
            zf.writestr("manifest.json", json.dumps(meta, indent=1, sort_keys=True))
            for e in self.manifest:
                zf.writestr(f"tensors/{e['name']}", _to_bytes(self.tensors[e["name"]], e["dtype"]))
            for n, s in self.optimizer.get("state", {}).items():
                for k, v in s.items():
                    zf.writestr(f"optim/{n}/{k}", _to_bytes(v, _DTYPES[v.dtype]))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("manifest.json"))
            if meta.get("format_version") != FORMAT_VERSION:
                raise ConfigError(f"{path}: unsupported checkpoint format {meta.get('format_version')}")
            tensors = {e["name"]: _from_bytes(zf.read(f"tensors/{e['name']}"), e["dtype"], e["shape"])
                       for e in meta["manifest"]}
            opt_meta = meta.get("optimizer") or {}
            state = {n: {k: _from_bytes(zf.read(f"optim/{n}/{k}"), m["dtype"], m["shape"]) for k, m in s.items()}
                     for n, s in (opt_meta.get("state") or {}).items()}
        optimizer = {"param_groups": opt_meta.get("param_groups", []), "state": state} if state else {}
        ckpt = cls(meta["manifest"], tensors, optimizer, meta.get("step", 0), meta.get("config", {}))
        ckpt.validate()
        return ckpt


def export_inference(ckpt: Checkpoint) -> Checkpoint:
    """Drop every booster-tagged tensor and the optimizer state."""
    ckpt.validate()
    manifest = [dict(e) for e in ckpt.manifest if e["component"] == "backbone"]
    tensors = {e["name"]: ckpt.tensors[e["name"]].clone() for e in manifest}
    config = json.loads(json.dumps(ckpt.config))
    if "model" in config:
        config["model"]["heads"] = []
    return Checkpoint(manifest, tensors, {}, ckpt.step, config, ckpt.version)


def _blob_meta(t):
    return {"shape": list(t.shape), "dtype": _DTYPES[t.dtype]}


def _to_bytes(t: torch.Tensor, dtype: str) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().numpy().astype(dtype)).tobytes()


def _from_bytes(b: bytes, dtype: str, shape) -> torch.Tensor:
    arr = np.frombuffer(b, dtype=dtype).reshape(shape)
    return torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))


def _optimizer_state(model, optimizer) -> dict:
    names = {id(p): n for n, p in model.named_parameters()}
    state = {}
    for p, s in optimizer.state.items():
        state[names[id(p)]] = {k: (v.detach().cpu().reshape(-1) if v.dim() == 0 else v.detach().cpu()).float()
                               for k, v in s.items() if isinstance(v, torch.Tensor)}
    groups = [{k: v for k, v in g.items() if k != "params"} for g in optimizer.param_groups]
    groups = json.loads(json.dumps(groups, default=str))
    return {"param_groups": groups, "state": state}


def restore_optimizer(ckpt: Checkpoint, model, optimizer):
    """Inverse of the optimizer capture in ``from_model``."""
    if not ckpt.optimizer:
        return optimizer
    by_name = dict(model.named_parameters())
    for n, s in ckpt.optimizer["state"].items():
        p = by_name[n]
        optimizer.state[p] = {k: (v.reshape(()) if k == "step" else v.to(p.dtype)).clone() for k, v in s.items()}
    for g, saved in zip(optimizer.param_groups, ckpt.optimizer["param_groups"]):
        for k in ("lr", "weight_decay"):
            if k in saved:
                g[k] = float(saved[k])
    return optimizer
