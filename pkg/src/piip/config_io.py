"""JSON configuration files: strict parsing, range checks and canonical serialisation.

A config file is a JSON object with three sections::

    {
      "model": {"preset": "piip-micro"} | {"branches": [...], "interactions": {...},
                                          "mode": "dense", "merge_subset": [true, true, true],
                                          "num_classes": 8, "ablation": false},
      "train": {"epochs": 30, "batch": 16, "lr": 0.1, "seed": 0},
      "io": {"checkpoint_path": "model.ckpt", "csv_path": "metrics.csv"}
    }

Unknown keys anywhere are rejected. Serialisation always writes the fully
expanded model (presets are resolved), sorted keys and two-space indent, so
parse -> serialise -> parse is a fixed point.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .config import BranchConfig, InteractionSpec, PiipConfig, preset
from .errors import ConfigError

BRANCH_KEYS = {f.name for f in fields(BranchConfig)}
INTERACTION_KEYS = {f.name for f in fields(InteractionSpec)}
MODEL_KEYS = {"preset", "branches", "interactions", "mode", "merge_subset", "num_classes", "ablation"}


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 30
    batch: int = 16
    lr: float = 0.1
    seed: int = 0

    def problems(self) -> list[str]:
        out = []
        if not 0 <= self.epochs <= 100_000:
            out.append("train.epochs must lie in [0, 100000]")
        if not 1 <= self.batch <= 65_536:
            out.append("train.batch must lie in [1, 65536]")
        if not 0.0 <= self.lr <= 100.0:
            out.append("train.lr must lie in [0, 100]")
        if not 0 <= self.seed < 2 ** 63:
            out.append("train.seed must be a non-negative 63-bit integer")
        return out


@dataclass(frozen=True)
class IoSettings:
    checkpoint_path: str | None = None
    csv_path: str | None = None


@dataclass(frozen=True)
class ConfigFile:
    model: PiipConfig
    train: TrainSettings = field(default_factory=TrainSettings)
    io: IoSettings = field(default_factory=IoSettings)


def _check_keys(obj: Any, allowed: set[str], where: str) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    return obj


def _typed(value, kind, where: str):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    raise TypeError(kind)


_BRANCH_TYPES = {"depth": int, "dim": int, "heads": int, "patch": int, "resolution": int,
                 "mlp_ratio": float, "use_cls_token": bool}
_INTERACTION_TYPES = {"count": int, "attention": str, "direction": str, "sample_points": int,
                      "ffn_ratio": float, "scalar_gates": bool}


def branch_from_dict(d: dict, where: str = "branch") -> BranchConfig:
    _check_keys(d, BRANCH_KEYS, where)
    missing = {"depth", "dim", "heads"} - set(d)
    if missing:
        raise ConfigError(f"{where} missing key(s): {', '.join(sorted(missing))}")
    kw = {k: _typed(v, _BRANCH_TYPES[k], f"{where}.{k}") for k, v in d.items()}
    return BranchConfig(**kw)


def model_from_dict(d: dict) -> PiipConfig:
    _check_keys(d, MODEL_KEYS, "model")
    if "preset" in d:
        base = preset(_typed(d["preset"], str, "model.preset"))
        if "branches" in d:
            raise ConfigError("model.preset and model.branches are mutually exclusive")
    elif "branches" in d:
        if not isinstance(d["branches"], list) or not d["branches"]:
            raise ConfigError("model.branches must be a non-empty list")
        base = PiipConfig(branches=tuple(branch_from_dict(b, f"model.branches[{i}]")
                                         for i, b in enumerate(d["branches"])))
    else:
        raise ConfigError("model needs either 'preset' or 'branches'")
    kw: dict[str, Any] = {}
    if "interactions" in d:
        spec = _check_keys(d["interactions"], INTERACTION_KEYS, "model.interactions")
        kw["interactions"] = InteractionSpec(**{k: _typed(v, _INTERACTION_TYPES[k], f"model.interactions.{k}")
                                                for k, v in spec.items()})
    if "mode" in d:
        kw["mode"] = _typed(d["mode"], str, "model.mode")
    if "merge_subset" in d:
        ms = d["merge_subset"]
        if ms is not None:
            if not isinstance(ms, list):
                raise ConfigError("model.merge_subset must be a list of booleans or null")
            ms = tuple(_typed(v, bool, "model.merge_subset[]") for v in ms)
        kw["merge_subset"] = ms
    if "num_classes" in d:
        kw["num_classes"] = _typed(d["num_classes"], int, "model.num_classes")
    if "ablation" in d:
        kw["ablation"] = _typed(d["ablation"], bool, "model.ablation")
    cfg = base.replace(**kw)
    bad = [p for p in cfg.problems() if "parameter-inverted" not in p]
    if bad:
        raise ConfigError("invalid model: " + "; ".join(bad))
    return cfg


def model_to_dict(cfg: PiipConfig) -> dict:
    return {
        "branches": [{f.name: getattr(b, f.name) for f in fields(BranchConfig)} for b in cfg.branches],
        "interactions": {f.name: getattr(cfg.interactions, f.name) for f in fields(InteractionSpec)},
        "mode": cfg.mode,
        "merge_subset": list(cfg.merge_subset) if cfg.merge_subset is not None else None,
        "num_classes": cfg.num_classes,
        "ablation": cfg.ablation,
    }


def parse_config(text: str) -> ConfigFile:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    _check_keys(raw, {"model", "train", "io"}, "config")
    if "model" not in raw:
        raise ConfigError("config needs a 'model' section")
    model = model_from_dict(raw["model"])
    tr = _check_keys(raw.get("train", {}), {"epochs", "batch", "lr", "seed"}, "train")
    train = TrainSettings(**{k: _typed(v, float if k == "lr" else int, f"train.{k}") for k, v in tr.items()})
    problems = train.problems()
    if problems:
        raise ConfigError("; ".join(problems))
    io_raw = _check_keys(raw.get("io", {}), {"checkpoint_path", "csv_path"}, "io")
    io = IoSettings(**{k: (None if v is None else _typed(v, str, f"io.{k}")) for k, v in io_raw.items()})
    return ConfigFile(model=model, train=train, io=io)


def serialize_config(cf: ConfigFile) -> str:
    doc = {
        "model": model_to_dict(cf.model),
        "train": {f.name: getattr(cf.train, f.name) for f in fields(TrainSettings)},
        "io": {f.name: getattr(cf.io, f.name) for f in fields(IoSettings)},
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def load_config(path: str | Path) -> ConfigFile:
    return parse_config(Path(path).read_text())


def save_config(cf: ConfigFile, path: str | Path) -> None:
    Path(path).write_text(serialize_config(cf))
