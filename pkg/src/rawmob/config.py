"""Hierarchical run configuration: defaults, then a YAML file, then ``section.key=value`` overrides."""
from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .finetune import DEFAULT_K_DAYS, HeadConfig
from .model import RAW_NANO, ModelConfig
from .pretrain import TrainConfig
from .trajectory import DEFAULT_PROXIMITY_M
from .world import SyntheticWorldConfig

SECTIONS = ("world", "model", "train", "finetune", "eval")
# section -> key holding that subsystem's seed
SEED_KEYS = {"world": "rng_seed", "model": "init_seed", "train": "seed", "finetune": "seed", "eval": "seed"}


def stream_seed(seed: int, name: str) -> int:
    """Independent 63-bit seed for a named subsystem, stable across platforms and runs."""
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def defaults() -> dict:
    world = SyntheticWorldConfig().to_dict()
    world.pop("subway_stations")
    world.pop("poi_table")
    world["rng_seed"] = None
    return {
        "seed": 0,
        "world": world,
        "model": {**asdict(RAW_NANO), "init_seed": None},
        "train": {**asdict(TrainConfig()), "seed": None, "checkpoint_every": 0},
        "finetune": {**asdict(HeadConfig()), "seed": None, "K_days": DEFAULT_K_DAYS,
                     "proximity_m": DEFAULT_PROXIMITY_M, "pooling": "last"},
        "eval": {"seed": None, "start_times": ["08:00:00", "11:00:00", "14:00:00", "17:00:00"],
                 "horizons": list(range(1, 11)), "keep_paths": 20},
    }


def _merge(base: dict, update: dict, where: str = "") -> None:
    for k, v in update.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where + k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where + k!r} must be a mapping")
            _merge(base[k], v, f"{where}{k}.")
        else:
            base[k] = v


def parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    key, raw = item.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value in {item!r}: {exc}") from None
    return key.strip().split("."), value


def resolve(path=None, overrides=()) -> dict:
    """Defaults < config file < overrides; null section seeds are derived from the top-level seed."""
    cfg = defaults()
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path} must hold a mapping")
        _merge(cfg, loaded)
    for item in overrides:
        keys, value = parse_override(item)
        node: dict = {}
        tip = node
        for k in keys[:-1]:
            tip = tip.setdefault(k, {})
        tip[keys[-1]] = value
        _merge(cfg, node)
    for section, key in SEED_KEYS.items():
        if cfg[section][key] is None:
            cfg[section][key] = stream_seed(cfg["seed"], section)
    build_world(cfg), build_model(cfg), build_train(cfg), build_head(cfg)
    return cfg


def build_world(cfg: dict) -> SyntheticWorldConfig:
    w = copy.deepcopy(cfg["world"])
    w["bbox"] = tuple(w["bbox"])
    w["region_grid"] = tuple(w["region_grid"])
    try:
        world = SyntheticWorldConfig(**w)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    world.validate()
    return world


def build_model(cfg: dict) -> ModelConfig:
    m = {k: v for k, v in cfg["model"].items() if k != "init_seed"}
    return ModelConfig(**m)


def build_train(cfg: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in cfg["train"].items() if k in names})


def build_head(cfg: dict) -> HeadConfig:
    names = {f.name for f in fields(HeadConfig)}
    return HeadConfig(**{k: v for k, v in cfg["finetune"].items() if k in names})


def write_config(directory, cfg: dict) -> Path:
    path = Path(directory) / "run_config.yaml"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg, sort_keys=True, default_flow_style=None))
    return path
