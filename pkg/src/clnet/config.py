"""JSON run configuration: task selector, network and training settings, paths."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from .network import ConfigError, NetConfig
from .training import TrainConfig

TASKS = ("line", "twoview")
PATH_KEYS = ("train", "val", "checkpoint_dir", "metrics")
ABLATIONS = ("no-temperature", "mlp-pool", "no-global")


@dataclass(frozen=True)
class CliConfig:
    task: str = "line"
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict = field(default_factory=lambda: {k: None for k in PATH_KEYS})

    def to_dict(self) -> dict:
        net = self.net.to_dict()
        net.pop("in_dim")
        return {"task": self.task, "net": net, "train": asdict(self.train), "paths": dict(self.paths)}


def _check_keys(section: str, given: dict, allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    for key in given:
        if key not in allowed:
            raise ConfigError(f"unknown config key {section}.{key}" if section else f"unknown config key {key}")


def config_from_dict(raw: dict) -> CliConfig:
    _check_keys("", raw, ("task", "net", "train", "paths"))
    task = raw.get("task", "line")
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    net_raw = dict(raw.get("net", {}))
    _check_keys("net", net_raw, [f.name for f in fields(NetConfig) if f.name != "in_dim"])
    net_raw["in_dim"] = 2 if task == "line" else 4
    train_raw = raw.get("train", {})
    _check_keys("train", train_raw, [f.name for f in fields(TrainConfig)])
    paths_raw = raw.get("paths", {})
    _check_keys("paths", paths_raw, PATH_KEYS)
    try:
        net = NetConfig.from_dict(net_raw)
        train = TrainConfig(**train_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    paths = {k: paths_raw.get(k) for k in PATH_KEYS}
    return CliConfig(task, net, train, paths)


def load_config(path) -> CliConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return config_from_dict(raw)


def apply_ablations(cfg: CliConfig, ablations) -> CliConfig:
    net, train = cfg.net, cfg.train
    for name in ablations or ():
        if name == "no-temperature":
            train = replace(train, use_temperature=False)
        elif name == "mlp-pool":
            net = replace(net, use_annular=False)
        elif name == "no-global":
            net = replace(net, use_global=False)
        else:
            raise ConfigError(f"unknown ablation {name!r}; choose from {ABLATIONS}")
    return replace(cfg, net=net, train=train)


def defaults_json() -> str:
    return json.dumps(CliConfig().to_dict(), indent=2, sort_keys=True)
