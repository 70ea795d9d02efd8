"""Run configuration: strict JSON parsing, defaults, echo, seed fan-out.

A run file holds the task roster, dataset build list, training and loss
settings, and evaluation plan. Unknown keys are rejected anywhere in the
tree. The effective (defaults-resolved) config is echoed into the output
directory and re-parses to an identical RunConfig, so every run is fully
described by one artifact.

All randomness in a run derives from the single top-level seed through
named substreams, so individual stages reproduce independently.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .datagen import Quality
from .errors import ConfigError
from .gridbattle import TaskSpec
from .losses import LossConfig
from .nets import NetConfig
from .trainer import TrainConfig


def derive_seed(seed: int, name: str) -> int:
    """Stable substream seed for a named component."""
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % (2**31)


@dataclass
class DatasetEntry:
    task: str
    quality: str
    episodes: int
    path: str
    epsilon: float | None = None  # calibrated when omitted

    def __post_init__(self):
        Quality(self.quality)  # validates the label
        if self.episodes < 1:
            raise ConfigError("dataset episodes must be >= 1")


@dataclass
class EvalConfig:
    episodes: int = 32
    source_tasks: list = field(default_factory=list)
    unseen_tasks: list = field(default_factory=list)
    greedy: bool = True
    export_episodes: int = 4

    def __post_init__(self):
        if self.episodes < 1:
            raise ConfigError("eval episodes must be >= 1")


@dataclass
class RunConfig:
    seed: int
    out_dir: str
    tasks: dict
    datasets: list
    train: TrainConfig
    eval: EvalConfig

    def spec(self, name: str) -> TaskSpec:
        if name not in self.tasks:
            raise ConfigError(f"unknown task '{name}'")
        return self.tasks[name]


_TOP_KEYS = {"seed", "out_dir", "tasks", "datasets", "train", "loss", "net", "eval"}


def _strict(section: str, data: dict, allowed) -> None:
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {sorted(unknown)}")


def _build(section, cls, data: dict):
    _strict(section, data, [f.name for f in dataclasses.fields(cls)])
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {section} section: {exc}") from exc


def parse_config(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    _strict("config", data, _TOP_KEYS)
    for key in ("seed", "out_dir", "tasks"):
        if key not in data:
            raise ConfigError(f"missing required key '{key}'")

    seed = data["seed"]
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")

    tasks = {}
    for name, fields_ in data["tasks"].items():
        spec_fields = dict(fields_)
        spec_fields.setdefault("name", name)
        if spec_fields["name"] != name:
            raise ConfigError(f"task '{name}' declares mismatched name")
        tasks[name] = _build(f"tasks.{name}", TaskSpec, spec_fields)

    datasets = [
        _build(f"datasets[{i}]", DatasetEntry, entry)
        for i, entry in enumerate(data.get("datasets", []))
    ]
    for entry in datasets:
        if entry.task not in tasks:
            raise ConfigError(f"dataset references unknown task '{entry.task}'")

    train_data = dict(data.get("train", {}))
    if "seed" in train_data or "net" in train_data or "loss" in train_data:
        raise ConfigError(
            "train section must not set seed/net/loss; "
            "they come from the global seed and the net/loss sections"
        )
    loss = _build("loss", LossConfig, dict(data.get("loss", {})))
    net = _build("net", NetConfig, dict(data.get("net", {})))
    train = _build("train", TrainConfig, train_data)
    train = dataclasses.replace(
        train, seed=derive_seed(seed, "train"), net=net, loss=loss
    )

    eval_cfg = _build("eval", EvalConfig, dict(data.get("eval", {})))
    for name in list(eval_cfg.source_tasks) + list(eval_cfg.unseen_tasks):
        if name not in tasks:
            raise ConfigError(f"eval references unknown task '{name}'")

    return RunConfig(
        seed=seed,
        out_dir=data["out_dir"],
        tasks=tasks,
        datasets=datasets,
        train=train,
        eval=eval_cfg,
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(data)


def effective_dict(cfg: RunConfig) -> dict:
    """The defaults-resolved config as a plain JSON-ready dict."""
    tasks = {
        name: {
            f.name: getattr(spec, f.name)
            for f in dataclasses.fields(TaskSpec)
            if f.name != "name"
        }
        for name, spec in cfg.tasks.items()
    }
    train = {
        f.name: getattr(cfg.train, f.name)
        for f in dataclasses.fields(TrainConfig)
        if f.name not in ("seed", "net", "loss")
    }
    return {
        "seed": cfg.seed,
        "out_dir": cfg.out_dir,
        "tasks": tasks,
        "datasets": [dataclasses.asdict(d) for d in cfg.datasets],
        "train": train,
        "loss": dataclasses.asdict(cfg.train.loss),
        "net": dataclasses.asdict(cfg.train.net),
        "eval": dataclasses.asdict(cfg.eval),
    }


def echo_config(cfg: RunConfig, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.json"
    path.write_text(json.dumps(effective_dict(cfg), indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path
