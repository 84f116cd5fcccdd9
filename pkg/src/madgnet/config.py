"""INI experiment configuration: [network], [mfmsa], [train], [data].

Every key has a default; unknown sections or keys are rejected so typos fail
loudly. ``ExperimentConfig.to_text`` writes the full key set back out, and
that text is what checkpoints store.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError
from .esdm import FLOWS
from .freq import read_index_file
from .mfmsa import MfmsaConfig
from .network import NetworkConfig


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 4
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    seed: int = 0
    checkpoint_every: int = 0  # 0: only at the end
    augment: bool = True
    multiscale: bool = False
    grad_clip: float = 0.0  # 0: off
    lambda_region: float = 1.0
    lambda_distance: float = 1.0
    lambda_boundary: float = 1.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr_max < 0 or self.lr_min < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.checkpoint_every < 0 or self.grad_clip < 0:
            raise ConfigError("checkpoint_every and grad_clip must be non-negative")

    def lambdas(self) -> dict[str, float]:
        return {"region": self.lambda_region, "distance": self.lambda_distance, "boundary": self.lambda_boundary}


@dataclass
class DataConfig:
    size: int = 64
    train_split: str = "train"
    eval_split: str = "test"

    def __post_init__(self):
        if self.size < 32 or self.size % 32:
            raise ConfigError(f"data size must be a positive multiple of 32, got {self.size}")


# key -> parser; also the documented key list
_NETWORK_KEYS = {
    "in_channels": int, "widths": "ints", "c_e": int, "L": int, "M": int,
    "flow": str, "deep_supervision": bool,
}
_MFMSA_KEYS = {
    "S": int, "K": int, "gamma": float, "r": int, "C_min": int, "H_min": int, "W_min": int,
    "strategy": str, "base_grid": "ints", "top_file": str, "interp": str,
}
_TRAIN_KEYS = {f: type(getattr(TrainConfig(), f)) for f in TrainConfig.__dataclass_fields__}
_DATA_KEYS = {"size": int, "train_split": str, "eval_split": str}
SECTIONS = {"network": _NETWORK_KEYS, "mfmsa": _MFMSA_KEYS, "train": _TRAIN_KEYS, "data": _DATA_KEYS}


@dataclass
class ExperimentConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    top_file: str = ""

    def with_flow(self, flow: str | None = None, deep_supervision: bool | None = None) -> "ExperimentConfig":
        net = self.network
        if flow is not None:
            if flow not in FLOWS:
                raise ConfigError(f"flow must be one of {FLOWS}, got {flow!r}")
            net = replace(net, flow=flow)
        if deep_supervision is not None:
            net = replace(net, deep_supervision=deep_supervision)
        return replace(self, network=net)

    def to_text(self) -> str:
        n, m, t, d = self.network, self.network.mfmsa, self.train, self.data
        lines = ["[network]"]
        lines += [f"{k} = {_fmt(getattr(n, k))}" for k in _NETWORK_KEYS]
        lines += ["", "[mfmsa]"]
        for k in _MFMSA_KEYS:
            lines.append(f"{k} = {_fmt(self.top_file if k == 'top_file' else getattr(m, k))}")
        lines += ["", "[train]"]
        lines += [f"{k} = {_fmt(getattr(t, k))}" for k in _TRAIN_KEYS]
        lines += ["", "[data]"]
        lines += [f"{k} = {_fmt(getattr(d, k))}" for k in _DATA_KEYS]
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(kind, raw: str, where: str):
    try:
        if kind == "ints":
            return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None


def parse_config(text: str, base_dir: str | Path = ".") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    cp.optionxform = str  # keys are case-sensitive (C_min, L)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    values: dict[str, dict] = {s: {} for s in SECTIONS}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        keys = SECTIONS[section]
        for key, raw in cp.items(section):
            if key not in keys:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[section][key] = _parse(keys[key], raw, f"[{section}] {key}")

    data = DataConfig(**values["data"])
    mf = dict(values["mfmsa"])
    top_file = mf.pop("top_file", "")
    if top_file:
        path = Path(top_file)
        if not path.is_absolute():
            path = Path(base_dir) / path
        grid = mf.get("base_grid", (8, 8))
        mf["top_indices"] = read_index_file(path, grid)
        top_file = str(path.resolve())
    net = dict(values["network"])
    c_e = net.get("c_e", NetworkConfig.c_e)
    mfmsa = MfmsaConfig(C=c_e, **mf)
    network = NetworkConfig(input_size=(data.size, data.size), mfmsa=mfmsa, **net)
    return ExperimentConfig(network, TrainConfig(**values["train"]), data, top_file)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), path.parent)
