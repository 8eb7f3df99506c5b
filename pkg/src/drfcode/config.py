"""Strict TOML experiment configuration.

Recognised tables and keys (anything else is rejected)::

    [model]    K, hidden, csi ("exact" | "estimated"), attention, rcsi,
               receivers (1 | 2), init_seed
    [channel]  forward_snr_db, feedback_snr_db (number or "noiseless"),
               fading ("awgn" | "slow_rayleigh" | "fast_rayleigh"),
               rayleigh_omega, snr_pair [r1, r2], feedback_pair [r1, r2],
               correlation
    [train]    snr_schedule [..], batch_size, max_batch, zeta, stall_factor,
               growth, lr, seed, stall_rule ("algorithm" | "prose"),
               clip_norm, calibration_samples, loss_weights [w1, w2]
    [eval]     checkpoint, samples, seed, shard_size, workers,
               snr (grid "a:b:step" or list), delta (grid or list),
               correlations (list)

Overrides use dotted keys, ``train.lr=0.003``; values are parsed as TOML
literals, falling back to a plain string.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .channel import ChannelSpec, MulticastSpec, parse_snr
from .model import ModelConfig
from .trainer import TrainPlan


class ConfigError(ValueError):
    pass


SCHEMA: dict[str, dict[str, type | tuple]] = {
    "model": {"K": int, "hidden": int, "csi": str, "attention": bool, "rcsi": bool,
              "receivers": int, "init_seed": int},
    "channel": {"forward_snr_db": (int, float), "feedback_snr_db": (int, float, str), "fading": str,
                "rayleigh_omega": (int, float), "snr_pair": list, "feedback_pair": list,
                "correlation": (int, float)},
    "train": {"snr_schedule": list, "batch_size": int, "max_batch": int, "zeta": int,
              "stall_factor": (int, float), "growth": (int, float), "lr": (int, float), "seed": int,
              "stall_rule": str, "clip_norm": (int, float), "calibration_samples": int,
              "loss_weights": list},
    "eval": {"checkpoint": str, "samples": int, "seed": int, "shard_size": int, "workers": int,
             "snr": (str, list, int, float), "delta": (str, list, int, float), "correlations": list},
}

DEFAULTS: dict = {
    "model": {"K": 50, "csi": "exact", "attention": True, "rcsi": False, "receivers": 1, "init_seed": 0},
    "channel": {"forward_snr_db": 0.0, "feedback_snr_db": "noiseless", "fading": "awgn",
                "rayleigh_omega": 1.0, "correlation": 0.0},
    "train": {"snr_schedule": [-1, -1, -1, -1, -1, -1, 0, 0, 0, 1, 1, 1, 2, 2, 2],
              "batch_size": 1000, "max_batch": 16000, "zeta": 100, "stall_factor": 2.0,
              "growth": 2.0, "lr": 1e-3, "seed": 0, "stall_rule": "algorithm", "clip_norm": 1.0,
              "calibration_samples": 4000, "loss_weights": [1.0, 1.0]},
    "eval": {"samples": 1_000_000, "seed": 0, "shard_size": 10_000, "workers": 1,
             "snr": "-1:2:1", "delta": "0", "correlations": [0.0, 0.9, -0.9]},
}


@dataclass
class Config:
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __getitem__(self, section: str) -> dict:
        return self.data[section]

    def digest(self) -> str:
        blob = json.dumps(self.data, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def model_config(self) -> ModelConfig:
        m, ch = self.data["model"], self.data["channel"]
        return ModelConfig(K=m["K"], hidden=m.get("hidden"), fading=ch["fading"], csi=m["csi"],
                           attention=m["attention"], rcsi=m["rcsi"], receivers=m["receivers"],
                           init_seed=m["init_seed"])

    def channel(self) -> ChannelSpec:
        ch, m = self.data["channel"], self.data["model"]
        mc = None
        if m["receivers"] == 2:
            pair = ch.get("snr_pair", [ch["forward_snr_db"]] * 2)
            fb = ch.get("feedback_pair", [ch["feedback_snr_db"]] * 2)
            mc = MulticastSpec(tuple(float(s) for s in pair), tuple(parse_snr(s) for s in fb),
                               float(ch["correlation"]))
        return ChannelSpec(float(ch["forward_snr_db"]), parse_snr(ch["feedback_snr_db"]),
                           ch["fading"], float(ch["rayleigh_omega"]), mc)

    def plan(self) -> TrainPlan:
        t = {k: v for k, v in self.data["train"].items() if k != "loss_weights"}
        t["snr_schedule"] = tuple(float(s) for s in t["snr_schedule"])
        return TrainPlan(**t)

    def to_toml(self) -> str:
        lines = []
        for section in SCHEMA:
            lines.append(f"[{section}]")
            for k, v in self.data[section].items():
                if v is None:
                    continue
                lines.append(f"{k} = {_toml_value(v)}")
            lines.append("")
        return "\n".join(lines)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


def _check(section: str, key: str, value) -> None:
    if section not in SCHEMA:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown config key {section}.{key}")
    expected = SCHEMA[section][key]
    types = expected if isinstance(expected, tuple) else (expected,)
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(f"{section}.{key}: expected {expected}, got bool")
    if not isinstance(value, types):
        raise ConfigError(f"{section}.{key}: expected {expected}, got {type(value).__name__}")


def merge(cfg: Config, data: dict) -> Config:
    for section, values in data.items():
        if not isinstance(values, dict):
            raise ConfigError(f"top-level key {section!r} must be a table")
        for key, value in values.items():
            _check(section, key, value)
            cfg.data[section][key] = value
    return cfg


def parse_override(text: str) -> tuple[str, str, object]:
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    path, raw = text.split("=", 1)
    section, key = path.strip().split(".", 1)
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return section, key, value


def load_config(path: str | Path | None = None, overrides: list[str] | tuple = ()) -> Config:
    cfg = Config()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            merge(cfg, tomllib.loads(p.read_text()))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
    for text in overrides:
        section, key, value = parse_override(text)
        merge(cfg, {section: {key: value}})
    try:
        cfg.model_config()
        cfg.channel()
        cfg.plan()
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg
