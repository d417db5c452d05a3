"""Flat key=value stack configuration with CLI-flag overrides.

One document describes a whole experiment: broker endpoints, channel duty
ranges, vehicle and camera geometry, track spec, and hyperparameter
overrides. Flags always win over the file. The format is a flat TOML-like
list of `key = value` lines with # comments; values are ints, floats,
booleans or (optionally quoted) strings.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .control import ChannelConfig
from .learning.generator import Hyperparams
from .perception import PreprocessConfig
from .simworld import VehicleParams, World, build_track

ENV_CONFIG_VAR = "ROLLE_CONFIG"


class ConfigError(ValueError):
    """Unparseable or unknown configuration input."""


@dataclass
class StackConfig:
    # transport
    broker_host: str = "127.0.0.1"
    broker_port: int = 1883
    frame_stream_port: int = 5005
    transmit_hz: float = 20.0
    # control channels
    steering_min_duty: int = 205
    steering_max_duty: int = 410
    throttle_min_duty: int = 205
    throttle_max_duty: int = 410
    # vehicle
    wheelbase: float = 0.18
    max_steer_deg: float = 25.0
    v_max: float = 2.0
    speed_time_constant: float = 0.5
    # camera / preprocessing
    raw_width: int = 320
    raw_height: int = 240
    crop_top_rows: int = 134
    # driving
    fps: float = 32.0
    constant_throttle: float = 0.25
    oracle_lookahead: float = 0.6
    # track
    track: str = "s-curve"
    track_length: float = 50.0
    track_amplitude: float = 1.2
    track_wavelength: float = 12.0
    track_phase: float = 0.0
    track_radius: float = 2.0
    track_direction: str = "left"
    path_half_width: float = 0.20
    # training
    epochs: int = 10
    learning_rate: float = 1e-4
    samples_per_epoch: int = 20_000
    batch_size: int = 64
    train_fraction: float = 0.8
    flip_prob: float = 0.5
    shadow_prob: float = 0.5
    seed: int = 0

    # ---- derived views ---------------------------------------------------

    def vehicle_params(self) -> VehicleParams:
        return VehicleParams(
            wheelbase=self.wheelbase,
            max_steer=math.radians(self.max_steer_deg),
            v_max=self.v_max,
            speed_time_constant=self.speed_time_constant,
        )

    def steering_channel(self) -> ChannelConfig:
        return ChannelConfig(self.steering_min_duty, self.steering_max_duty, "steering")

    def throttle_channel(self) -> ChannelConfig:
        return ChannelConfig(self.throttle_min_duty, self.throttle_max_duty, "throttle")

    def preprocess_config(self) -> PreprocessConfig:
        return PreprocessConfig(crop_top_rows=self.crop_top_rows)

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            samples_per_epoch=self.samples_per_epoch,
            batch_size=self.batch_size,
            train_fraction=self.train_fraction,
            flip_prob=self.flip_prob,
            shadow_prob=self.shadow_prob,
            seed=self.seed,
        )

    def world(self) -> World:
        name = self.track.strip().lower()
        if name == "straight":
            params = {"length": self.track_length}
        elif name in ("s-curve", "scurve", "s_curve"):
            params = {
                "length": self.track_length,
                "amplitude": self.track_amplitude,
                "wavelength": self.track_wavelength,
                "phase": self.track_phase,
            }
        elif name == "loop":
            params = {"radius": self.track_radius, "direction": self.track_direction}
        else:
            raise ConfigError(f"unknown track {self.track!r}")
        return build_track(name, path_half_width=self.path_half_width, **params)


_FIELD_TYPES = {f.name: f.type for f in fields(StackConfig)}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        return raw[1:-1]
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def load_config_file(path) -> dict:
    """Parse a flat key=value document into a raw dict."""
    values = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        comment = raw.find(" #")
        if comment != -1 and '"' not in raw[:comment] and "'" not in raw[:comment]:
            raw = raw[:comment]
        values[key] = _parse_value(key, raw)
    return values


def build_config(path=None, overrides: dict | None = None) -> StackConfig:
    """File (explicit path, else $ROLLE_CONFIG if set) + override dict."""
    values: dict = {}
    if path is None:
        env = os.environ.get(ENV_CONFIG_VAR)
        if env:
            path = env
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"config file not found: {path}")
        values.update(load_config_file(path))
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    unknown = sorted(set(values) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = StackConfig()
    for k, v in values.items():
        current = getattr(cfg, k)
        if isinstance(current, bool):
            v = bool(v)
        elif isinstance(current, int) and not isinstance(v, bool):
            v = int(v)
        elif isinstance(current, float):
            v = float(v)
        elif isinstance(current, str):
            v = str(v)
        setattr(cfg, k, v)
    return cfg
