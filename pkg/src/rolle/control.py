"""Control layer: normalized [-1, 1] commands <-> PWM duty counts <-> actuation.

Steering -1 is full left, 0 center, +1 full right; throttle follows the same
scale with the negative half rectified to zero speed (the rover has no
reverse in simulation). Out-of-range values are clamped, never rejected:
the teleop hot path must not stall on a spike.
"""

from __future__ import annotations

import logging
import math
import threading
import time
from dataclasses import dataclass, replace
from typing import Callable

from .simworld import ActuatedCommand, VehicleParams

log = logging.getLogger(__name__)

# 1.0-2.0 ms servo pulse at 50 Hz on a 12-bit PWM driver.
DEFAULT_MIN_DUTY = 205
DEFAULT_MAX_DUTY = 410

STEERING_TOPIC = "RolLE_MKII/steering"
THROTTLE_TOPIC = "RolLE_MKII/throttle"

DEFAULT_TRANSMIT_HZ = 20.0

SOFTPILOT_STEER_STEP = 0.1
SOFTPILOT_THROTTLE_STEP = 0.05


class NumericInputError(ValueError):
    """Non-finite command value."""


def clamp_unit(v: float) -> float:
    return min(max(v, -1.0), 1.0)


@dataclass(frozen=True)
class ControlCommand:
    steering: float = 0.0
    throttle: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "steering", clamp_unit(self.steering))
        object.__setattr__(self, "throttle", clamp_unit(self.throttle))


@dataclass(frozen=True)
class ChannelConfig:
    min_duty: int = DEFAULT_MIN_DUTY
    max_duty: int = DEFAULT_MAX_DUTY
    label: str = "steering"

    def __post_init__(self):
        if not (0 <= self.min_duty < self.max_duty <= 4095):
            raise ValueError(
                f"need 0 <= min_duty < max_duty <= 4095, "
                f"got {self.min_duty}/{self.max_duty}"
            )
        if self.label not in ("steering", "throttle"):
            raise ValueError(f"label must be steering or throttle, got {self.label!r}")


@dataclass(frozen=True)
class JoystickReading:
    raw_x: int = 512
    raw_y: int = 512

    def __post_init__(self):
        object.__setattr__(self, "raw_x", min(max(self.raw_x, 0), 1024))
        object.__setattr__(self, "raw_y", min(max(self.raw_y, 0), 1024))


def command_to_duty(v: float, cfg: ChannelConfig) -> int:
    """Linear remap of [-1, 1] onto [min_duty, max_duty], round-half-up."""
    if not math.isfinite(v):
        raise NumericInputError(f"non-finite command value {v!r}")
    v = clamp_unit(v)
    return int(math.floor(cfg.min_duty + (v + 1.0) / 2.0 * (cfg.max_duty - cfg.min_duty) + 0.5))


def duty_to_actuation(duty: int, cfg: ChannelConfig, p: VehicleParams) -> float:
    """Inverse remap into a physical target.

    Steering channels return a wheel angle in radians; throttle channels a
    target speed in m/s with the negative half rectified to zero.
    """
    if duty < cfg.min_duty or duty > cfg.max_duty:
        log.warning("duty %d outside channel range [%d, %d]; clamping",
                    duty, cfg.min_duty, cfg.max_duty)
        duty = min(max(duty, cfg.min_duty), cfg.max_duty)
    v = 2.0 * (duty - cfg.min_duty) / (cfg.max_duty - cfg.min_duty) - 1.0
    if cfg.label == "steering":
        return v * p.max_steer
    return max(v, 0.0) * p.v_max


def command_to_actuation(cmd: ControlCommand, steering_cfg: ChannelConfig,
                         throttle_cfg: ChannelConfig, p: VehicleParams) -> ActuatedCommand:
    """Full command path: normalized -> duty counts -> physical targets."""
    steer = duty_to_actuation(command_to_duty(cmd.steering, steering_cfg), steering_cfg, p)
    speed = duty_to_actuation(command_to_duty(cmd.throttle, throttle_cfg), throttle_cfg, p)
    return ActuatedCommand(steer_target=steer, speed_target=speed)


def joystick_remap(raw: int, deadzone: float = 0.0) -> float:
    """Map a 0..1024 potentiometer reading to [-1, 1] about center 512."""
    raw = min(max(raw, 0), 1024)
    v = (raw - 512) / 512.0
    if abs(v) < deadzone:
        return 0.0
    return v


def softpilot_step(key: str, current: ControlCommand) -> ControlCommand:
    """Keyboard remote: arrows nudge steering/throttle, space zeroes both."""
    if key == "left":
        return replace(current, steering=current.steering - SOFTPILOT_STEER_STEP)
    if key == "right":
        return replace(current, steering=current.steering + SOFTPILOT_STEER_STEP)
    if key == "up":
        return replace(current, throttle=current.throttle + SOFTPILOT_THROTTLE_STEP)
    if key == "down":
        return replace(current, throttle=current.throttle - SOFTPILOT_THROTTLE_STEP)
    if key == "space":
        return ControlCommand(0.0, 0.0)
    return current


class LatestValue:
    """Single-producer/single-consumer latest-wins cell."""

    def __init__(self, initial):
        self._lock = threading.Lock()
        self._value = initial

    def set(self, value) -> None:
        with self._lock:
            self._value = value

    def get(self):
        with self._lock:
            return self._value


STALE_COMMAND_TIMEOUT_S = 0.5


class FailsafeCommandCell(LatestValue):
    """Latest-wins command cell that zeroes throttle after 500 ms of silence.

    Guards live data-collection runs against link loss: steering holds its
    last value, the rover coasts to a stop.
    """

    def __init__(self, initial: ControlCommand | None = None,
                 clock: Callable[[], float] = time.monotonic,
                 timeout_s: float = STALE_COMMAND_TIMEOUT_S):
        super().__init__(initial or ControlCommand())
        self._clock = clock
        self._timeout = timeout_s
        self._updated_at = clock()

    def set(self, value: ControlCommand) -> None:
        with self._lock:
            self._value = value
            self._updated_at = self._clock()

    def get(self) -> ControlCommand:
        with self._lock:
            cmd = self._value
            if self._clock() - self._updated_at > self._timeout:
                return replace(cmd, throttle=0.0)
            return cmd


def pilot_transmit_loop(
    source: LatestValue,
    client,
    rate_hz: float = DEFAULT_TRANSMIT_HZ,
    max_ticks: int | None = None,
    stop: threading.Event | None = None,
    sleep_fn: Callable[[float], None] = time.sleep,
) -> dict:
    """Publish the latest command to the steering/throttle topics each tick.

    The client needs a ``publish(topic, payload: bytes)`` method. Publish
    failures are counted and retried on the next tick; the loop never raises
    for them. Returns counters: {"ticks", "published", "errors"}.
    """
    from .transport.codec import encode_control

    period = 1.0 / rate_hz
    counters = {"ticks": 0, "published": 0, "errors": 0}
    while True:
        if stop is not None and stop.is_set():
            break
        if max_ticks is not None and counters["ticks"] >= max_ticks:
            break
        cmd: ControlCommand = source.get()
        for topic, value in ((STEERING_TOPIC, cmd.steering), (THROTTLE_TOPIC, cmd.throttle)):
            try:
                client.publish(topic, encode_control(value))
                counters["published"] += 1
            except Exception:
                counters["errors"] += 1
        counters["ticks"] += 1
        if max_ticks is not None and counters["ticks"] >= max_ticks:
            break
        sleep_fn(period)
    return counters
