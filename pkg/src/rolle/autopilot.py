"""Autonomous mode: per-frame steering inference at constant throttle.

The driving loop is frame -> preprocess -> forward -> clamp -> duty-cycle
path -> vehicle step. Telemetry is strictly an observer: a failing or
disabled telemetry sink never changes the driven trajectory.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .control import ChannelConfig, ControlCommand, command_to_actuation
from .image import ImageFrame
from .learning.model import Model, forward
from .perception import PreprocessConfig, preprocess
from .simworld import (
    VehicleParams,
    VehicleState,
    World,
    cross_track_left,
    off_path,
    render_camera,
    step_vehicle,
    track_start_state,
)
from .transport.framestream import TelemetryFrame, frame_stream_write

log = logging.getLogger(__name__)


@dataclass
class AutopilotConfig:
    constant_throttle: float = 0.25
    fps: float = 32.0
    telemetry_enabled: bool = False
    raw_width: int = 320
    raw_height: int = 240

    def __post_init__(self):
        if not 0.0 <= self.constant_throttle <= 1.0:
            raise ValueError("constant_throttle must be in [0, 1]")
        if self.fps <= 0:
            raise ValueError("fps must be > 0")


def predict_steering(model: Model, raw: ImageFrame,
                     cfg: PreprocessConfig | None = None) -> float:
    """Steering in [-1, 1] for one raw camera frame."""
    tensor = preprocess(raw, cfg)
    value = float(forward(model, tensor.planes[None])[0])
    return min(max(value, -1.0), 1.0)


@dataclass
class SimRig:
    """Simulator wiring used by both the autopilot loop and evaluation."""

    world: World
    vehicle: VehicleParams
    state: VehicleState
    steering_channel: ChannelConfig
    throttle_channel: ChannelConfig

    @classmethod
    def at_track_start(cls, world: World, vehicle: VehicleParams | None = None) -> "SimRig":
        vehicle = vehicle or VehicleParams()
        return cls(
            world=world,
            vehicle=vehicle,
            state=track_start_state(world),
            steering_channel=ChannelConfig(label="steering"),
            throttle_channel=ChannelConfig(label="throttle"),
        )

    def capture(self, cfg: AutopilotConfig, timestamp_ms: int) -> ImageFrame:
        return render_camera(
            self.world, self.state, cfg.raw_width, cfg.raw_height,
            timestamp_ms=timestamp_ms,
        )

    def apply(self, cmd: ControlCommand, dt: float) -> None:
        actuated = command_to_actuation(
            cmd, self.steering_channel, self.throttle_channel, self.vehicle
        )
        self.state = step_vehicle(self.state, actuated, dt, self.vehicle)


def autopilot_loop(
    rig: SimRig,
    model: Model,
    cfg: AutopilotConfig,
    telemetry_sink=None,
    preprocess_cfg: PreprocessConfig | None = None,
    max_ticks: int | None = None,
    stop=None,
    realtime: bool = False,
    on_tick=None,
) -> dict:
    """Drive until stopped; returns counters.

    Each tick renders a frame, predicts steering, applies it with the
    configured constant throttle, and (when enabled) writes one telemetry
    frame. A telemetry failure logs a warning and disables telemetry; the
    loop keeps driving. On exit a final zero-throttle command is applied.
    """
    dt = 1.0 / cfg.fps
    telemetry_on = cfg.telemetry_enabled and telemetry_sink is not None
    counters = {"ticks": 0, "telemetry_frames": 0, "telemetry_errors": 0}
    start = time.monotonic()
    tick = 0
    try:
        while True:
            if max_ticks is not None and tick >= max_ticks:
                break
            if stop is not None and stop():
                break
            timestamp_ms = int(round(tick * 1000.0 * dt))
            frame = rig.capture(cfg, timestamp_ms)
            steering = predict_steering(model, frame, preprocess_cfg)
            cmd = ControlCommand(steering=steering, throttle=cfg.constant_throttle)
            rig.apply(cmd, dt)
            if telemetry_on:
                try:
                    frame_stream_write(
                        telemetry_sink,
                        TelemetryFrame(
                            timestamp_ms=timestamp_ms,
                            steering=steering,
                            throttle=cfg.constant_throttle,
                            width=frame.width,
                            height=frame.height,
                            pixels=frame.tobytes(),
                        ),
                    )
                    counters["telemetry_frames"] += 1
                except Exception as e:
                    telemetry_on = False
                    counters["telemetry_errors"] += 1
                    log.warning("telemetry disabled after sink failure: %s", e)
            if on_tick is not None:
                on_tick(tick, rig.state, steering)
            tick += 1
            counters["ticks"] = tick
            if realtime:
                target = start + (tick / cfg.fps)
                delay = target - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
    finally:
        rig.apply(ControlCommand(0.0, 0.0), dt)
    return counters


def closed_loop_eval(
    world: World,
    model: Model,
    cfg: AutopilotConfig,
    duration_s: float,
    vehicle: VehicleParams | None = None,
    preprocess_cfg: PreprocessConfig | None = None,
) -> dict:
    """Run the autopilot from the track start and score the trajectory."""
    if duration_s <= 0:
        raise ValueError("duration must be > 0")
    rig = SimRig.at_track_start(world, vehicle)
    ticks = int(round(duration_s * cfg.fps))

    stats = {
        "distance": 0.0,
        "off": 0,
        "abs_steer": 0.0,
        "left_drift": 0.0,
        "cross_track": 0.0,
    }
    last_pos = [rig.state.x, rig.state.y]

    def on_tick(_tick, state: VehicleState, steering: float) -> None:
        stats["distance"] += float(
            np.hypot(state.x - last_pos[0], state.y - last_pos[1])
        )
        last_pos[0], last_pos[1] = state.x, state.y
        if off_path(world, state):
            stats["off"] += 1
        stats["abs_steer"] += abs(steering)
        left = cross_track_left(world, state)
        stats["cross_track"] += left
        stats["left_drift"] += max(0.0, left)

    autopilot_loop(
        rig, model, cfg,
        preprocess_cfg=preprocess_cfg,
        max_ticks=ticks,
        on_tick=on_tick,
    )
    n = max(ticks, 1)
    return {
        "distance_m": stats["distance"],
        "off_path_fraction": stats["off"] / n,
        "mean_abs_steering": stats["abs_steer"] / n,
        "mean_cross_track_m": stats["cross_track"] / n,
        "left_drift_m": stats["left_drift"] / n,
        "ticks": ticks,
    }
