"""Single entry point for the whole stack.

Subcommands: broker, drive, train, autopilot, eval, histogram,
export-history. Exit codes: 0 success, 1 usage error, 2 runtime error.
Every subcommand runs headlessly.
"""

from __future__ import annotations

import os

# Pin BLAS to one thread before numpy loads so trained model files are
# bit-reproducible regardless of host core count.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import argparse
import json
import logging
import signal
import sys
import threading
import time
from pathlib import Path

import numpy as np

from . import __version__
from .autopilot import AutopilotConfig, SimRig, autopilot_loop, closed_loop_eval
from .config import ConfigError, StackConfig, build_config
from .control import (
    ControlCommand,
    FailsafeCommandCell,
    LatestValue,
    STEERING_TOPIC,
    THROTTLE_TOPIC,
    softpilot_step,
)
from .datalog import DatasetError, load_dataset, record_run, steering_histogram
from .learning import load_history, load_model, save_history, save_model, train
from .simworld import oracle_steer, render_camera, step_vehicle, track_start_state
from .transport import (
    Broker,
    Client,
    FrameStreamServer,
    decode_control,
    encode_control,
)

log = logging.getLogger(__name__)


class UsageError(Exception):
    def __init__(self, message: str, parser: argparse.ArgumentParser):
        super().__init__(message)
        self.parser = parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self)


def _add_config_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="stack config file (default: $ROLLE_CONFIG)")


def _add_track_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--track", help="straight | s-curve | loop")
    p.add_argument("--track-length", type=float, dest="track_length")
    p.add_argument("--track-amplitude", type=float, dest="track_amplitude")
    p.add_argument("--track-wavelength", type=float, dest="track_wavelength")
    p.add_argument("--track-phase", type=float, dest="track_phase")
    p.add_argument("--track-radius", type=float, dest="track_radius")
    p.add_argument("--track-direction", dest="track_direction")
    p.add_argument("--path-half-width", type=float, dest="path_half_width")


_CONFIG_KEYS = set(StackConfig().__dict__)


def _config_from_args(args) -> StackConfig:
    overrides = {
        k: v for k, v in vars(args).items() if k in _CONFIG_KEYS and v is not None
    }
    return build_config(getattr(args, "config", None), overrides)


def build_parser() -> _Parser:
    parser = _Parser(prog="rolle", description=__doc__)
    parser.add_argument("--version", action="version", version=f"rolle {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("broker", parents=[], help="run the MQTT-subset broker")
    _add_config_flag(p)
    p.add_argument("--host", dest="broker_host")
    p.add_argument("--port", type=int, dest="broker_port")

    p = sub.add_parser("drive", help="teleop/scripted driving with recording")
    _add_config_flag(p)
    _add_track_flags(p)
    p.add_argument("out_dir", help="run directory to record into")
    p.add_argument("--pilot", choices=["oracle", "biased-oracle", "soft"],
                   default="oracle")
    p.add_argument("--frames", type=int, help="number of frames to record")
    p.add_argument("--duration", type=float, help="seconds to record")
    p.add_argument("--fps", type=float)
    p.add_argument("--throttle", type=float, dest="constant_throttle")
    p.add_argument("--lookahead", type=float, dest="oracle_lookahead")
    p.add_argument("--via-broker", action="store_true",
                   help="route commands through the MQTT broker")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train the steering network on a run")
    _add_config_flag(p)
    p.add_argument("run_dir")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, dest="learning_rate")
    p.add_argument("--samples-per-epoch", type=int, dest="samples_per_epoch")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--train-fraction", type=float, dest="train_fraction")
    p.add_argument("--flip-prob", type=float, dest="flip_prob")
    p.add_argument("--shadow-prob", type=float, dest="shadow_prob")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="model file (default <run_dir>/model.rlle)")
    p.add_argument("--history-out", help="default <run_dir>/history.csv")

    p = sub.add_parser("autopilot", help="drive autonomously with a model")
    _add_config_flag(p)
    _add_track_flags(p)
    p.add_argument("model")
    p.add_argument("--duration", type=float, help="seconds (default: until Ctrl-C)")
    p.add_argument("--fps", type=float)
    p.add_argument("--throttle", type=float, dest="constant_throttle")
    p.add_argument("--telemetry", action="store_true")
    p.add_argument("--telemetry-port", type=int, dest="frame_stream_port")
    p.add_argument("--realtime", action="store_true")

    p = sub.add_parser("eval", help="closed-loop metrics for a model")
    _add_config_flag(p)
    _add_track_flags(p)
    p.add_argument("model")
    p.add_argument("--duration", type=float, default=60.0)
    p.add_argument("--fps", type=float)
    p.add_argument("--throttle", type=float, dest="constant_throttle")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("histogram", help="export steering_hist.json for a run")
    _add_config_flag(p)
    p.add_argument("run_dir")
    p.add_argument("--bins", type=int, default=21)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = sub.add_parser("export-history", help="export history.json for a run")
    _add_config_flag(p)
    p.add_argument("run_dir", help="run directory or history.csv path")
    p.add_argument("--out")

    return parser


# ---- subcommands -----------------------------------------------------------


def _cmd_broker(args) -> int:
    cfg = _config_from_args(args)
    broker = Broker(cfg.broker_host, cfg.broker_port).start()
    print(f"broker listening on {cfg.broker_host}:{broker.port}", flush=True)
    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        while not stop.is_set():
            time.sleep(0.2)
    finally:
        broker.stop()
    return 0


def _quantized(value: float) -> float:
    return round(value, 4)


def _make_pilot(kind: str, world, lookahead: float, params):
    if kind == "oracle":
        return lambda state: oracle_steer(world, state, lookahead, params)
    if kind == "biased-oracle":
        # Left-leaning habit layered on the scripted driver.
        def biased(state):
            v = oracle_steer(world, state, lookahead, params)
            return min(max(v * 1.1 - 0.08, -1.0), 1.0)
        return biased
    raise ValueError(f"pilot {kind} has no scripted policy")


def _cmd_drive(args) -> int:
    cfg = _config_from_args(args)
    if args.pilot == "soft":
        return _drive_soft(args, cfg)

    frames = args.frames
    if frames is None:
        duration = args.duration if args.duration is not None else 10.0
        frames = int(round(duration * cfg.fps))
    world = cfg.world()
    params = cfg.vehicle_params()
    pilot = _make_pilot(args.pilot, world, cfg.oracle_lookahead, params)
    steering_ch = cfg.steering_channel()
    throttle_ch = cfg.throttle_channel()

    cell = LatestValue(ControlCommand())
    publisher = subscriber = None
    if args.via_broker:
        subscriber = Client(cfg.broker_host, cfg.broker_port, "rolle-rover").connect()

        def on_message(topic, payload):
            try:
                value = decode_control(payload)
            except Exception as e:
                log.warning("dropped malformed control payload: %s", e)
                return
            cur = cell.get()
            if topic == STEERING_TOPIC:
                cell.set(ControlCommand(value, cur.throttle))
            elif topic == THROTTLE_TOPIC:
                cell.set(ControlCommand(cur.steering, value))

        subscriber.on_message = on_message
        subscriber.subscribe(STEERING_TOPIC)
        subscriber.subscribe(THROTTLE_TOPIC)
        publisher = Client(cfg.broker_host, cfg.broker_port, "rolle-pilot").connect()

    state_box = {"state": track_start_state(world)}
    dt = 1.0 / cfg.fps
    tick_box = {"n": 0}

    from .control import command_to_actuation

    def frame_source():
        state = state_box["state"]
        steering = pilot(state)
        cmd = ControlCommand(_quantized(steering), _quantized(cfg.constant_throttle))
        if publisher is not None:
            publisher.publish(STEERING_TOPIC, encode_control(cmd.steering))
            publisher.publish(THROTTLE_TOPIC, encode_control(cmd.throttle))
            deadline = time.monotonic() + 0.5
            while cell.get() != cmd and time.monotonic() < deadline:
                time.sleep(0.0005)
        else:
            cell.set(cmd)
        frame = render_camera(world, state, cfg.raw_width, cfg.raw_height)
        actuated = command_to_actuation(cell.get(), steering_ch, throttle_ch, params)
        state_box["state"] = step_vehicle(state, actuated, dt, params)
        tick_box["n"] += 1
        return frame

    meta = {
        "track": cfg.track,
        "pilot": args.pilot,
        "fps": cfg.fps,
        "constant_throttle": cfg.constant_throttle,
    }
    try:
        ds = record_run(
            frame_source, cell, args.out_dir, fps=cfg.fps,
            max_frames=frames, meta=meta,
        )
    finally:
        if publisher is not None:
            publisher.disconnect()
        if subscriber is not None:
            subscriber.disconnect()
    print(json.dumps({"records": len(ds), "out_dir": str(args.out_dir)}))
    return 0


def _drive_soft(args, cfg: StackConfig) -> int:
    """Interactive teleop from the terminal; records while driving.

    Reads single-letter commands per line: a/d steer left/right, w/s
    throttle up/down, space-line or 'x' zeroes, 'q' stops the run.
    """
    world = cfg.world()
    params = cfg.vehicle_params()
    steering_ch = cfg.steering_channel()
    throttle_ch = cfg.throttle_channel()
    cell = FailsafeCommandCell(ControlCommand())
    stop = threading.Event()

    keymap = {"a": "left", "d": "right", "w": "up", "s": "down",
              " ": "space", "x": "space"}

    def keyboard_loop():
        current = ControlCommand()
        print("soft pilot: a/d steer, w/s throttle, x stop, q quit", flush=True)
        for line in sys.stdin:
            token = line.rstrip("\n")
            if token == "q":
                stop.set()
                return
            key = keymap.get(token[:1] if token else " ")
            if key is None:
                continue
            current = softpilot_step(key, current)
            cell.set(current)
            print(f"steering {current.steering:+.4f} throttle {current.throttle:+.4f}",
                  flush=True)
        stop.set()

    threading.Thread(target=keyboard_loop, daemon=True).start()

    state_box = {"state": track_start_state(world)}
    dt = 1.0 / cfg.fps

    from .control import command_to_actuation

    def frame_source():
        state = state_box["state"]
        frame = render_camera(world, state, cfg.raw_width, cfg.raw_height)
        actuated = command_to_actuation(cell.get(), steering_ch, throttle_ch, params)
        state_box["state"] = step_vehicle(state, actuated, dt, params)
        return frame

    max_frames = args.frames
    if max_frames is None and args.duration is not None:
        max_frames = int(round(args.duration * cfg.fps))
    ds = record_run(
        frame_source, cell, args.out_dir, fps=cfg.fps,
        max_frames=max_frames, stop=stop.is_set, realtime=True,
        meta={"track": cfg.track, "pilot": "soft", "fps": cfg.fps},
    )
    print(json.dumps({"records": len(ds), "out_dir": str(args.out_dir)}))
    return 0


def _cmd_train(args) -> int:
    cfg = _config_from_args(args)
    ds = load_dataset(args.run_dir)
    h = cfg.hyperparams()
    model_path = Path(args.out) if args.out else Path(args.run_dir) / "model.rlle"
    history_path = (
        Path(args.history_out) if args.history_out else Path(args.run_dir) / "history.csv"
    )

    def progress(epoch, train_mse, val_mse):
        print(f"epoch {epoch}/{h.epochs} train_mse {train_mse:.4f} "
              f"val_mse {val_mse:.4f}", flush=True)

    model, history = train(ds, h, cfg.preprocess_config(), progress=progress)
    model_path.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, model_path)
    save_history(history, history_path)
    print(json.dumps({
        "model": str(model_path),
        "history": str(history_path),
        "final_train_mse": _quantized(history.train_mse[-1]),
        "final_val_mse": _quantized(history.val_mse[-1]),
    }))
    return 0


def _autopilot_config(cfg: StackConfig, telemetry: bool) -> AutopilotConfig:
    return AutopilotConfig(
        constant_throttle=cfg.constant_throttle,
        fps=cfg.fps,
        telemetry_enabled=telemetry,
        raw_width=cfg.raw_width,
        raw_height=cfg.raw_height,
    )


def _cmd_autopilot(args) -> int:
    cfg = _config_from_args(args)
    model = load_model(args.model)
    world = cfg.world()
    rig = SimRig.at_track_start(world, cfg.vehicle_params())
    rig.steering_channel = cfg.steering_channel()
    rig.throttle_channel = cfg.throttle_channel()
    apcfg = _autopilot_config(cfg, args.telemetry)

    server = None
    if args.telemetry:
        server = FrameStreamServer(cfg.broker_host, cfg.frame_stream_port)
        print(f"telemetry on port {server.port}", flush=True)

    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    max_ticks = None
    if args.duration is not None:
        max_ticks = int(round(args.duration * apcfg.fps))
    try:
        counters = autopilot_loop(
            rig, model, apcfg,
            telemetry_sink=server,
            preprocess_cfg=cfg.preprocess_config(),
            max_ticks=max_ticks,
            stop=stop.is_set,
            realtime=args.realtime,
        )
    finally:
        if server is not None:
            server.close()
    print(json.dumps(counters))
    return 0


def _cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    model = load_model(args.model)
    world = cfg.world()
    apcfg = _autopilot_config(cfg, telemetry=False)
    metrics = closed_loop_eval(
        world, model, apcfg, args.duration,
        vehicle=cfg.vehicle_params(),
        preprocess_cfg=cfg.preprocess_config(),
    )
    printable = {
        k: (_quantized(v) if isinstance(v, float) else v) for k, v in metrics.items()
    }
    print(json.dumps(printable))
    return 0


def _cmd_histogram(args) -> int:
    cfg = _config_from_args(args)
    ds = load_dataset(args.run_dir)
    labels = ds.steering_values()
    bins = args.bins
    counts_before = steering_histogram(labels, bins)

    seed = args.seed if args.seed is not None else cfg.seed
    rng = np.random.default_rng(seed)
    if len(labels):
        drawn = labels[rng.integers(0, len(labels), size=len(labels))]
        flips = rng.random(len(labels)) < cfg.flip_prob
        augmented = np.where(flips, -drawn, drawn)
    else:
        augmented = labels
    counts_after = steering_histogram(augmented, bins)

    edges = np.linspace(-1.0, 1.0, bins + 1)
    doc = {
        "bins": [float(e) for e in edges],
        "counts_before": [int(c) for c in counts_before],
        "counts_after": [int(c) for c in counts_after],
        "mean_before": _quantized(float(labels.mean())) if len(labels) else None,
        "mean_after": _quantized(float(augmented.mean())) if len(augmented) else None,
        "samples": int(len(labels)),
        "seed": seed,
    }
    out = Path(args.out) if args.out else Path(args.run_dir) / "steering_hist.json"
    out.write_text(json.dumps(doc, indent=2), encoding="utf-8")
    print(json.dumps({"out": str(out), "samples": len(labels)}))
    return 0


def _cmd_export_history(args) -> int:
    src = Path(args.run_dir)
    history_csv = src if src.suffix == ".csv" else src / "history.csv"
    if not history_csv.exists():
        raise FileNotFoundError(f"missing history file: {history_csv}")
    history = load_history(history_csv)
    doc = [
        {"epoch": i + 1, "train_mse": t, "val_mse": v}
        for i, (t, v) in enumerate(zip(history.train_mse, history.val_mse))
    ]
    out = Path(args.out) if args.out else history_csv.parent / "history.json"
    out.write_text(json.dumps(doc, indent=2), encoding="utf-8")
    print(json.dumps({"out": str(out), "epochs": len(doc)}))
    return 0


_COMMANDS = {
    "broker": _cmd_broker,
    "drive": _cmd_drive,
    "train": _cmd_train,
    "autopilot": _cmd_autopilot,
    "eval": _cmd_eval,
    "histogram": _cmd_histogram,
    "export-history": _cmd_export_history,
}


def run(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("ROLLE_LOG", "WARNING"))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        return _COMMANDS[args.command](args)
    except UsageError as e:
        e.parser.print_usage(sys.stderr)
        print(f"rolle: error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # argparse --help/--version
        return int(e.code or 0)
    except (ConfigError, DatasetError, FileNotFoundError, ValueError, OSError) as e:
        print(f"rolle: error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 2


def main() -> None:
    sys.exit(run())
