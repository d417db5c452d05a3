"""Data-collection recorder and dataset loader.

Run layout on disk:

    <run>/manifest.csv    header frame_path,steering,throttle,timestamp_ms
    <run>/frames/*.png    raw (pre-preprocessing) captures
    <run>/meta.json       track spec, fps, start time, software version

Frames are stored raw so the preprocessing chain can be re-run later with
different crop/color settings.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .control import ControlCommand, LatestValue
from .image import ImageFrame, load_png, save_png


class DatasetError(ValueError):
    """Manifest or frame files violate the dataset invariants."""


@dataclass
class DriveRecord:
    frame_path: str  # relative to the run root
    steering: float
    throttle: float
    timestamp_ms: int


@dataclass
class Dataset:
    root: Path
    records: list[DriveRecord] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def frame(self, record: DriveRecord) -> ImageFrame:
        return load_png(self.root / record.frame_path, record.timestamp_ms)

    def steering_values(self) -> np.ndarray:
        return np.array([r.steering for r in self.records], dtype=np.float64)


MANIFEST_HEADER = ["frame_path", "steering", "throttle", "timestamp_ms"]


def _manifest_path(run_dir: Path) -> Path:
    return run_dir / "manifest.csv"


def record_run(
    frame_source: Callable[[], ImageFrame],
    command_cell: LatestValue,
    out_dir,
    fps: float = 32.0,
    max_frames: int | None = None,
    stop: Callable[[], bool] | None = None,
    realtime: bool = False,
    meta: dict | None = None,
) -> Dataset:
    """Record frames at `fps`, pairing each with the latest command snapshot.

    `frame_source` is called once per tick and must return the raw capture.
    When `realtime` is false the clock is simulated (tick i is at i/fps
    seconds), which keeps CI runs deterministic.
    """
    run_dir = Path(out_dir)
    frames_dir = run_dir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)

    run_meta = {
        "fps": fps,
        "start_time": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "software_version": __version__,
    }
    run_meta.update(meta or {})

    records: list[DriveRecord] = []
    start = time.monotonic()
    index = 0
    error: str | None = None
    try:
        while True:
            if max_frames is not None and index >= max_frames:
                break
            if stop is not None and stop():
                break
            if realtime:
                target = start + index / fps
                delay = target - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
                timestamp_ms = int((time.monotonic() - start) * 1000)
            else:
                timestamp_ms = int(round(index * 1000.0 / fps))
            frame = frame_source()
            frame.timestamp_ms = timestamp_ms
            cmd: ControlCommand = command_cell.get()
            rel = f"frames/frame_{index:06d}_{timestamp_ms}.png"
            save_png(frame, run_dir / rel)
            records.append(
                DriveRecord(
                    frame_path=rel,
                    steering=round(cmd.steering, 4),
                    throttle=round(cmd.throttle, 4),
                    timestamp_ms=timestamp_ms,
                )
            )
            index += 1
    except OSError as e:
        error = f"run aborted: {e}"
        run_meta["error"] = error
    _write_manifest(run_dir, records)
    with open(run_dir / "meta.json", "w", encoding="utf-8") as f:
        json.dump(run_meta, f, indent=2)
    if error is not None:
        raise DatasetError(error)
    return Dataset(root=run_dir, records=records, meta=run_meta)


def _write_manifest(run_dir: Path, records: list[DriveRecord]) -> None:
    with open(_manifest_path(run_dir), "w", encoding="utf-8", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in records:
            writer.writerow(
                [r.frame_path, f"{r.steering:.4f}", f"{r.throttle:.4f}", r.timestamp_ms]
            )


def load_dataset(run_dir) -> Dataset:
    """Parse manifest.csv, validate invariants, return records in time order."""
    run_dir = Path(run_dir)
    manifest = _manifest_path(run_dir)
    if not manifest.exists():
        raise DatasetError(f"no manifest.csv in {run_dir}")

    records: list[DriveRecord] = []
    with open(manifest, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise DatasetError(f"unexpected manifest header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DatasetError(f"manifest row {lineno}: expected 4 fields, got {len(row)}")
            frame_path, steering_s, throttle_s, ts_s = row
            try:
                steering = float(steering_s)
                throttle = float(throttle_s)
                timestamp_ms = int(ts_s)
            except ValueError as e:
                raise DatasetError(f"manifest row {lineno}: {e}") from None
            if not -1.0 <= steering <= 1.0:
                raise DatasetError(
                    f"manifest row {lineno}: steering {steering} outside [-1, 1]"
                )
            if not -1.0 <= throttle <= 1.0:
                raise DatasetError(
                    f"manifest row {lineno}: throttle {throttle} outside [-1, 1]"
                )
            if not (run_dir / frame_path).exists():
                raise DatasetError(
                    f"manifest row {lineno}: missing frame file {frame_path}"
                )
            records.append(DriveRecord(frame_path, steering, throttle, timestamp_ms))

    records.sort(key=lambda r: r.timestamp_ms)
    meta = {}
    meta_path = run_dir / "meta.json"
    if meta_path.exists():
        with open(meta_path, encoding="utf-8") as f:
            meta = json.load(f)
    return Dataset(root=run_dir, records=records, meta=meta)


def steering_histogram(values, bins: int) -> np.ndarray:
    """Counts over `bins` uniform bins spanning [-1, 1].

    Bins are left-inclusive with a right-inclusive last bin, so counts always
    sum to len(values) for in-range data.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    counts, _ = np.histogram(np.asarray(values, dtype=np.float64), bins=bins, range=(-1.0, 1.0))
    return counts
