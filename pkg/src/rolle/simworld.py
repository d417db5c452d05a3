"""Deterministic stand-in for the physical rover and its surroundings.

A kinematic bicycle rover drives on a 2D track: a tiled path of constant
half-width bordered by lawn. A synthetic pinhole camera, mounted upside
down like the real rig, renders perspective ground-plane views.

Sign convention (consistent across the whole stack): steering -1 is full
left. Heading increases toward the rover's right, so negative steering
angles turn left; the camera places negative-bearing objects on the left
half of the (un-rotated) image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .image import ImageFrame, frame_from_array

TILE_SPACING_M = 0.30
TILE_LINE_HALF_WIDTH_M = 0.012
SKY_COLOR = (140, 185, 235)

DEFAULT_LAWN_COLOR = (58, 150, 58)
DEFAULT_PATH_COLOR = (188, 184, 176)
DEFAULT_TILE_LINE_COLOR = (70, 70, 72)
DEFAULT_PATH_HALF_WIDTH_M = 0.20

# World-space resolution of the precomputed distance/arc field used by the
# renderer. Exact segment projection is still used for off_path and the
# pure-pursuit oracle.
FIELD_RESOLUTION_M = 0.01
_MAX_FIELD_CELLS = 40_000_000


class InvalidTrackSpecError(ValueError):
    """Track descriptor cannot produce a valid world."""


class InvalidWorldError(ValueError):
    """World geometry unusable for the requested operation."""


class NumericInputError(ValueError):
    """Non-finite value fed into the vehicle model."""


@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 0.18           # m, 1/16-scale chassis
    max_steer: float = math.radians(25.0)
    v_max: float = 2.0                # m/s
    speed_time_constant: float = 0.5  # s, first-order throttle response

    def __post_init__(self):
        for name in ("wheelbase", "max_steer", "v_max", "speed_time_constant"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass(frozen=True)
class CameraParams:
    height: float = 0.10              # m above ground
    pitch: float = math.radians(20.0)  # down from horizontal
    hfov: float = math.radians(100.0)
    forward_offset: float = 0.15      # m ahead of the pose reference point


DEFAULT_CAMERA = CameraParams()


def wrap_angle(theta: float) -> float:
    """Wrap into (-pi, pi]."""
    w = math.remainder(theta, 2.0 * math.pi)
    if w <= -math.pi:
        w += 2.0 * math.pi
    return w


@dataclass
class VehicleState:
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0
    speed: float = 0.0
    steering_angle: float = 0.0

    def clamped(self, p: VehicleParams) -> "VehicleState":
        return VehicleState(
            x=self.x,
            y=self.y,
            heading=wrap_angle(self.heading),
            speed=min(max(self.speed, 0.0), p.v_max),
            steering_angle=min(max(self.steering_angle, -p.max_steer), p.max_steer),
        )


@dataclass(frozen=True)
class ActuatedCommand:
    """Physical targets handed to the vehicle model."""

    steer_target: float   # radians
    speed_target: float   # m/s


class World:
    """Immutable track geometry; safe to share read-only across threads."""

    def __init__(
        self,
        centerline,
        path_half_width: float = DEFAULT_PATH_HALF_WIDTH_M,
        lawn_color=DEFAULT_LAWN_COLOR,
        path_color=DEFAULT_PATH_COLOR,
        tile_line_color=DEFAULT_TILE_LINE_COLOR,
    ):
        pts = np.asarray(centerline, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise InvalidTrackSpecError(
                "centerline must be an (N, 2) array with N >= 2"
            )
        if not np.isfinite(pts).all():
            raise InvalidTrackSpecError("centerline contains non-finite points")
        if path_half_width <= 0:
            raise InvalidTrackSpecError("path_half_width must be > 0")
        for c in (lawn_color, path_color, tile_line_color):
            if len(c) != 3 or any(not (0 <= int(v) <= 255) for v in c):
                raise InvalidTrackSpecError(f"invalid RGB8 color {c!r}")

        self.centerline = pts
        self.path_half_width = float(path_half_width)
        self.lawn_color = tuple(int(v) for v in lawn_color)
        self.path_color = tuple(int(v) for v in path_color)
        self.tile_line_color = tuple(int(v) for v in tile_line_color)

        seg = np.diff(pts, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seg_len == 0.0):
            keep = np.concatenate(([True], seg_len > 0.0))
            pts = pts[keep]
            if pts.shape[0] < 2:
                raise InvalidTrackSpecError("centerline collapses to a point")
            self.centerline = pts
            seg = np.diff(pts, axis=0)
            seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self._seg = seg
        self._seg_len = seg_len
        self._cum_s = np.concatenate(([0.0], np.cumsum(seg_len)))
        self.total_length = float(self._cum_s[-1])
        self.closed = bool(np.allclose(pts[0], pts[-1], atol=1e-9))

        margin = self.path_half_width + 1.0
        lo = pts.min(axis=0) - margin
        hi = pts.max(axis=0) + margin
        self.bounds = (float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))

        self._samples = None     # (M, 2) dense resample of the centerline
        self._sample_s = None    # (M,) arc position per sample
        self._tree = None
        self._field = None       # (dist, arc) raster over bounds

    # ---- dense sampling / projection ------------------------------------

    def _ensure_samples(self):
        if self._tree is not None:
            return
        step = 0.02
        n = max(2, int(math.ceil(self.total_length / step)) + 1)
        s = np.linspace(0.0, self.total_length, n)
        xs = np.interp(s, self._cum_s, self.centerline[:, 0])
        ys = np.interp(s, self._cum_s, self.centerline[:, 1])
        self._samples = np.column_stack([xs, ys])
        self._sample_s = s
        self._tree = cKDTree(self._samples)

    def project(self, points: np.ndarray):
        """Exact nearest-point projection onto the centerline polyline.

        points: (N, 2). Returns (dist, arc_s, side) each (N,); side > 0 when
        the point lies to the left of the path direction.
        """
        self._ensure_samples()
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        _, idx = self._tree.query(pts)
        n = self._samples.shape[0]

        if self.closed:
            prev = np.where(idx == 0, n - 2, idx - 1)
            nxt = np.where(idx == n - 1, 1, idx + 1)
        else:
            prev = np.maximum(idx - 1, 0)
            nxt = np.minimum(idx + 1, n - 1)

        best_d2 = np.full(pts.shape[0], np.inf)
        best_arc = np.zeros(pts.shape[0])
        best_side = np.zeros(pts.shape[0])
        for a, b in ((prev, idx), (idx, nxt)):
            pa = self._samples[a]
            d = self._samples[b] - pa
            ln2 = np.einsum("ij,ij->i", d, d)
            ln2_safe = np.where(ln2 > 0, ln2, 1.0)
            t = np.clip(np.einsum("ij,ij->i", pts - pa, d) / ln2_safe, 0.0, 1.0)
            proj = pa + t[:, None] * d
            diff = pts - proj
            d2 = np.einsum("ij,ij->i", diff, diff)
            arc = self._sample_s[a] + t * np.sqrt(ln2)
            cross = d[:, 0] * diff[:, 1] - d[:, 1] * diff[:, 0]
            take = d2 < best_d2
            best_d2 = np.where(take, d2, best_d2)
            best_arc = np.where(take, arc, best_arc)
            best_side = np.where(take, -np.sign(cross), best_side)
        return np.sqrt(best_d2), best_arc, best_side

    def point_at_arc(self, s) -> np.ndarray:
        """Centerline point at arc position s (wrapped for closed tracks)."""
        s = np.asarray(s, dtype=np.float64)
        if self.closed and self.total_length > 0:
            s = np.mod(s, self.total_length)
        else:
            s = np.clip(s, 0.0, self.total_length)
        xs = np.interp(s, self._cum_s, self.centerline[:, 0])
        ys = np.interp(s, self._cum_s, self.centerline[:, 1])
        return np.stack([xs, ys], axis=-1)

    # ---- raster field for the renderer -----------------------------------

    def _ensure_field(self):
        if self._field is not None:
            return
        from scipy import ndimage

        x0, y0, x1, y1 = self.bounds
        res = FIELD_RESOLUTION_M
        nx = int(math.ceil((x1 - x0) / res)) + 1
        ny = int(math.ceil((y1 - y0) / res)) + 1
        if nx * ny > _MAX_FIELD_CELLS:
            raise InvalidWorldError(
                f"track bounds too large to rasterize ({nx}x{ny} cells)"
            )
        # Rasterize the centerline densely, then take a Euclidean distance
        # transform; the feature indices map every cell to its nearest
        # centerline cell, whose arc position it inherits.
        step = res / 2.0
        n = max(2, int(math.ceil(self.total_length / step)) + 1)
        s = np.linspace(0.0, self.total_length, n)
        xs = np.interp(s, self._cum_s, self.centerline[:, 0])
        ys = np.interp(s, self._cum_s, self.centerline[:, 1])
        ix = np.clip(np.floor((xs - x0) / res).astype(np.int64), 0, nx - 1)
        iy = np.clip(np.floor((ys - y0) / res).astype(np.int64), 0, ny - 1)

        marked = np.ones((nx, ny), dtype=bool)
        marked[ix, iy] = False
        arc_on_line = np.zeros((nx, ny), dtype=np.float32)
        arc_on_line[ix, iy] = s.astype(np.float32)

        dist, (fi, fj) = ndimage.distance_transform_edt(
            marked, sampling=res, return_indices=True
        )
        self._field = (
            dist.astype(np.float32),
            arc_on_line[fi, fj],
        )

    def field_lookup(self, xs: np.ndarray, ys: np.ndarray):
        """Nearest-cell (dist, arc) lookup; off-grid points get inf dist."""
        self._ensure_field()
        x0, y0, _, _ = self.bounds
        res = FIELD_RESOLUTION_M
        dist_f, arc_f = self._field
        ix = np.floor((xs - x0) / res).astype(np.int64)
        iy = np.floor((ys - y0) / res).astype(np.int64)
        inside = (ix >= 0) & (iy >= 0) & (ix < dist_f.shape[0]) & (iy < dist_f.shape[1])
        ixc = np.clip(ix, 0, dist_f.shape[0] - 1)
        iyc = np.clip(iy, 0, dist_f.shape[1] - 1)
        dist = np.where(inside, dist_f[ixc, iyc], np.inf)
        arc = np.where(inside, arc_f[ixc, iyc], 0.0)
        return dist, arc


# ---- track construction ---------------------------------------------------


def _straight_centerline(length: float) -> np.ndarray:
    return np.array([[0.0, 0.0], [length, 0.0]])


def _s_curve_centerline(length: float, amplitude: float, wavelength: float,
                        phase: float = 0.0) -> np.ndarray:
    n = max(2, int(round(length / 0.05)) + 1)
    x = np.linspace(0.0, length, n)
    y = amplitude * np.sin(2.0 * math.pi * x / wavelength + phase) \
        - amplitude * math.sin(phase)
    return np.column_stack([x, y])


def _loop_centerline(radius: float, direction: str) -> np.ndarray:
    n = max(8, int(round(2.0 * math.pi * radius / 0.05)))
    u = np.linspace(0.0, 2.0 * math.pi, n + 1)
    if direction == "left":
        phi = math.pi / 2.0 - u
        center = (0.0, -radius)
    elif direction == "right":
        phi = -math.pi / 2.0 + u
        center = (0.0, radius)
    else:
        raise InvalidTrackSpecError(f"loop direction must be left/right, got {direction!r}")
    x = center[0] + radius * np.cos(phi)
    y = center[1] + radius * np.sin(phi)
    x[-1], y[-1] = x[0], y[0]
    return np.column_stack([x, y])


def build_track(spec, **params) -> World:
    """Build a World from a named track or an explicit centerline.

    Named specs: "straight" (length=30), "s-curve" (length=50, amplitude=1.2,
    wavelength=12, phase=0) and "loop" (radius=2.0, direction="left").
    Anything non-string is treated as an explicit (N, 2) centerline.
    Geometry keyword arguments override the named defaults; World keyword
    arguments (path_half_width, colors) pass through.
    """
    world_kw = {
        k: params.pop(k)
        for k in ("path_half_width", "lawn_color", "path_color", "tile_line_color")
        if k in params
    }
    if isinstance(spec, str):
        name = spec.strip().lower()
        if name == "straight":
            pts = _straight_centerline(params.pop("length", 30.0))
        elif name in ("s-curve", "scurve", "s_curve"):
            pts = _s_curve_centerline(
                params.pop("length", 50.0),
                params.pop("amplitude", 1.2),
                params.pop("wavelength", 12.0),
                params.pop("phase", 0.0),
            )
        elif name == "loop":
            pts = _loop_centerline(
                params.pop("radius", 2.0), params.pop("direction", "left")
            )
        else:
            raise InvalidTrackSpecError(f"unknown track {spec!r}")
        if params:
            raise InvalidTrackSpecError(f"unused track parameters {sorted(params)}")
        return World(pts, **world_kw)
    if params:
        raise InvalidTrackSpecError(f"unused track parameters {sorted(params)}")
    return World(spec, **world_kw)


def track_start_state(w: World) -> VehicleState:
    """Rest pose at the start of the centerline, aligned with it."""
    d = w.centerline[1] - w.centerline[0]
    return VehicleState(
        x=float(w.centerline[0][0]),
        y=float(w.centerline[0][1]),
        heading=math.atan2(float(d[1]), float(d[0])),
    )


# ---- vehicle model --------------------------------------------------------


def step_vehicle(s: VehicleState, cmd: ActuatedCommand, dt: float,
                 p: VehicleParams) -> VehicleState:
    """One explicit-Euler step of the kinematic bicycle model.

    Steering snaps to its target; speed relaxes first-order toward its
    target; the pose then integrates with the updated speed.
    """
    vals = (s.x, s.y, s.heading, s.speed, cmd.steer_target, cmd.speed_target, dt)
    if not all(math.isfinite(v) for v in vals):
        raise NumericInputError(f"non-finite vehicle step input {vals}")
    if dt <= 0:
        raise NumericInputError(f"dt must be > 0, got {dt}")

    steer = min(max(cmd.steer_target, -p.max_steer), p.max_steer)
    speed_target = min(max(cmd.speed_target, 0.0), p.v_max)
    v = s.speed + (speed_target - s.speed) * dt / p.speed_time_constant
    v = min(max(v, 0.0), p.v_max)
    x = s.x + v * math.cos(s.heading) * dt
    y = s.y + v * math.sin(s.heading) * dt
    heading = wrap_angle(s.heading + (v / p.wheelbase) * math.tan(steer) * dt)
    return VehicleState(x=x, y=y, heading=heading, speed=v, steering_angle=steer)


def off_path(w: World, s: VehicleState) -> bool:
    """True iff the rover sits strictly farther than path_half_width from the
    centerline (boundary inclusive: exactly on the edge is still on-path)."""
    dist, _, _ = w.project(np.array([[s.x, s.y]]))
    return bool(dist[0] > w.path_half_width)


def cross_track_left(w: World, s: VehicleState) -> float:
    """Signed lateral offset in meters; positive when left of the centerline."""
    dist, _, side = w.project(np.array([[s.x, s.y]]))
    return float(side[0] * dist[0])


def oracle_steer(w: World, s: VehicleState, lookahead: float = 0.6,
                 p: VehicleParams | None = None) -> float:
    """Pure-pursuit steering toward the centerline point `lookahead` meters
    ahead by arc length. Stands in for the human driver during collection.
    """
    if lookahead <= 0:
        raise ValueError("lookahead must be > 0")
    if w.centerline.shape[0] < 2:
        raise InvalidWorldError("world has no usable centerline")
    p = p or VehicleParams()
    _, arc, _ = w.project(np.array([[s.x, s.y]]))
    target = w.point_at_arc(float(arc[0]) + lookahead)
    bearing = math.atan2(target[1] - s.y, target[0] - s.x)
    rho = wrap_angle(bearing - s.heading)
    kappa = 2.0 * math.sin(rho) / lookahead
    steer = math.atan(kappa * p.wheelbase)
    return min(max(steer / p.max_steer, -1.0), 1.0)


# ---- synthetic camera -----------------------------------------------------

_ray_cache: dict = {}


def _ray_grid(raw_w: int, raw_h: int, cam: CameraParams):
    key = (raw_w, raw_h, cam.height, cam.pitch, cam.hfov)
    got = _ray_cache.get(key)
    if got is not None:
        return got
    f = (raw_w / 2.0) / math.tan(cam.hfov / 2.0)
    u = (np.arange(raw_w) + 0.5 - raw_w / 2.0) / f
    v = (np.arange(raw_h) + 0.5 - raw_h / 2.0) / f
    uu, vv = np.meshgrid(u, v)
    sp, cp = math.sin(cam.pitch), math.cos(cam.pitch)
    forward = cp - vv * sp           # component along the heading
    lateral = uu                      # component toward the driver's right
    up = -(vv * cp + sp)
    _ray_cache[key] = (forward, lateral, up)
    return _ray_cache[key]


def render_camera(w: World, s: VehicleState, raw_w: int = 320, raw_h: int = 240,
                  cam: CameraParams = DEFAULT_CAMERA,
                  timestamp_ms: int = 0) -> ImageFrame:
    """Perspective ground-plane view from the rover's upside-down camera.

    Pure function of its inputs: identical calls give byte-identical frames.
    """
    if raw_w < 16 or raw_h < 16:
        raise ValueError("raw frame must be at least 16x16")
    fwd, lat, up = _ray_grid(raw_w, raw_h, cam)

    ch, sh = math.cos(s.heading), math.sin(s.heading)
    dx = fwd * ch - lat * sh
    dy = fwd * sh + lat * ch

    cam_x = s.x + cam.forward_offset * ch
    cam_y = s.y + cam.forward_offset * sh

    img = np.empty((raw_h, raw_w, 3), dtype=np.uint8)
    img[:] = SKY_COLOR

    ground = up < -1e-9
    t = np.where(ground, cam.height / np.where(ground, -up, 1.0), 0.0)
    gx = cam_x + t * dx
    gy = cam_y + t * dy

    dist, arc = w.field_lookup(gx[ground], gy[ground])
    on_path = dist <= w.path_half_width
    phase = np.mod(arc, TILE_SPACING_M)
    seam = on_path & (
        np.minimum(phase, TILE_SPACING_M - phase) <= TILE_LINE_HALF_WIDTH_M
    )

    colors = np.empty((dist.shape[0], 3), dtype=np.uint8)
    colors[:] = w.lawn_color
    colors[on_path] = w.path_color
    colors[seam] = w.tile_line_color
    img[ground] = colors

    # Inverted mount: the raw frame leaves the camera rotated 180 degrees.
    img = img[::-1, ::-1].copy()
    return frame_from_array(img, timestamp_ms)
