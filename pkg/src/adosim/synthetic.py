"""Procedural synthetic traces: piecewise-arc roads rendered by ray casting.

The road is a corridor with a textured ground plane, dashed and solid lane
markings, and textured side walls (planes along straight segments, vertical
cylinders along arcs). Every surface has a closed-form ray intersection, so
rendered depth is analytic and can serve as ground truth for warping tests.
Textures hash world-space cells, making them viewpoint independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .geometry import Pose2, wrap_angle
from .trace import CameraRig, Frame, Trace

DEFAULT_WHEELBASE = 2.8  # used to reject curvature no vehicle could track

_SKY_COLOR = np.array([171, 196, 219], dtype=np.uint8)
_EDGE_LINE_COLOR = np.array([226, 226, 218], dtype=np.uint8)
_DASH_LINE_COLOR = np.array([208, 208, 198], dtype=np.uint8)


@dataclass(frozen=True)
class RoadSegment:
    """One stretch of road with constant curvature (0 means straight)."""

    length: float
    kappa: float


@dataclass(frozen=True)
class RoadConfig:
    segments: Tuple[RoadSegment, ...]
    lane_width: float = 3.5      # distance between the solid edge lines
    wall_offset: float = 5.0     # centerline to wall, both sides
    wall_height: float = 3.0
    frame_spacing: float = 0.5   # arclength between captured frames
    capture_speed: float = 5.0   # m/s, sets frame timestamps
    far_clip: float = 40.0       # depth beyond this is marked invalid
    texture_cell: float = 3.0    # world-space size of texture blocks

    def __post_init__(self):
        if not self.segments:
            raise ValueError("road needs at least one segment")
        for seg in self.segments:
            if seg.length <= 0:
                raise ValueError("segment lengths must be positive")
            if abs(seg.kappa) * DEFAULT_WHEELBASE >= 1.0:
                raise ValueError(
                    f"curvature {seg.kappa} is too sharp: |kappa| must stay "
                    f"below 1/{DEFAULT_WHEELBASE} 1/m")
            if abs(seg.kappa) * self.wall_offset >= 1.0:
                raise ValueError("wall radius would collapse on this curvature")
        if not (0 < self.lane_width < 2 * self.wall_offset):
            raise ValueError("lane must fit between the walls")
        if self.frame_spacing <= 0 or self.capture_speed <= 0:
            raise ValueError("frame spacing and capture speed must be positive")
        if self.far_clip <= 0 or self.wall_height <= 0:
            raise ValueError("far clip and wall height must be positive")

    @property
    def total_length(self) -> float:
        return sum(seg.length for seg in self.segments)


def default_road() -> RoadConfig:
    """S-curve long enough for full-horizon episodes at overtaking speeds."""
    return RoadConfig(segments=(
        RoadSegment(60.0, 0.0),
        RoadSegment(70.0, 0.02),
        RoadSegment(60.0, 0.0),
        RoadSegment(70.0, -0.02),
        RoadSegment(80.0, 0.0),
    ))


def centerline_pose(config: RoadConfig, s: float) -> Pose2:
    """Exact centerline pose at arclength s (clamped to the road extent)."""
    s = min(max(s, 0.0), config.total_length)
    x, y, theta = 0.0, 0.0, 0.0
    for seg in config.segments:
        u = min(s, seg.length)
        if seg.kappa == 0.0:
            x += u * math.cos(theta)
            y += u * math.sin(theta)
        else:
            t1 = theta + seg.kappa * u
            x += (math.sin(t1) - math.sin(theta)) / seg.kappa
            y -= (math.cos(t1) - math.cos(theta)) / seg.kappa
            theta = t1
        s -= u
        if s <= 0.0:
            break
    return Pose2(x, y, wrap_angle(theta))


class _SegmentGeometry:
    """World-frame description of one segment's footprint and walls."""

    def __init__(self, start: Pose2, seg: RoadSegment):
        self.start = start
        self.length = seg.length
        self.kappa = seg.kappa
        c, s = math.cos(start.theta), math.sin(start.theta)
        self.tangent = np.array([c, s])
        self.normal = np.array([-s, c])  # left of the road
        if seg.kappa != 0.0:
            self.radius = 1.0 / abs(seg.kappa)
            self.center = np.array([start.x, start.y]) + self.normal / seg.kappa
            # angle of the start point around the arc center
            sign = 1.0 if seg.kappa > 0 else -1.0
            self.psi0 = start.theta - sign * math.pi / 2.0
            self.sweep = seg.kappa * seg.length  # signed


def _segment_geometries(config: RoadConfig):
    geoms = []
    s = 0.0
    for seg in config.segments:
        geoms.append(_SegmentGeometry(centerline_pose(config, s), seg))
        s += seg.length
    return geoms


def _mix_hash(ix: np.ndarray, iy: np.ndarray, iz: np.ndarray, salt: int) -> np.ndarray:
    h = ix.astype(np.int64).astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
    h ^= iy.astype(np.int64).astype(np.uint64) * np.uint64(0xBF58476D1CE4E5B9)
    h ^= iz.astype(np.int64).astype(np.uint64) * np.uint64(0x94D049BB133111EB)
    h ^= np.uint64((salt * 0xD6E8FEB86659FD93) & 0xFFFFFFFFFFFFFFFF)
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xFF51AFD7ED558CCD)
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xC4CEB9FE1A85EC53)
    h ^= h >> np.uint64(33)
    return h


def _ground_color(pts: np.ndarray, cell: float, salt: int) -> np.ndarray:
    ix = np.floor(pts[:, 0] / cell)
    iy = np.floor(pts[:, 1] / cell)
    h = _mix_hash(ix, iy, np.zeros_like(ix), salt)
    out = np.empty((pts.shape[0], 3), dtype=np.uint8)
    out[:, 0] = 58 + ((h & np.uint64(0xFF)) * np.uint64(120) >> np.uint64(8))
    out[:, 1] = 58 + (((h >> np.uint64(8)) & np.uint64(0xFF)) * np.uint64(120) >> np.uint64(8))
    out[:, 2] = 60 + (((h >> np.uint64(16)) & np.uint64(0xFF)) * np.uint64(110) >> np.uint64(8))
    return out


def _wall_color(pts: np.ndarray, z: np.ndarray, cell: float, salt: int) -> np.ndarray:
    ix = np.floor(pts[:, 0] / cell)
    iy = np.floor(pts[:, 1] / cell)
    iz = np.floor(z / (cell * 0.5))
    h = _mix_hash(ix, iy, iz, salt + 1)
    out = np.empty((pts.shape[0], 3), dtype=np.uint8)
    out[:, 0] = 95 + ((h & np.uint64(0xFF)) * np.uint64(120) >> np.uint64(8))
    out[:, 1] = 75 + (((h >> np.uint64(8)) & np.uint64(0xFF)) * np.uint64(110) >> np.uint64(8))
    out[:, 2] = 60 + (((h >> np.uint64(16)) & np.uint64(0xFF)) * np.uint64(95) >> np.uint64(8))
    return out


def _road_frame_coords(geom: _SegmentGeometry, pts: np.ndarray):
    """(on_segment mask, arclength along segment, signed lateral offset)."""
    if geom.kappa == 0.0:
        rel = pts - np.array([geom.start.x, geom.start.y])
        along = rel @ geom.tangent
        lat = rel @ geom.normal
        on = (along >= 0.0) & (along <= geom.length)
        return on, along, lat
    rel = pts - geom.center
    dist = np.linalg.norm(rel, axis=1)
    psi = np.arctan2(rel[:, 1], rel[:, 0])
    if geom.kappa > 0:
        swept = np.mod(psi - geom.psi0, 2.0 * math.pi)
        on = swept <= geom.sweep
    else:
        swept = np.mod(geom.psi0 - psi, 2.0 * math.pi)
        on = swept <= -geom.sweep
    along = swept * geom.radius
    lat = math.copysign(1.0, geom.kappa) * (geom.radius - dist)
    return on, along, lat


def _wall_hits(geom: _SegmentGeometry, origin: np.ndarray, dirs: np.ndarray,
               wall_offset: float, wall_height: float) -> np.ndarray:
    """Smallest positive ray parameter hitting this segment's walls, inf if none."""
    n = dirs.shape[0]
    best = np.full(n, np.inf)
    if geom.kappa == 0.0:
        p0 = np.array([geom.start.x, geom.start.y])
        for side in (wall_offset, -wall_offset):
            denom = dirs[:, :2] @ geom.normal
            num = side - (origin[:2] - p0) @ geom.normal
            with np.errstate(divide="ignore", invalid="ignore"):
                lam = num / denom
                pts = origin[None, :2] + lam[:, None] * dirs[:, :2]
                z = origin[2] + lam * dirs[:, 2]
                along = (pts - p0) @ geom.tangent
                ok = (denom != 0) & (lam > 1e-9) & (along >= 0) \
                    & (along <= geom.length) & (z >= 0) & (z <= wall_height)
            best = np.where(ok & (lam < best), lam, best)
        return best
    for side in (wall_offset, -wall_offset):
        radius = geom.radius - side * math.copysign(1.0, geom.kappa)
        if radius <= 0:
            continue
        o = origin[:2] - geom.center
        a = (dirs[:, :2] ** 2).sum(axis=1)
        b = 2.0 * (dirs[:, :2] @ o)
        c = o @ o - radius * radius
        disc = b * b - 4.0 * a * c
        ok_disc = disc >= 0
        sq = np.sqrt(np.where(ok_disc, disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            roots = np.stack([(-b - sq) / (2 * a), (-b + sq) / (2 * a)], axis=1)
        for r in range(2):
            with np.errstate(invalid="ignore"):
                lam = roots[:, r]
                pts = origin[None, :2] + lam[:, None] * dirs[:, :2]
                z = origin[2] + lam * dirs[:, 2]
                psi = np.arctan2(pts[:, 1] - geom.center[1],
                                 pts[:, 0] - geom.center[0])
                if geom.kappa > 0:
                    swept = np.mod(psi - geom.psi0, 2.0 * math.pi)
                    on = swept <= geom.sweep
                else:
                    swept = np.mod(geom.psi0 - psi, 2.0 * math.pi)
                    on = swept <= -geom.sweep
                ok = ok_disc & (a > 0) & (lam > 1e-9) & on & (z >= 0) \
                    & (z <= wall_height)
            best = np.where(ok & (lam < best), lam, best)
    return best


def render_frame(config: RoadConfig, rig: CameraRig, pose: Pose2,
                 salt: int) -> Tuple[np.ndarray, np.ndarray]:
    """Ray-cast one view of the road. Returns (image uint8, depth float32).

    Depth is the camera-frame z coordinate of the hit (not euclidean ray
    length); rays are parameterized so the parameter equals that z directly.
    Sky and beyond-far-clip pixels get depth 0.
    """
    h, w = rig.height, rig.width
    u, v = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    dirs_cam = np.stack([
        (u.ravel() - rig.cx) / rig.fx,
        (v.ravel() - rig.cy) / rig.fy,
        np.ones(h * w),
    ], axis=1)
    ct, st = math.cos(pose.theta), math.sin(pose.theta)
    rot_world_body = np.array([[ct, -st, 0.0], [st, ct, 0.0], [0.0, 0.0, 1.0]])
    rot = rot_world_body @ rig.T_cam_to_body[:3, :3]
    cam_offset = rot_world_body @ rig.T_cam_to_body[:3, 3]
    origin = np.array([pose.x, pose.y, 0.0]) + cam_offset
    dirs = dirs_cam @ rot.T

    geoms = _segment_geometries(config)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam_ground = np.where(dirs[:, 2] < 0, -origin[2] / dirs[:, 2], np.inf)
    best = lam_ground.copy()
    is_wall = np.zeros(h * w, dtype=bool)
    for geom in geoms:
        lam_wall = _wall_hits(geom, origin, dirs, config.wall_offset,
                              config.wall_height)
        closer = lam_wall < best
        best = np.where(closer, lam_wall, best)
        is_wall |= closer

    valid = np.isfinite(best) & (best <= config.far_clip)
    depth = np.where(valid, best, 0.0).astype(np.float32)

    image = np.empty((h * w, 3), dtype=np.uint8)
    image[:] = _SKY_COLOR
    lam_safe = np.where(valid, best, 0.0)
    pts = origin[None, :] + lam_safe[:, None] * dirs
    pts2 = pts[:, :2]
    zs = pts[:, 2]

    ground_px = valid & ~is_wall
    if np.any(ground_px):
        image[ground_px] = _ground_color(pts2[ground_px], config.texture_cell, salt)
        on_any = np.zeros(h * w, dtype=bool)
        edge = np.zeros(h * w, dtype=bool)
        dash = np.zeros(h * w, dtype=bool)
        for geom in geoms:
            on, along, lat = _road_frame_coords(geom, pts2)
            on = on & ground_px & ~on_any & (np.abs(lat) <= config.wall_offset)
            edge |= on & (np.abs(np.abs(lat) - config.lane_width / 2.0) <= 0.08)
            dash |= on & (np.abs(lat) <= 0.07) & (np.mod(along, 2.0) < 1.0)
            on_any |= on
        image[edge] = _EDGE_LINE_COLOR
        image[dash & ~edge] = _DASH_LINE_COLOR
    wall_px = valid & is_wall
    if np.any(wall_px):
        image[wall_px] = _wall_color(pts2[wall_px], zs[wall_px],
                                     config.texture_cell, salt)

    return image.reshape(h, w, 3), depth.reshape(h, w)


def generate_synthetic_trace(config: RoadConfig, seed: int,
                             rig: Optional[CameraRig] = None) -> Trace:
    """Render a full trace along the road centerline, deterministic in seed."""
    rig = rig or CameraRig.default()
    salt = int(np.random.SeedSequence([seed, 0x524F4144]).generate_state(1)[0])
    total = config.total_length
    count = int(math.floor(total / config.frame_spacing + 1e-9)) + 1
    frames = []
    for k in range(count):
        s = k * config.frame_spacing
        pose = centerline_pose(config, s)
        image, depth = render_frame(config, rig, pose, salt)
        frames.append(Frame.create(pose, s / config.capture_speed, image, depth))
    return Trace(frames, rig)
