"""Posed RGB-D frame sequences: the data substrate the simulator re-renders.

A trace is an ordered list of frames, each holding a vehicle body pose, a
color image, and a per-pixel depth map in the camera's z convention. Traces
live on disk as a directory with a JSON manifest, 8-bit PNGs, and raw
little-endian float32 depth files.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .geometry import Pose2, wrap_angle, wrap_angle_array

SCHEMA_VERSION = 1
DEPTH_MAGIC = b"DPTH"
MAX_POSE_JUMP = 5.0  # meters between consecutive frames

# Camera axes expressed in the vehicle body frame: camera x (image right)
# points along -y (right of the car), camera y (image down) along -z, and
# camera z (optical axis) along +x (forward).
ROT_BODY_FROM_CAM = np.array([
    [0.0, 0.0, 1.0],
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
])


class TraceError(Exception):
    """Base class for trace loading and validation failures."""


class TraceManifestError(TraceError):
    """Manifest missing, unparseable, or carrying invalid calibration."""


class TraceFrameError(TraceError):
    """A frame's image or depth payload is missing or malformed."""


class TraceValidationError(TraceError):
    """The frame sequence violates a trace invariant."""


@dataclass(frozen=True)
class CameraRig:
    """Pinhole intrinsics plus the camera-to-body rigid transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    T_cam_to_body: np.ndarray  # 4x4, maps camera-frame points to body frame

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        T = np.asarray(self.T_cam_to_body, dtype=float)
        if T.shape != (4, 4):
            raise ValueError("T_cam_to_body must be a 4x4 matrix")
        object.__setattr__(self, "T_cam_to_body", T)

    def intrinsic_matrix(self) -> np.ndarray:
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    @staticmethod
    def default(camera_height: float = 1.5) -> "CameraRig":
        T = np.eye(4)
        T[:3, :3] = ROT_BODY_FROM_CAM
        T[2, 3] = camera_height
        return CameraRig(fx=160.0, fy=160.0, cx=96.0, cy=60.0,
                         width=192, height=120, T_cam_to_body=T)


@dataclass(frozen=True)
class Frame:
    """One posed RGB-D capture. Depth is z-depth in meters; 0 marks invalid."""

    pose: Pose2
    timestamp: float
    image: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W) float32
    valid_mask: np.ndarray  # (H, W) bool

    @staticmethod
    def create(pose: Pose2, timestamp: float, image: np.ndarray,
               depth: np.ndarray) -> "Frame":
        image = np.ascontiguousarray(image, dtype=np.uint8)
        depth = np.ascontiguousarray(depth, dtype=np.float32)
        return Frame(pose, float(timestamp), image, depth, depth > 0.0)


class Trace:
    """Immutable ordered frame sequence with calibration and arclength.

    Validates on construction: matching image/depth shapes, strictly
    increasing timestamps, and bounded jumps between consecutive poses.
    Arclength is the cumulative straight-line distance between frame
    positions.
    """

    def __init__(self, frames: Sequence[Frame], rig: CameraRig):
        frames = tuple(frames)
        if not frames:
            raise TraceValidationError("trace needs at least one frame")
        shape = (rig.height, rig.width)
        for i, f in enumerate(frames):
            if f.image.shape != shape + (3,) or f.depth.shape != shape:
                raise TraceValidationError(
                    f"frame {i}: image/depth shape does not match rig "
                    f"{rig.width}x{rig.height}")
            if np.any(f.depth < 0) or not np.all(np.isfinite(f.depth)):
                raise TraceValidationError(
                    f"frame {i}: depth must be finite and non-negative")
        ts = np.array([f.timestamp for f in frames])
        if np.any(np.diff(ts) <= 0):
            bad = int(np.argmax(np.diff(ts) <= 0)) + 1
            raise TraceValidationError(
                f"timestamps must be strictly increasing (frame {bad})")
        pos = np.array([[f.pose.x, f.pose.y] for f in frames])
        seg = np.linalg.norm(np.diff(pos, axis=0), axis=1) if len(frames) > 1 \
            else np.zeros(0)
        if seg.size and seg.max() > MAX_POSE_JUMP:
            bad = int(np.argmax(seg > MAX_POSE_JUMP)) + 1
            raise TraceValidationError(
                f"pose jump exceeds {MAX_POSE_JUMP} m at frame {bad}")
        self.frames = frames
        self.rig = rig
        self.positions = pos
        self.timestamps = ts
        self.arclength = np.concatenate([[0.0], np.cumsum(seg)])

    def __len__(self) -> int:
        return len(self.frames)


def save_trace(trace: Trace, path) -> None:
    """Write a trace directory: manifest.json plus per-frame PNG and .f32."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    rig = trace.rig
    entries = []
    for i, f in enumerate(trace.frames):
        image_name = f"{i:04d}.png"
        depth_name = f"{i:04d}.f32"
        Image.fromarray(f.image, mode="RGB").save(root / image_name)
        _write_depth(root / depth_name, f.depth)
        entries.append({
            "id": i,
            "timestamp": f.timestamp,
            "pose": [f.pose.x, f.pose.y, f.pose.theta],
            "image": image_name,
            "depth": depth_name,
        })
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "rig": {
            "fx": rig.fx, "fy": rig.fy, "cx": rig.cx, "cy": rig.cy,
            "width": rig.width, "height": rig.height,
            "T_cam_to_body": [float(v) for v in rig.T_cam_to_body.reshape(-1)],
        },
        "frames": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_trace(path) -> Trace:
    """Load and fully validate a trace directory written by save_trace."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise TraceManifestError(f"no manifest.json under {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise TraceManifestError(f"unreadable manifest: {e}") from e
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise TraceManifestError(
            f"unsupported schema_version {manifest.get('schema_version')!r}")
    try:
        r = manifest["rig"]
        rig = CameraRig(
            fx=float(r["fx"]), fy=float(r["fy"]),
            cx=float(r["cx"]), cy=float(r["cy"]),
            width=int(r["width"]), height=int(r["height"]),
            T_cam_to_body=np.array(r["T_cam_to_body"], dtype=float).reshape(4, 4),
        )
        entries = manifest["frames"]
    except (KeyError, TypeError, ValueError) as e:
        raise TraceManifestError(f"invalid rig or frame table: {e}") from e

    frames = []
    for entry in entries:
        fid = entry.get("id", "?")
        try:
            pose = Pose2(*[float(v) for v in entry["pose"]])
            timestamp = float(entry["timestamp"])
            image_path = root / entry["image"]
            depth_path = root / entry["depth"]
        except (KeyError, TypeError, ValueError) as e:
            raise TraceFrameError(f"frame {fid}: malformed manifest entry: {e}") from e
        if not image_path.is_file():
            raise TraceFrameError(f"frame {fid}: missing image file {entry['image']}")
        if not depth_path.is_file():
            raise TraceFrameError(f"frame {fid}: missing depth file {entry['depth']}")
        image = np.asarray(Image.open(image_path).convert("RGB"), dtype=np.uint8)
        depth = _read_depth(depth_path, fid)
        if image.shape[:2] != depth.shape:
            raise TraceFrameError(
                f"frame {fid}: image {image.shape[:2]} and depth {depth.shape} "
                "dimensions disagree")
        if image.shape[:2] != (rig.height, rig.width):
            raise TraceFrameError(
                f"frame {fid}: dimensions {image.shape[:2]} do not match rig "
                f"{rig.width}x{rig.height}")
        frames.append(Frame.create(pose, timestamp, image, depth))
    return Trace(frames, rig)


def _write_depth(path: Path, depth: np.ndarray) -> None:
    h, w = depth.shape
    header = DEPTH_MAGIC + struct.pack("<III", w, h, 0)
    path.write_bytes(header + np.ascontiguousarray(depth, dtype="<f4").tobytes())


def _read_depth(path: Path, fid) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != DEPTH_MAGIC:
        raise TraceFrameError(f"frame {fid}: bad depth header in {path.name}")
    w, h, _ = struct.unpack("<III", raw[4:16])
    expected = 16 + 4 * w * h
    if len(raw) != expected:
        raise TraceFrameError(
            f"frame {fid}: depth payload is {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(h, w).copy()


def nearest_frame(trace: Trace, pose: Pose2, hint: Optional[int] = None) -> int:
    """Index of the frame whose position is closest to the query pose.

    Ties break toward the lower index. With a hint (the previous answer), a
    doubling window around it is searched and accepted once the optimum is
    interior; this is exact for paths that do not loop back near themselves,
    and falls back to the full scan otherwise.
    """
    pos = trace.positions
    n = pos.shape[0]
    p = np.array([pose.x, pose.y])
    if hint is None or n <= 8:
        return int(np.argmin(((pos - p) ** 2).sum(axis=1)))
    hint = min(max(int(hint), 0), n - 1)
    w = 4
    while True:
        lo, hi = max(0, hint - w), min(n, hint + w + 1)
        d2 = ((pos[lo:hi] - p) ** 2).sum(axis=1)
        k = int(np.argmin(d2))
        at_left_edge = k == 0 and lo > 0
        at_right_edge = k == hi - lo - 1 and hi < n
        if not (at_left_edge or at_right_edge):
            return lo + k
        if lo == 0 and hi == n:
            return lo + k
        w *= 2


@dataclass(frozen=True)
class PathProjection:
    """Result of projecting a point onto a reference polyline."""

    s: float          # arclength of the foot point
    q_lat: float      # signed lateral offset, positive to the path's left
    heading: float    # interpolated reference heading at the foot point
    segment: int      # index of the segment containing the foot point


class ReferencePath:
    """Polyline with per-vertex heading, arclength, and curvature.

    Built from trace frame poses (optionally shifted laterally) or from any
    recorded trajectory. Projection finds the nearest point over all
    segments, so queries between vertices vary smoothly.
    """

    def __init__(self, xy: np.ndarray, heading: np.ndarray):
        xy = np.asarray(xy, dtype=float)
        heading = wrap_angle_array(np.asarray(heading, dtype=float))
        if xy.ndim != 2 or xy.shape[1] != 2 or xy.shape[0] < 2:
            raise ValueError("path needs at least two (x, y) vertices")
        if heading.shape != (xy.shape[0],):
            raise ValueError("one heading per vertex required")
        seg = np.diff(xy, axis=0)
        seg_len = np.linalg.norm(seg, axis=1)
        if np.any(seg_len <= 0):
            raise ValueError("path vertices must be distinct")
        self.xy = xy
        self.heading = heading
        self.arclength = np.concatenate([[0.0], np.cumsum(seg_len)])
        self._seg = seg
        self._seg_len = seg_len
        dtheta = wrap_angle_array(np.diff(heading))
        kappa = dtheta / seg_len
        # per-vertex curvature, last vertex repeats its incoming segment
        self.curvature = np.concatenate([kappa, kappa[-1:]])

    @property
    def total_length(self) -> float:
        return float(self.arclength[-1])

    def project(self, x: float, y: float) -> PathProjection:
        p = np.array([x, y])
        a = self.xy[:-1]
        d = self._seg
        t = np.clip(((p - a) * d).sum(axis=1) / (self._seg_len ** 2), 0.0, 1.0)
        foot = a + t[:, None] * d
        dist2 = ((p - foot) ** 2).sum(axis=1)
        i = int(np.argmin(dist2))
        s = float(self.arclength[i] + t[i] * self._seg_len[i])
        # sign from the cross product of segment direction and offset vector
        cross = d[i, 0] * (p[1] - foot[i, 1]) - d[i, 1] * (p[0] - foot[i, 0])
        q_lat = math.copysign(math.sqrt(dist2[i]), cross) if dist2[i] > 0 else 0.0
        dtheta = wrap_angle(self.heading[i + 1] - self.heading[i])
        heading = wrap_angle(self.heading[i] + t[i] * dtheta)
        return PathProjection(s=s, q_lat=q_lat, heading=heading, segment=i)

    def pose_at(self, s: float) -> Pose2:
        """Pose at arclength s, clamped to the path's extent."""
        s = min(max(s, 0.0), self.total_length)
        i = int(np.searchsorted(self.arclength, s, side="right") - 1)
        i = min(i, len(self._seg_len) - 1)
        t = (s - self.arclength[i]) / self._seg_len[i]
        x, y = self.xy[i] + t * self._seg[i]
        dtheta = wrap_angle(self.heading[i + 1] - self.heading[i])
        return Pose2(float(x), float(y), self.heading[i] + t * dtheta)

    def curvature_at(self, s: float) -> float:
        s = min(max(s, 0.0), self.total_length)
        i = int(np.searchsorted(self.arclength, s, side="right") - 1)
        i = min(i, len(self._seg_len) - 1)
        return float(self.curvature[i])


def reference_path(trace: Trace, lateral_offset: float = 0.0) -> ReferencePath:
    """Frame poses as a reference polyline, optionally shifted sideways.

    A positive offset moves every vertex by that distance along the local
    left normal; headings are kept.
    """
    heading = np.array([f.pose.theta for f in trace.frames])
    xy = trace.positions.copy()
    if lateral_offset != 0.0:
        normal = np.stack([-np.sin(heading), np.cos(heading)], axis=1)
        xy = xy + lateral_offset * normal
    return ReferencePath(xy, heading)
