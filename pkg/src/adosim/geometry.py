"""Planar pose algebra, curvilinear offsets, and convex footprint geometry.

Everything here is pure and value-semantic: poses and polygons are small
immutable containers, and all operations return new values, so the functions
can be shared freely across concurrent environment instances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Vertices closer than this (meters) are merged; collinear turns below this
# cross-product magnitude are dropped.
MERGE_TOL = 1e-9


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]. In-range values pass through untouched."""
    if -math.pi < a <= math.pi:
        return a
    r = math.fmod(a + math.pi, 2.0 * math.pi)
    if r <= 0.0:
        r += 2.0 * math.pi
    return r - math.pi


def wrap_angle_array(a: np.ndarray) -> np.ndarray:
    """Vectorized wrap_angle, same (-pi, pi] convention."""
    a = np.asarray(a, dtype=float)
    r = np.fmod(a + np.pi, 2.0 * np.pi)
    r = np.where(r <= 0.0, r + 2.0 * np.pi, r) - np.pi
    return np.where((a > -np.pi) & (a <= np.pi), a, r)


@dataclass(frozen=True)
class Pose2:
    """SE(2) pose: position in meters, heading in radians, x-forward / y-left.

    theta is wrapped to (-pi, pi] on construction.
    """

    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def forward(self) -> tuple[float, float]:
        return math.cos(self.theta), math.sin(self.theta)

    def left(self) -> tuple[float, float]:
        return -math.sin(self.theta), math.cos(self.theta)


@dataclass(frozen=True)
class CurvilinearOffset:
    """Agent pose relative to a reference pose: lateral (left+), longitudinal
    (forward+), rotational. q_rot is wrapped to (-pi, pi]."""

    q_lat: float
    q_long: float
    q_rot: float

    def __post_init__(self):
        object.__setattr__(self, "q_rot", wrap_angle(self.q_rot))


def to_curvilinear(ref: Pose2, agent: Pose2) -> CurvilinearOffset:
    """Express `agent` in the frame of `ref`.

    q_long is the forward component, q_lat the leftward component; q_lat = 0
    means the agent sits on the reference's forward axis.
    """
    dx = agent.x - ref.x
    dy = agent.y - ref.y
    c, s = math.cos(ref.theta), math.sin(ref.theta)
    return CurvilinearOffset(
        q_lat=-s * dx + c * dy,
        q_long=c * dx + s * dy,
        q_rot=wrap_angle(agent.theta - ref.theta),
    )


@dataclass(frozen=True)
class FootprintDims:
    """Rectangular vehicle footprint, meters."""

    length: float
    width: float

    def __post_init__(self):
        if self.length <= 0.0 or self.width <= 0.0:
            raise ValueError(f"footprint dims must be positive, got {self}")


def dilate_footprint(dims: FootprintDims, d_len: float, d_wid: float) -> FootprintDims:
    """Grow (or shrink) a footprint; raises ValueError on non-positive result."""
    return FootprintDims(dims.length + d_len, dims.width + d_wid)


class ConvexPolygon:
    """Convex planar polygon with counter-clockwise vertices.

    Construction normalizes orientation to CCW, merges duplicate/collinear
    vertices (tolerance MERGE_TOL) and rejects non-convex or degenerate input.
    """

    __slots__ = ("vertices",)

    def __init__(self, vertices):
        v = np.asarray(vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise ValueError("polygon needs at least 3 planar vertices")
        if _signed_area(v) < 0.0:
            v = v[::-1]
        v = _merge_vertices(v)
        if v.shape[0] < 3 or _signed_area(v) <= MERGE_TOL:
            raise ValueError("degenerate polygon (zero area)")
        if not _is_convex_ccw(v):
            raise ValueError("polygon is not convex")
        self.vertices = v
        self.vertices.setflags(write=False)

    def area(self) -> float:
        return _signed_area(self.vertices)

    def contains(self, point) -> bool:
        """Point-in-polygon test, boundary counts as inside."""
        p = np.asarray(point, dtype=float)
        a = self.vertices
        b = np.roll(a, -1, axis=0)
        cross = (b[:, 0] - a[:, 0]) * (p[1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (p[0] - a[:, 0])
        return bool(np.all(cross >= -MERGE_TOL))

    def __repr__(self):
        return f"ConvexPolygon({self.vertices.tolist()})"


def _signed_area(v: np.ndarray) -> float:
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _merge_vertices(v: np.ndarray) -> np.ndarray:
    # Drop near-duplicates, then near-collinear middle vertices.
    keep = []
    n = v.shape[0]
    for i in range(n):
        if not keep or np.hypot(*(v[i] - keep[-1])) > MERGE_TOL:
            keep.append(v[i])
    if len(keep) > 1 and np.hypot(*(keep[-1] - keep[0])) <= MERGE_TOL:
        keep.pop()
    out = []
    m = len(keep)
    for i in range(m):
        prev, cur, nxt = keep[i - 1], keep[i], keep[(i + 1) % m]
        cross = (cur[0] - prev[0]) * (nxt[1] - prev[1]) - (cur[1] - prev[1]) * (nxt[0] - prev[0])
        if abs(cross) > MERGE_TOL:
            out.append(cur)
    return np.array(out) if out else np.empty((0, 2))


def _is_convex_ccw(v: np.ndarray) -> bool:
    a = v
    b = np.roll(v, -1, axis=0)
    c = np.roll(v, -2, axis=0)
    cross = (b[:, 0] - a[:, 0]) * (c[:, 1] - b[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - b[:, 0])
    return bool(np.all(cross > -MERGE_TOL))


def footprint_polygon(pose: Pose2, dims: FootprintDims) -> ConvexPolygon:
    """Axis-aligned rectangle of `dims` centered at `pose`, rotated by theta."""
    hl, hw = 0.5 * dims.length, 0.5 * dims.width
    corners = np.array([[hl, -hw], [hl, hw], [-hl, hw], [-hl, -hw]])
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    rot = np.array([[c, -s], [s, c]])
    return ConvexPolygon(corners @ rot.T + np.array([pose.x, pose.y]))


def convex_overlap_area(a: ConvexPolygon, b: ConvexPolygon) -> float:
    """Area of a ∩ b via half-plane clipping + shoelace; 0 when disjoint."""
    poly = _clip_convex(a.vertices, b.vertices)
    if poly.shape[0] < 3:
        return 0.0
    return max(_signed_area(poly), 0.0)


def _clip_convex(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of `subject` against convex CCW `clipper`."""
    output = [tuple(p) for p in subject]
    n = clipper.shape[0]
    for i in range(n):
        if not output:
            break
        cp1 = clipper[i]
        cp2 = clipper[(i + 1) % n]
        ex, ey = cp2[0] - cp1[0], cp2[1] - cp1[1]

        def inside(p):
            return ex * (p[1] - cp1[1]) - ey * (p[0] - cp1[0]) >= 0.0

        input_list = output
        output = []
        s = input_list[-1]
        s_in = inside(s)
        for e in input_list:
            e_in = inside(e)
            if e_in:
                if not s_in:
                    output.append(_line_intersect(cp1, cp2, s, e))
                output.append(e)
            elif s_in:
                output.append(_line_intersect(cp1, cp2, s, e))
            s, s_in = e, e_in
    return np.array(output) if len(output) >= 3 else np.empty((0, 2))


def _line_intersect(cp1, cp2, s, e):
    dcx, dcy = cp1[0] - cp2[0], cp1[1] - cp2[1]
    dpx, dpy = s[0] - e[0], s[1] - e[1]
    n1 = cp1[0] * cp2[1] - cp1[1] * cp2[0]
    n2 = s[0] * e[1] - s[1] * e[0]
    den = dcx * dpy - dcy * dpx
    return ((n1 * dpx - n2 * dcx) / den, (n1 * dpy - n2 * dcy) / den)


def min_clearance(a: ConvexPolygon, b: ConvexPolygon) -> float:
    """Shortest distance between two convex polygons; 0 if they overlap or touch.

    For disjoint convex polygons the minimum is attained at a vertex-edge (or
    vertex-vertex) pair, so checking all of them on both polygons is exact.
    """
    if not _separated(a.vertices, b.vertices):
        return 0.0
    d = min(
        _min_vertex_edge(a.vertices, b.vertices),
        _min_vertex_edge(b.vertices, a.vertices),
    )
    return d


def _separated(va: np.ndarray, vb: np.ndarray) -> bool:
    """Separating-axis test over both polygons' edge normals."""
    for verts in (va, vb):
        edges = np.roll(verts, -1, axis=0) - verts
        normals = np.stack([-edges[:, 1], edges[:, 0]], axis=1)
        for n in normals:
            pa = va @ n
            pb = vb @ n
            if pa.max() < pb.min() or pb.max() < pa.min():
                return True
    return False


def _min_vertex_edge(points: np.ndarray, poly: np.ndarray) -> float:
    a = poly
    b = np.roll(poly, -1, axis=0)
    ab = b - a  # (E, 2)
    ab_len2 = np.maximum((ab ** 2).sum(axis=1), 1e-300)
    # p (P,1,2) - a (1,E,2)
    ap = points[:, None, :] - a[None, :, :]
    t = np.clip((ap * ab[None, :, :]).sum(axis=2) / ab_len2[None, :], 0.0, 1.0)
    closest = a[None, :, :] + t[:, :, None] * ab[None, :, :]
    d2 = ((points[:, None, :] - closest) ** 2).sum(axis=2)
    return float(np.sqrt(d2.min()))
