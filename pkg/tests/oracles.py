"""Independent brute-force oracles shared by the test suite.

These deliberately avoid the library's own code paths: polygon areas come
from Monte Carlo hit counting, clearances from dense boundary sampling,
trajectories from a fine-step RK4 integrator, and frame transforms from 3x3
homogeneous matrices.
"""

from __future__ import annotations

import math

import numpy as np


# ---------------------------------------------------------------------------
# planar transforms


def pose_matrix(x: float, y: float, theta: float) -> np.ndarray:
    """3x3 homogeneous matrix mapping pose-frame coords to world coords."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, x], [s, c, y], [0.0, 0.0, 1.0]])


def relative_pose_matrix(ref, agent) -> np.ndarray:
    """ref^-1 ∘ agent as a homogeneous matrix (agent expressed in ref frame)."""
    return np.linalg.inv(pose_matrix(ref.x, ref.y, ref.theta)) @ pose_matrix(
        agent.x, agent.y, agent.theta
    )


# ---------------------------------------------------------------------------
# polygons


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns CCW hull vertices."""
    pts = sorted(map(tuple, points))
    if len(pts) <= 2:
        return np.array(pts)

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2:
                o, a = out[-2], out[-1]
                if (a[0] - o[0]) * (p[1] - o[1]) - (a[1] - o[1]) * (p[0] - o[0]) <= 0:
                    out.pop()
                else:
                    break
            out.append(p)
        return out

    lower = half(pts)
    upper = half(reversed(pts))
    return np.array(lower[:-1] + upper[:-1])


def random_convex_polygon(rng: np.random.Generator, n_points: int = 8, scale: float = 0.6,
                          center=(0.0, 0.0)) -> np.ndarray:
    """Hull of gaussian points: a random convex polygon of roughly unit scale."""
    while True:
        pts = rng.normal(size=(n_points, 2)) * scale + np.asarray(center)
        hull = convex_hull(pts)
        if hull.shape[0] >= 3:
            return hull


def points_in_convex(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Vectorized inside test for CCW convex `poly` (boundary inclusive)."""
    a = poly
    b = np.roll(poly, -1, axis=0)
    # cross((b-a), (p-a)) >= 0 for every edge
    inside = np.ones(points.shape[0], dtype=bool)
    for i in range(a.shape[0]):
        ex, ey = b[i, 0] - a[i, 0], b[i, 1] - a[i, 1]
        cross = ex * (points[:, 1] - a[i, 1]) - ey * (points[:, 0] - a[i, 0])
        inside &= cross >= -1e-12
    return inside


def mc_overlap_area(poly_a: np.ndarray, poly_b: np.ndarray, n_samples: int,
                    rng: np.random.Generator) -> float:
    """Monte Carlo area of intersection, sampling the bbox overlap region."""
    lo = np.maximum(poly_a.min(axis=0), poly_b.min(axis=0))
    hi = np.minimum(poly_a.max(axis=0), poly_b.max(axis=0))
    if np.any(hi <= lo):
        return 0.0
    box_area = float(np.prod(hi - lo))
    pts = rng.uniform(lo, hi, size=(n_samples, 2))
    hits = points_in_convex(pts, poly_a) & points_in_convex(pts, poly_b)
    return box_area * hits.mean()


def boundary_sample_clearance(poly_a: np.ndarray, poly_b: np.ndarray,
                              samples_per_edge: int = 10_000) -> float:
    """Min distance from densely sampled boundary points of each polygon to the
    other polygon's edges (point-segment distances, both directions)."""

    def edge_points(poly):
        t = np.linspace(0.0, 1.0, samples_per_edge)
        a = poly
        b = np.roll(poly, -1, axis=0)
        pts = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
        return pts.reshape(-1, 2)

    def min_dist_to_edges(points, poly):
        a = poly
        b = np.roll(poly, -1, axis=0)
        ab = b - a
        len2 = np.maximum((ab ** 2).sum(axis=1), 1e-300)
        best = np.full(points.shape[0], np.inf)
        for i in range(a.shape[0]):
            ap = points - a[i]
            t = np.clip(ap @ ab[i] / len2[i], 0.0, 1.0)
            closest = a[i] + t[:, None] * ab[i]
            d = np.sqrt(((points - closest) ** 2).sum(axis=1))
            best = np.minimum(best, d)
        return best.min()

    return float(min(
        min_dist_to_edges(edge_points(poly_a), poly_b),
        min_dist_to_edges(edge_points(poly_b), poly_a),
    ))


# ---------------------------------------------------------------------------
# ray casting


def straight_corridor_depth(rig, cam_x: float, road_length: float,
                            wall_offset: float, wall_height: float,
                            far_clip: float) -> np.ndarray:
    """Per-pixel analytic depth for a camera at (cam_x, 0, h), heading 0, in a
    straight corridor along +x with vertical walls at y = ±wall_offset.

    Scalar pinhole geometry, no shared code with the renderer. Depth is the
    camera-frame z coordinate; 0 where nothing is hit within far_clip.
    """
    T = rig.T_cam_to_body
    h_cam = float(T[2, 3])
    out = np.zeros((rig.height, rig.width), dtype=np.float64)
    for v in range(rig.height):
        for u in range(rig.width):
            # camera ray (a, b, 1) mapped to world via the rig matrix at heading 0
            a = (u - rig.cx) / rig.fx
            b = (v - rig.cy) / rig.fy
            d = T[:3, :3] @ np.array([a, b, 1.0])
            candidates = []
            if d[2] < 0:
                candidates.append(-h_cam / d[2])
            for side in (wall_offset, -wall_offset):
                if d[1] != 0:
                    lam = side / d[1]
                    if lam > 0:
                        z = h_cam + lam * d[2]
                        x = cam_x + lam * d[0]
                        if 0 <= z <= wall_height and 0 <= x <= road_length:
                            candidates.append(lam)
            if candidates:
                lam = min(candidates)
                if lam <= far_clip:
                    out[v, u] = lam
    return out


# ---------------------------------------------------------------------------
# fine-step integration


def rk4_fine_bicycle(y0: np.ndarray, controls: np.ndarray, wheelbase: float,
                     block_dt: float, substeps_per_block: int) -> np.ndarray:
    """Reference trajectory endpoint via RK4 with many substeps per control block.

    y0: (N, 5) initial states; controls: (N, B, 2) per-block (u_delta, u_a),
    held constant within each block of length block_dt.
    """

    def f(y, u):
        out = np.empty_like(y)
        out[:, 0] = y[:, 4] * np.cos(y[:, 2])
        out[:, 1] = y[:, 4] * np.sin(y[:, 2])
        out[:, 2] = y[:, 4] / wheelbase * np.tan(y[:, 3])
        out[:, 3] = u[:, 0]
        out[:, 4] = u[:, 1]
        return out

    y = y0.astype(float).copy()
    h = block_dt / substeps_per_block
    for b in range(controls.shape[1]):
        u = controls[:, b, :]
        for _ in range(substeps_per_block):
            k1 = f(y, u)
            k2 = f(y + 0.5 * h * k1, u)
            k3 = f(y + 0.5 * h * k2, u)
            k4 = f(y + h * k3, u)
            y = y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return y
