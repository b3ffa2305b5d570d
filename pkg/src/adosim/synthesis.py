"""Novel-view rendering from posed RGB-D frames.

The ego observation is synthesized in four stages: forward depth warping of
the associated source frame into the ego viewpoint, hole filling, projection
of the other vehicle as a shaded box mesh with depth-tested rasterization,
and statistical harmonization of the inserted pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from .geometry import Pose2
from .trace import CameraRig, Frame

NEAR_PLANE = 0.05  # meters, camera-frame z below which geometry is clipped
INPAINT_RADIUS = 8  # Manhattan pixels


@dataclass(frozen=True)
class MeshSpec:
    """Procedural two-box vehicle: body plus cabin, flat-shaded."""

    length: float
    width: float
    height: float
    color: Tuple[float, float, float]  # base RGB in [0, 1]
    specular: float                    # highlight strength in [0, 1]
    style: int                         # cabin silhouette variant

    def __post_init__(self):
        if min(self.length, self.width, self.height) <= 0:
            raise ValueError("mesh dimensions must be positive")
        if any(not (0 <= c <= 1) for c in self.color):
            raise ValueError("color channels must lie in [0, 1]")
        if not (0 <= self.specular <= 1):
            raise ValueError("specular strength must lie in [0, 1]")


@dataclass(frozen=True)
class MeshLibraryConfig:
    """Sampling ranges for episode vehicle meshes."""

    length_range: Tuple[float, float] = (3.8, 4.6)
    width_range: Tuple[float, float] = (1.6, 2.0)
    height_range: Tuple[float, float] = (1.3, 1.7)
    channel_range: Tuple[float, float] = (0.15, 0.9)
    specular_range: Tuple[float, float] = (0.1, 0.7)
    n_styles: int = 4


@dataclass(frozen=True)
class RenderedView:
    """Synthesized ego-view image with depth and provenance masks."""

    image: np.ndarray          # (H, W, 3) uint8
    warped_depth: np.ndarray   # (H, W) float32, 0 where unknown
    coverage_mask: np.ndarray  # (H, W) bool, pixels that received a splat
    fg_mask: np.ndarray        # (H, W) bool, pixels written by the vehicle mesh


def pose_matrix4(pose: Pose2) -> np.ndarray:
    """4x4 rigid transform mapping body-frame points to world frame."""
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    return np.array([
        [c, -s, 0.0, pose.x],
        [s, c, 0.0, pose.y],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ])


def rigid_inverse(T: np.ndarray) -> np.ndarray:
    """Closed-form inverse of a rigid 4x4 transform (exact for exact R)."""
    R = T[:3, :3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ T[:3, 3]
    return out


def relative_body_transform(src: Pose2, dst: Pose2) -> np.ndarray:
    """4x4 transform taking src-body coordinates to dst-body coordinates."""
    return rigid_inverse(pose_matrix4(dst)) @ pose_matrix4(src)


def warp_coordinates(frame: Frame, rig: CameraRig, T_v1_to_v2: np.ndarray):
    """Target-image coordinates of every valid source pixel under the warp.

    Lifts each valid source pixel through its depth, carries it across
    source-camera -> source-body -> target-body -> target-camera, and
    projects it. Returns (u2, v2, z2, src_flat): float target pixel
    coordinates, target camera depth, and flat indices of the source pixels;
    points behind the near plane are dropped.
    """
    h, w = rig.height, rig.width
    M = rigid_inverse(rig.T_cam_to_body) @ np.asarray(T_v1_to_v2, float) \
        @ rig.T_cam_to_body

    valid = frame.valid_mask.ravel()
    src_flat = np.flatnonzero(valid)
    u, v = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    z1 = frame.depth.ravel().astype(np.float64)[valid]
    x1 = (u.ravel()[valid] - rig.cx) / rig.fx * z1
    y1 = (v.ravel()[valid] - rig.cy) / rig.fy * z1
    p2 = (np.stack([x1, y1, z1], axis=1) @ M[:3, :3].T) + M[:3, 3]
    z2 = p2[:, 2]

    front = z2 > NEAR_PLANE
    p2, z2, src_flat = p2[front], z2[front], src_flat[front]
    u2 = rig.fx * p2[:, 0] / z2 + rig.cx
    v2 = rig.fy * p2[:, 1] / z2 + rig.cy
    return u2, v2, z2, src_flat


def reproject(frame: Frame, rig: CameraRig, T_v1_to_v2: np.ndarray) -> RenderedView:
    """Forward-warp a source frame into a target body pose.

    Each valid source pixel is carried through warp_coordinates and splatted
    to its nearest target pixel with a z-buffer (smallest depth wins).
    """
    h, w = rig.height, rig.width
    u2f, v2f, z2, src_flat = warp_coordinates(frame, rig, T_v1_to_v2)
    u2 = np.rint(u2f).astype(np.int64)
    v2 = np.rint(v2f).astype(np.int64)
    inb = (u2 >= 0) & (u2 < w) & (v2 >= 0) & (v2 < h)

    colors = frame.image.reshape(-1, 3)[src_flat[inb]]
    z2, u2, v2 = z2[inb], u2[inb], v2[inb]
    # write far-to-near so the nearest splat lands last
    order = np.argsort(-z2, kind="stable")
    flat = v2[order] * w + u2[order]

    image = np.zeros((h * w, 3), dtype=np.uint8)
    depth = np.zeros(h * w, dtype=np.float32)
    coverage = np.zeros(h * w, dtype=bool)
    image[flat] = colors[order]
    depth[flat] = z2[order].astype(np.float32)
    coverage[flat] = True
    return RenderedView(
        image=image.reshape(h, w, 3),
        warped_depth=depth.reshape(h, w),
        coverage_mask=coverage.reshape(h, w),
        fg_mask=np.zeros((h, w), dtype=bool),
    )


def inpaint_holes(view: RenderedView) -> RenderedView:
    """Fill uncovered pixels from the nearest covered pixel within 8 steps.

    Filling sweeps one Manhattan ring per round (4-neighborhood), so each
    hole pixel copies its BFS-nearest covered value; neighbors at equal
    distance resolve in the fixed order up, down, left, right. Pixels no
    covered value can reach are set to the mean covered color. The coverage
    mask itself is not modified.
    """
    if view.coverage_mask.all():
        return view
    image = view.image.copy()
    depth = view.warped_depth.copy()
    filled = view.coverage_mask.copy()
    for _ in range(INPAINT_RADIUS):
        if filled.all():
            break
        snapshot = filled.copy()
        newly = np.zeros_like(filled)
        for axis, shift in ((0, 1), (0, -1), (1, 1), (1, -1)):
            donor = np.roll(snapshot, shift, axis=axis)
            # roll wraps around the border; the wrapped row/column never donates
            if axis == 0:
                donor[0 if shift == 1 else -1, :] = False
            else:
                donor[:, 0 if shift == 1 else -1] = False
            take = ~filled & ~newly & donor
            if not np.any(take):
                continue
            image[take] = np.roll(image, shift, axis=axis)[take]
            depth[take] = np.roll(depth, shift, axis=axis)[take]
            newly |= take
        filled |= newly
    if not filled.all():
        if np.any(view.coverage_mask):
            mean_color = np.rint(
                view.image[view.coverage_mask].mean(axis=0)).astype(np.uint8)
        else:
            mean_color = np.zeros(3, dtype=np.uint8)
        image[~filled] = mean_color
    return replace(view, image=image, warped_depth=depth)


def sample_mesh_spec(library: MeshLibraryConfig, rng: np.random.Generator) -> MeshSpec:
    """Draw one episode vehicle mesh from the library's ranges."""
    u = rng.uniform
    return MeshSpec(
        length=float(u(*library.length_range)),
        width=float(u(*library.width_range)),
        height=float(u(*library.height_range)),
        color=tuple(float(u(*library.channel_range)) for _ in range(3)),
        specular=float(u(*library.specular_range)),
        style=int(rng.integers(0, max(library.n_styles, 1))),
    )


def _box_triangles(center: np.ndarray, dims: np.ndarray) -> np.ndarray:
    """12 triangles (12, 3, 3) of an axis-aligned box, outward winding."""
    cx, cy, cz = center
    hx, hy, hz = dims / 2.0
    v = np.array([
        [cx - hx, cy - hy, cz - hz], [cx + hx, cy - hy, cz - hz],
        [cx + hx, cy + hy, cz - hz], [cx - hx, cy + hy, cz - hz],
        [cx - hx, cy - hy, cz + hz], [cx + hx, cy - hy, cz + hz],
        [cx + hx, cy + hy, cz + hz], [cx - hx, cy + hy, cz + hz],
    ])
    quads = [
        (0, 3, 2, 1),  # bottom, normal -z
        (4, 5, 6, 7),  # top, +z
        (0, 1, 5, 4),  # -y side
        (2, 3, 7, 6),  # +y side
        (1, 2, 6, 5),  # +x front
        (3, 0, 4, 7),  # -x rear
    ]
    tris = []
    for a, b, c, d in quads:
        tris.append(v[[a, b, c]])
        tris.append(v[[a, c, d]])
    return np.array(tris)


def vehicle_mesh(mesh: MeshSpec) -> np.ndarray:
    """Body and cabin boxes in the vehicle's own frame, (24, 3, 3)."""
    body_h = mesh.height * 0.55
    body = _box_triangles(
        np.array([0.0, 0.0, body_h / 2.0]),
        np.array([mesh.length, mesh.width, body_h]),
    )
    frac = (0.42, 0.52, 0.48, 0.58)[mesh.style % 4]
    shift = (-0.08, 0.0, 0.06, -0.02)[mesh.style % 4]
    cabin = _box_triangles(
        np.array([mesh.length * shift, 0.0, body_h + (mesh.height - body_h) / 2.0]),
        np.array([mesh.length * frac, mesh.width * 0.82, mesh.height - body_h]),
    )
    return np.concatenate([body, cabin], axis=0)


def _clip_triangle_near(tri: np.ndarray, near: float) -> Sequence[np.ndarray]:
    """Clip one camera-frame triangle against the z=near plane."""
    inside = tri[:, 2] > near
    if inside.all():
        return [tri]
    if not inside.any():
        return []
    poly = []
    for i in range(3):
        a, b = tri[i], tri[(i + 1) % 3]
        if inside[i]:
            poly.append(a)
        if inside[i] != inside[(i + 1) % 3]:
            t = (near - a[2]) / (b[2] - a[2])
            poly.append(a + t * (b - a))
    return [np.array([poly[0], poly[i], poly[i + 1]])
            for i in range(1, len(poly) - 1)]


def render_ado(view: RenderedView, rig: CameraRig, ego_pose: Pose2,
               ado_pose: Pose2, mesh: MeshSpec,
               scene_mean_color: np.ndarray) -> RenderedView:
    """Rasterize the other vehicle into the view with depth testing.

    Shading is flat per facet: ambient proportional to the scene's mean
    luminance plus a headlight-style directional term from the ego camera,
    with an optional specular kick. Pixels whose existing warped depth is
    nearer keep their value; written pixels update depth and the fg mask.
    """
    tris_body = vehicle_mesh(mesh)
    T = rigid_inverse(rig.T_cam_to_body) @ relative_body_transform(ado_pose, ego_pose)
    tris_cam = tris_body @ T[:3, :3].T + T[:3, 3]

    clipped = []
    for tri in tris_cam:
        clipped.extend(_clip_triangle_near(tri, NEAR_PLANE))
    if not clipped:
        return replace(view, fg_mask=np.zeros_like(view.fg_mask))

    h, w = rig.height, rig.width
    image = view.image.astype(np.float64)
    depth = view.warped_depth.astype(np.float64).copy()
    fg = np.zeros((h, w), dtype=bool)

    ambient = 0.25 + 0.5 * float(np.mean(scene_mean_color)) / 255.0
    base = np.array(mesh.color)

    for tri in clipped:
        n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            continue
        n /= norm
        centroid = tri.mean(axis=0)
        view_dir = centroid / np.linalg.norm(centroid)  # camera at origin
        facing = float(np.dot(n, -view_dir))
        if facing <= 0.0:
            continue  # back face
        shade = base * (0.5 * ambient + 0.6 * facing) \
            + mesh.specular * 0.35 * facing ** 8
        color = np.clip(shade, 0.0, 1.0) * 255.0

        z = tri[:, 2]
        us = rig.fx * tri[:, 0] / z + rig.cx
        vs = rig.fy * tri[:, 1] / z + rig.cy
        lo_u = max(int(math.floor(us.min())), 0)
        hi_u = min(int(math.ceil(us.max())), w - 1)
        lo_v = max(int(math.floor(vs.min())), 0)
        hi_v = min(int(math.ceil(vs.max())), h - 1)
        if lo_u > hi_u or lo_v > hi_v:
            continue
        gu, gv = np.meshgrid(np.arange(lo_u, hi_u + 1, dtype=float),
                             np.arange(lo_v, hi_v + 1, dtype=float))
        # screen-space edge functions; sign-agnostic inside test
        def edge(ax, ay, bx, by, px, py):
            return (bx - ax) * (py - ay) - (by - ay) * (px - ax)

        area = edge(us[0], vs[0], us[1], vs[1], us[2], vs[2])
        if abs(area) < 1e-12:
            continue
        w0 = edge(us[1], vs[1], us[2], vs[2], gu, gv) / area
        w1 = edge(us[2], vs[2], us[0], vs[0], gu, gv) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        inv_z = w0 / z[0] + w1 / z[1] + w2 / z[2]
        pix_z = np.where(inv_z > 0, 1.0 / np.maximum(inv_z, 1e-12), np.inf)
        patch_depth = depth[lo_v:hi_v + 1, lo_u:hi_u + 1]
        visible = inside & ((patch_depth == 0.0) | (pix_z < patch_depth))
        if not visible.any():
            continue
        patch_img = image[lo_v:hi_v + 1, lo_u:hi_u + 1]
        patch_img[visible] = color
        patch_depth[visible] = pix_z[visible]
        fg[lo_v:hi_v + 1, lo_u:hi_u + 1] |= visible

    return RenderedView(
        image=np.clip(np.rint(image), 0, 255).astype(np.uint8),
        warped_depth=depth.astype(np.float32),
        coverage_mask=view.coverage_mask,
        fg_mask=fg,
    )


def harmonize(view: RenderedView, strength: float = 0.5) -> RenderedView:
    """Blend foreground statistics toward the background's, per channel.

    Foreground pixels are affinely remapped so their mean/std match the
    covered background's, then mixed with the original at the given
    strength. With no foreground (or no background) this is the identity.
    """
    fg_mask = view.fg_mask
    bg_mask = view.coverage_mask & ~fg_mask
    if not fg_mask.any() or not bg_mask.any():
        return view
    image = view.image.astype(np.float64)
    fg = image[fg_mask]
    bg = image[bg_mask]
    fg_mean, fg_std = fg.mean(axis=0), fg.std(axis=0)
    bg_mean, bg_std = bg.mean(axis=0), bg.std(axis=0)
    scale = np.where(fg_std > 1e-6, bg_std / np.maximum(fg_std, 1e-6), 1.0)
    matched = (fg - fg_mean) * scale + bg_mean
    blended = (1.0 - strength) * fg + strength * matched
    image[fg_mask] = blended
    return replace(view, image=np.clip(np.rint(image), 0, 255).astype(np.uint8))
