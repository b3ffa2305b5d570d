"""Driving task environments: lane following, car following, overtaking.

An episode places the ego car (and for two-car tasks a front car) on a
trace, steps both with the bicycle model at fixed speeds, and scores
centerline tracking, passing progress, collision overlap, and steering
smoothness. The front car tracks a reference path with pure pursuit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

from .dynamics import (
    DT_DEFAULT,
    AgentState,
    ControlInput,
    VehicleParams,
    step_rk3,
    steering_command_to_rate,
)
from .geometry import (
    CurvilinearOffset,
    FootprintDims,
    Pose2,
    convex_overlap_area,
    dilate_footprint,
    footprint_polygon,
    min_clearance,
    wrap_angle,
)
from .synthesis import (
    MeshLibraryConfig,
    MeshSpec,
    RenderedView,
    relative_body_transform,
    harmonize,
    inpaint_holes,
    render_ado,
    reproject,
    sample_mesh_spec,
)
from .trace import ReferencePath, Trace, nearest_frame, reference_path

TASKS = ("lane_follow", "car_follow", "overtake")
TERMINALS = ("none", "off_lane", "off_rotation", "collision", "passed", "timeout")
PURE_PURSUIT_GAIN = 0.8
PURE_PURSUIT_LOOKAHEAD = 5.0
PASS_TERMINAL_HYSTERESIS = 5.0  # meters beyond z_pass before ending the episode
SENTINEL_DX = 100.0             # reported when the front car is absent or behind


@dataclass(frozen=True)
class TaskSpec:
    task: str
    z_lat: float = 1.5
    z_rot: float = 0.5
    z_pass: float = 5.0
    w_lane: float = 1.0
    w_pass: float = 10.0
    w_collision: float = 1.0
    w_comfort: float = 0.01
    gap_range: Tuple[float, float] = (6.0, 15.0)
    lateral_range: Tuple[float, float] = (1.0, 2.0)
    speed_range: Tuple[float, float] = (3.0, 5.0)
    overtake_margin: Tuple[float, float] = (1.0, 2.0)
    collision_threshold: float = 0.05
    dilation: Tuple[float, float] = (1.0, 0.4)
    max_steps: int = 400

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if min(self.z_lat, self.z_rot, self.z_pass) <= 0:
            raise ValueError("thresholds must be positive")
        for lo, hi in (self.gap_range, self.lateral_range, self.speed_range,
                       self.overtake_margin):
            if hi < lo:
                raise ValueError("interval bounds must be ordered")
        if not (0 <= self.collision_threshold <= 1):
            raise ValueError("collision threshold must lie in [0, 1]")
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")


@dataclass
class WorldState:
    """Mutable episode state, exactly reproducible from (spec, seed, actions)."""

    ego: AgentState
    ado: Optional[AgentState]
    mesh: Optional[MeshSpec]
    ego_arclength: float = 0.0
    ado_arclength: float = 0.0
    steering_history: List[float] = field(default_factory=list)
    step_count: int = 0


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    reward_terms: Dict[str, float]
    terminal: str
    info: Dict[str, object]

    @property
    def done(self) -> bool:
        return self.terminal != "none"


def lane_reward(q_lat: float, z_lat: float) -> float:
    """1 at the centerline, 0 at the termination threshold, negative beyond."""
    return 1.0 - (q_lat / z_lat) ** 2


def follow_reward(q_lat_to_front_path: float, z_lat: float) -> float:
    """Lane reward with the front car's traced trajectory as the centerline."""
    return lane_reward(q_lat_to_front_path, z_lat)


def pass_reward(ego_arclength: float, ado_arclength: float, z_pass: float) -> float:
    """1 once the ego has traced at least z_pass more meters than the front car."""
    return 1.0 if ego_arclength - ado_arclength >= z_pass else 0.0


def collision_reward(ego: Pose2, ado: Pose2, ego_dims: FootprintDims,
                     ado_dims: FootprintDims,
                     dilation: Tuple[float, float]) -> float:
    """Negative overlap of the dilated ego footprint with the other car,
    normalized by the undilated ego area."""
    grown = footprint_polygon(ego, dilate_footprint(ego_dims, *dilation))
    other = footprint_polygon(ado, ado_dims)
    overlap = convex_overlap_area(grown, other)
    return -overlap / (ego_dims.length * ego_dims.width)


def comfort_reward(history: List[float], dt: float) -> float:
    """Negative magnitude of the steering command's second difference.

    Zero until three commands have been recorded.
    """
    if len(history) < 3:
        return 0.0
    d_t, d_t1, d_t2 = history[-1], history[-2], history[-3]
    return -abs(d_t - 2.0 * d_t1 + d_t2) / dt ** 2


def terminal_check(q: CurvilinearOffset, overlap_fraction: float, lead: float,
                   step_count: int, spec: TaskSpec) -> str:
    """Episode-ending cause, highest priority first."""
    if overlap_fraction > spec.collision_threshold:
        return "collision"
    if abs(q.q_lat) > spec.z_lat:
        return "off_lane"
    if abs(q.q_rot) > spec.z_rot:
        return "off_rotation"
    if spec.task == "overtake" and lead >= spec.z_pass + PASS_TERMINAL_HYSTERESIS:
        return "passed"
    if step_count >= spec.max_steps:
        return "timeout"
    return "none"


def pure_pursuit(state: AgentState, path: ReferencePath, wheelbase: float,
                 delta_max: float, lookahead: float = PURE_PURSUIT_LOOKAHEAD,
                 gain: float = PURE_PURSUIT_GAIN) -> float:
    """Steering angle command toward the point `lookahead` meters further
    along the path than the agent's nearest path point."""
    proj = path.project(state.x, state.y)
    target = path.pose_at(proj.s + lookahead)
    alpha = wrap_angle(math.atan2(target.y - state.y, target.x - state.x)
                       - state.phi)
    delta = math.atan(2.0 * wheelbase * math.sin(alpha) / (gain * lookahead))
    return min(max(delta, -delta_max), delta_max)


class DrivingEnv:
    """One driving episode at a time over a shared immutable trace.

    Observations are either a privileged state vector or synthesized ego
    camera pixels; the action is the desired steering angle (speeds stay
    fixed within an episode). All randomness comes from the reset seed.
    """

    PIXEL_SHAPE = (32, 48)  # rows, cols of the downsampled observation

    def __init__(self, spec: TaskSpec, trace: Trace,
                 obs_mode: str = "privileged",
                 vehicle: Optional[VehicleParams] = None,
                 mesh_library: Optional[MeshLibraryConfig] = None,
                 dt: float = DT_DEFAULT, augment: bool = False):
        if obs_mode not in ("privileged", "pixels"):
            raise ValueError(f"unknown obs_mode {obs_mode!r}")
        self.spec = spec
        self.trace = trace
        self.obs_mode = obs_mode
        self.vehicle = vehicle or VehicleParams()
        self.mesh_library = mesh_library or MeshLibraryConfig()
        self.dt = dt
        self.augment = augment
        self.centerline = reference_path(trace)
        self.world: Optional[WorldState] = None
        self._rng: Optional[np.random.Generator] = None
        self._offset_paths: Dict[float, ReferencePath] = {0.0: self.centerline}

    # -- episode setup ------------------------------------------------------

    def reset(self, seed) -> np.ndarray:
        rng = np.random.default_rng(seed)
        spec = self.spec
        has_ado = spec.task != "lane_follow"

        if spec.task == "overtake":
            ado_speed = float(rng.uniform(*spec.speed_range))
            ego_speed = ado_speed + float(rng.uniform(*spec.overtake_margin))
        else:
            ego_speed = float(rng.uniform(*spec.speed_range))
            ado_speed = ego_speed
        gap = float(rng.uniform(*spec.gap_range))
        lateral = float(rng.uniform(*spec.lateral_range)) \
            * (1.0 if rng.uniform() < 0.5 else -1.0)
        mesh = sample_mesh_spec(self.mesh_library, rng)
        # drawn every episode so trajectories match across observation modes
        aug = rng.uniform(0.9, 1.1, size=4)

        needed = ego_speed * spec.max_steps * self.dt \
            + (gap + mesh.length if has_ado else 0.0) + 5.0
        max_start = self.centerline.total_length - needed
        if max_start < 0:
            raise ValueError(
                f"trace too short: need {needed:.1f} m of road, have "
                f"{self.centerline.total_length:.1f} m")
        candidates = np.flatnonzero(self.trace.arclength <= max_start)
        start_idx = int(candidates[rng.integers(0, len(candidates))])
        start = self.trace.frames[start_idx].pose
        ego = AgentState(start.x, start.y, start.theta, 0.0, ego_speed)

        ado = None
        if has_ado:
            s_ado = float(self.trace.arclength[start_idx]) + gap
            base = self.centerline.pose_at(s_ado)
            ado_pose = Pose2(base.x - math.sin(base.theta) * lateral,
                             base.y + math.cos(base.theta) * lateral,
                             base.theta)
            ado = AgentState(ado_pose.x, ado_pose.y, ado_pose.theta, 0.0,
                             ado_speed)

        self._rng = rng
        self.world = WorldState(ego=ego, ado=ado, mesh=mesh if has_ado else None)
        self._ado_offset = lateral if has_ado else 0.0
        self._ado_path = self._offset_path(self._ado_offset) if has_ado else None
        self._ado_traced: List[Tuple[float, float, float]] = []
        if ado is not None:
            self._ado_traced.append((ado.x, ado.y, ado.phi))
        self._next_retarget = self._draw_retarget_step() \
            if spec.task == "car_follow" else None
        self._frame_hint: Optional[int] = start_idx
        self._aug = aug
        s0 = float(self.trace.arclength[start_idx])
        span = np.arange(s0, s0 + ego_speed * spec.max_steps * self.dt, 1.0)
        curvature = float(np.mean(np.abs(
            [self.centerline.curvature_at(s) for s in span])))
        self._init_info = {
            "gap": gap, "lateral": lateral, "ego_speed": ego_speed,
            "ado_speed": ado_speed, "start_index": start_idx,
            "start_arclength": s0,
            "mesh_length": mesh.length, "mesh_width": mesh.width,
            "ado_pose": None if ado is None else (ado.x, ado.y, ado.phi),
            "road_curvature": curvature,
        }
        return self._observation()

    def _offset_path(self, offset: float) -> ReferencePath:
        key = round(float(offset), 6)
        if key not in self._offset_paths:
            self._offset_paths[key] = reference_path(self.trace, key)
        return self._offset_paths[key]

    def _draw_retarget_step(self) -> int:
        seconds = float(self._rng.uniform(3.0, 8.0))
        return self.world.step_count + max(int(round(seconds / self.dt)), 1)

    # -- stepping -----------------------------------------------------------

    def step(self, action: float) -> StepResult:
        if self.world is None:
            raise RuntimeError("call reset before step")
        if not math.isfinite(action):
            raise ValueError("action must be finite")
        spec, world, limits = self.spec, self.world, self.vehicle.limits
        command = min(max(float(action), -limits.delta_max), limits.delta_max)
        world.steering_history.append(command)
        if len(world.steering_history) > 3:
            world.steering_history = world.steering_history[-3:]

        prev_ego = world.ego
        u_delta = steering_command_to_rate(command, prev_ego, self.dt, limits)
        world.ego = step_rk3(prev_ego, ControlInput(u_delta, 0.0), self.vehicle,
                             self.dt)
        world.ego_arclength += math.hypot(world.ego.x - prev_ego.x,
                                          world.ego.y - prev_ego.y)

        if world.ado is not None:
            if self._next_retarget is not None \
                    and world.step_count >= self._next_retarget:
                self._ado_offset = float(self._rng.choice([0.0, 1.0, -1.0]))
                self._ado_path = self._offset_path(self._ado_offset)
                self._next_retarget = self._draw_retarget_step()
            prev_ado = world.ado
            ado_cmd = pure_pursuit(prev_ado, self._ado_path,
                                   self.vehicle.wheelbase, limits.delta_max)
            ado_rate = steering_command_to_rate(ado_cmd, prev_ado, self.dt,
                                                limits)
            world.ado = step_rk3(prev_ado, ControlInput(ado_rate, 0.0),
                                 self.vehicle, self.dt)
            world.ado_arclength += math.hypot(world.ado.x - prev_ado.x,
                                              world.ado.y - prev_ado.y)
            self._ado_traced.append((world.ado.x, world.ado.y, world.ado.phi))

        world.step_count += 1

        ego_pose = Pose2(world.ego.x, world.ego.y, world.ego.phi)
        self._frame_hint = nearest_frame(self.trace, ego_pose,
                                         hint=self._frame_hint)
        proj = self.centerline.project(ego_pose.x, ego_pose.y)
        q = CurvilinearOffset(
            q_lat=proj.q_lat,
            q_long=proj.s,
            q_rot=wrap_angle(ego_pose.theta - proj.heading),
        )

        overlap_fraction = 0.0
        clearance = math.inf
        r_collision = 0.0
        if world.ado is not None:
            ado_pose = Pose2(world.ado.x, world.ado.y, world.ado.phi)
            ego_dims = self.vehicle.footprint
            ado_dims = FootprintDims(world.mesh.length, world.mesh.width)
            p_ego = footprint_polygon(ego_pose, ego_dims)
            p_ado = footprint_polygon(ado_pose, ado_dims)
            overlap_fraction = convex_overlap_area(p_ego, p_ado) \
                / (ego_dims.length * ego_dims.width)
            clearance = min_clearance(p_ego, p_ado)
            r_collision = collision_reward(ego_pose, ado_pose, ego_dims,
                                           ado_dims, spec.dilation)

        if spec.task == "car_follow":
            q_follow = self._follow_offset(ego_pose)
            r_lane = follow_reward(q_follow, spec.z_lat)
        else:
            q_follow = None
            r_lane = lane_reward(q.q_lat, spec.z_lat)
        lead = world.ego_arclength - world.ado_arclength
        r_pass = pass_reward(world.ego_arclength, world.ado_arclength,
                             spec.z_pass) if spec.task == "overtake" else 0.0
        r_comfort = comfort_reward(world.steering_history, self.dt)

        terms = {"lane": r_lane, "pass": r_pass, "collision": r_collision,
                 "comfort": r_comfort}
        reward = spec.w_lane * r_lane + spec.w_pass * r_pass \
            + spec.w_collision * r_collision + spec.w_comfort * r_comfort
        terminal = terminal_check(q, overlap_fraction, lead, world.step_count,
                                  spec)

        info = {
            "q_lat": q.q_lat, "q_rot": q.q_rot, "arclength_s": q.q_long,
            "overlap_fraction": overlap_fraction,
            "clearance": None if math.isinf(clearance) else clearance,
            "lead": lead, "step": world.step_count,
            "command": command,
            "ego_pose": (world.ego.x, world.ego.y, world.ego.phi),
            "ego_delta": world.ego.delta, "ego_v": world.ego.v,
            "ado_pose": None if world.ado is None else
                (world.ado.x, world.ado.y, world.ado.phi),
            "ego_arclength": world.ego_arclength,
            "ado_arclength": world.ado_arclength,
            "q_follow": q_follow,
            "frame_index": self._frame_hint,
        }
        obs = self._observation()
        return StepResult(observation=obs, reward=reward, reward_terms=terms,
                          terminal=terminal, info=info)

    def _follow_offset(self, ego_pose: Pose2) -> float:
        pts = np.array([(x, y) for x, y, _ in self._ado_traced])
        if len(pts) < 2:
            ref = self._ado_traced[0]
            return math.hypot(ego_pose.x - ref[0], ego_pose.y - ref[1])
        heads = np.array([h for _, _, h in self._ado_traced])
        keep = np.concatenate([[True],
                               np.linalg.norm(np.diff(pts, axis=0), axis=1) > 1e-9])
        if keep.sum() < 2:
            ref = self._ado_traced[0]
            return math.hypot(ego_pose.x - ref[0], ego_pose.y - ref[1])
        path = ReferencePath(pts[keep], heads[keep])
        return path.project(ego_pose.x, ego_pose.y).q_lat

    # -- observations -------------------------------------------------------

    def _observation(self) -> np.ndarray:
        if self.obs_mode == "privileged":
            return self.privileged_observation()
        return self.pixel_observation()

    def privileged_observation(self) -> np.ndarray:
        """State vector: [q_lat/z_lat, q_rot/z_rot, v, delta, dx, dy, dyaw,
        dv, kappa@+5, kappa@+10, kappa@+15].

        The front-car slots read (+100, 0, 0) with dv 0 when there is no
        front car or it is fully behind the ego.
        """
        world, spec = self.world, self.spec
        ego_pose = Pose2(world.ego.x, world.ego.y, world.ego.phi)
        proj = self.centerline.project(ego_pose.x, ego_pose.y)
        q_rot = wrap_angle(ego_pose.theta - proj.heading)
        obs = np.zeros(11)
        obs[0] = proj.q_lat / spec.z_lat
        obs[1] = q_rot / spec.z_rot
        obs[2] = world.ego.v
        obs[3] = world.ego.delta
        dx, dy, dyaw, dv = SENTINEL_DX, 0.0, 0.0, 0.0
        if world.ado is not None:
            c, s = math.cos(ego_pose.theta), math.sin(ego_pose.theta)
            rx = world.ado.x - ego_pose.x
            ry = world.ado.y - ego_pose.y
            fx = c * rx + s * ry
            behind = fx < -(self.vehicle.footprint.length / 2.0
                            + world.mesh.length / 2.0)
            if not behind:
                dx = fx
                dy = -s * rx + c * ry
                dyaw = wrap_angle(world.ado.phi - ego_pose.theta)
                dv = world.ado.v - world.ego.v
        obs[4], obs[5], obs[6], obs[7] = dx, dy, dyaw, dv
        for i, ahead in enumerate((5.0, 10.0, 15.0)):
            obs[8 + i] = self.centerline.curvature_at(proj.s + ahead)
        return obs

    def render_view(self, include_ado: bool = True) -> "RenderedView":
        """Full-resolution synthesized ego camera view."""
        world = self.world
        ego_pose = Pose2(world.ego.x, world.ego.y, world.ego.phi)
        self._frame_hint = nearest_frame(self.trace, ego_pose,
                                         hint=self._frame_hint)
        frame = self.trace.frames[self._frame_hint]
        T = relative_body_transform(frame.pose, ego_pose)
        view = inpaint_holes(reproject(frame, self.trace.rig, T))
        if world.ado is not None and include_ado:
            bg = view.image[view.coverage_mask]
            mean_color = bg.mean(axis=0) if bg.size else np.full(3, 128.0)
            ado_pose = Pose2(world.ado.x, world.ado.y, world.ado.phi)
            view = render_ado(view, self.trace.rig, ego_pose, ado_pose,
                              world.mesh, mean_color)
            view = harmonize(view)
        return view

    def pixel_observation(self) -> np.ndarray:
        """Synthesized grayscale ego view, standardized per image."""
        view = self.render_view()
        image = view.image.astype(np.float64)
        if self.augment:
            image = self._augment_image(image)
        gray = (0.299 * image[..., 0] + 0.587 * image[..., 1]
                + 0.114 * image[..., 2])
        rows, cols = self.PIXEL_SHAPE
        small = Image.fromarray(gray.astype(np.float32), mode="F").resize(
            (cols, rows), resample=Image.BOX)
        out = np.asarray(small, dtype=np.float64)
        out -= out.mean()
        std = out.std()
        return out / max(std, 1e-8)

    def _augment_image(self, image: np.ndarray) -> np.ndarray:
        gamma, brightness, saturation, contrast = self._aug
        out = 255.0 * (image / 255.0) ** gamma
        out = out * brightness
        lum = out.mean(axis=2, keepdims=True)
        out = lum + saturation * (out - lum)
        out = 127.5 + contrast * (out - 127.5)
        return np.clip(out, 0.0, 255.0)

    @property
    def init_info(self) -> Dict[str, float]:
        """Episode initialization draws, for evaluation bookkeeping."""
        return dict(self._init_info)
