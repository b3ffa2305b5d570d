"""Offline active-test harness for frozen policies.

Episodes are rolled with deterministic (mode) actions and a 0% collision
threshold, recorded step by step, and summarized into the safety metrics:
intervention rate, mean of per-episode minimum clearance, maximum lateral
deviation, and maximum yaw error. Records round-trip through JSON lines so
every summary is recomputable offline, and they can be sliced into
difficulty-quartile breakdowns, per-frame intervention rates along the
trace, and clearance histogram / recall curves.
"""

from __future__ import annotations

import dataclasses
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .policy import PolicyParams, RecurrentState, forward_step
from .tasks import DrivingEnv, TaskSpec
from .trace import Trace

SUMMARY_COLUMNS = ("intervention", "min_clearance", "max_deviation",
                   "max_yaw")
DIFFICULTY_LABELS = ("easy", "normal", "hard", "challenging")
BREAKDOWN_AXES = ("road_curvature", "front_speed", "initial_condition")


@dataclass(frozen=True)
class EpisodeStep:
    """One recorded environment transition."""

    ego_pose: Tuple[float, float, float]
    ado_pose: Optional[Tuple[float, float, float]]
    q_lat: float
    q_rot: float
    overlap_fraction: float
    clearance: Optional[float]
    reward_terms: Dict[str, float]
    reward: float
    action: float
    frame_index: int
    lead: float


@dataclass
class EpisodeRecord:
    """Full step-by-step log of one episode plus its initial conditions."""

    index: int
    init: Dict[str, object]
    steps: List[EpisodeStep] = field(default_factory=list)
    terminal: str = "none"

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def episode_return(self) -> float:
        return sum(s.reward for s in self.steps)

    def first_intervention(self) -> Optional[int]:
        """Index of the first step with positive footprint overlap."""
        for i, step in enumerate(self.steps):
            if step.overlap_fraction > 0.0:
                return i
        return None

    @property
    def intervened(self) -> bool:
        return self.first_intervention() is not None


@dataclass(frozen=True)
class MetricsSummary:
    intervention: float
    min_clearance: float
    max_deviation: float
    max_yaw: float
    episodes: int

    def __post_init__(self):
        if not 0.0 <= self.intervention <= 1.0:
            raise ValueError("intervention rate outside [0, 1]")
        if self.min_clearance < 0.0:
            raise ValueError("clearance must be non-negative")


@dataclass(frozen=True)
class BreakdownBin:
    axis: str
    label: str
    count: int
    summary: Optional[MetricsSummary]  # None when the bin is empty


# -- rollout -----------------------------------------------------------------


def rollout_episode(env: DrivingEnv, action_fn: Callable[[np.ndarray], float],
                    seed, index: int = 0) -> EpisodeRecord:
    """Roll one episode to termination, recording every step.

    `action_fn` maps the latest observation to a steering command and may
    keep internal state (e.g. a recurrent policy); it is called once per
    step in order.
    """
    obs = env.reset(seed)
    record = EpisodeRecord(index=index, init=env.init_info)
    while True:
        result = env.step(float(action_fn(obs)))
        info = result.info
        record.steps.append(EpisodeStep(
            ego_pose=tuple(info["ego_pose"]),
            ado_pose=None if info["ado_pose"] is None
            else tuple(info["ado_pose"]),
            q_lat=float(info["q_lat"]),
            q_rot=float(info["q_rot"]),
            overlap_fraction=float(info["overlap_fraction"]),
            clearance=None if info["clearance"] is None
            else float(info["clearance"]),
            reward_terms=dict(result.reward_terms),
            reward=float(result.reward),
            action=float(info["command"]),
            frame_index=int(info["frame_index"]),
            lead=float(info["lead"]),
        ))
        obs = result.observation
        if result.done:
            record.terminal = result.terminal
            return record


def policy_action_fn(params: PolicyParams) -> Callable[[np.ndarray], float]:
    """Deterministic (distribution mode) recurrent policy controller."""
    state = RecurrentState.zeros(1, params.config.recurrent_size)

    def act(obs: np.ndarray) -> float:
        nonlocal state
        dist, _, state = forward_step(params, obs[None, ...], state)
        return float(dist.mode()[0])

    return act


def _episode_seed(seed, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(index)])


def run_eval(spec: TaskSpec, trace: Trace, params: PolicyParams,
             n_episodes: int, seed, augment: bool = False,
             workers: int = 1) -> List[EpisodeRecord]:
    """Evaluate a frozen policy: mode actions, 0% collision threshold.

    Episodes are independent (fresh recurrent state, per-episode seed), so
    they may run on parallel workers without changing the records.
    """
    if n_episodes < 0:
        raise ValueError("n_episodes must be non-negative")
    eval_spec = dataclasses.replace(spec, collision_threshold=0.0)

    def episode(index: int) -> EpisodeRecord:
        env = DrivingEnv(eval_spec, trace, obs_mode=params.config.mode,
                         augment=augment)
        return rollout_episode(env, policy_action_fn(params),
                               _episode_seed(seed, index), index)

    if workers <= 1 or n_episodes <= 1:
        return [episode(i) for i in range(n_episodes)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(episode, range(n_episodes)))


# -- metrics -----------------------------------------------------------------


def _clean_steps(record: EpisodeRecord) -> List[EpisodeStep]:
    """Steps before the first intervention (post-contact states excluded)."""
    cut = record.first_intervention()
    return record.steps if cut is None else record.steps[:cut]


def metrics(records: Sequence[EpisodeRecord]) -> MetricsSummary:
    if not records:
        raise ValueError("metrics needs at least one episode")
    intervened = sum(1 for r in records if r.intervened)
    clearances, deviations, yaws = [], [], []
    for record in records:
        steps = _clean_steps(record)
        if not steps:
            continue
        finite = [s.clearance for s in steps if s.clearance is not None]
        if finite:
            clearances.append(min(finite))
        deviations.append(max(abs(s.q_lat) for s in steps))
        yaws.append(max(abs(s.q_rot) for s in steps))
    return MetricsSummary(
        intervention=intervened / len(records),
        min_clearance=float(np.mean(clearances)) if clearances else 0.0,
        max_deviation=float(np.mean(deviations)) if deviations else 0.0,
        max_yaw=float(np.mean(yaws)) if yaws else 0.0,
        episodes=len(records),
    )


def _axis_value(record: EpisodeRecord, axis: str) -> float:
    init = record.init
    if axis == "road_curvature":
        return float(init["road_curvature"])
    if axis == "front_speed":
        return float(init["ado_speed"])
    if axis == "initial_condition":
        # smaller lateral offset = front car closer to lane center = less
        # room to evade within the lane bound, so difficulty rises as the
        # offset shrinks
        return -abs(float(init["lateral"]))
    raise ValueError(f"unknown difficulty axis {axis!r}")


def breakdown(records: Sequence[EpisodeRecord],
              axes: Sequence[str] = BREAKDOWN_AXES
              ) -> Dict[str, List[BreakdownBin]]:
    """Quartile difficulty bins per axis; bin counts always sum to N."""
    if not records:
        raise ValueError("breakdown needs at least one episode")
    out: Dict[str, List[BreakdownBin]] = {}
    for axis in axes:
        values = np.array([_axis_value(r, axis) for r in records])
        q1, q2, q3 = np.quantile(values, [0.25, 0.5, 0.75])
        edges = [-math.inf, q1, q2, q3, math.inf]
        bins = []
        for i, label in enumerate(DIFFICULTY_LABELS):
            mask = (values > edges[i]) & (values <= edges[i + 1])
            members = [r for r, m in zip(records, mask) if m]
            bins.append(BreakdownBin(
                axis=axis, label=label, count=len(members),
                summary=metrics(members) if members else None))
        out[axis] = bins
    return out


def per_position_intervention(records: Sequence[EpisodeRecord],
                              trace: Trace) -> Dict[int, float]:
    """Per trace frame: intervened visits / visits; unvisited frames absent."""
    n = len(trace.frames)
    visits = np.zeros(n, dtype=int)
    bad = np.zeros(n, dtype=int)
    for record in records:
        frames = {s.frame_index for s in record.steps}
        for f in frames:
            if not 0 <= f < n:
                raise ValueError(f"frame index {f} outside trace")
            visits[f] += 1
            if record.intervened:
                bad[f] += 1
    return {int(f): bad[f] / visits[f] for f in np.flatnonzero(visits)}


def clearance_histogram(records: Sequence[EpisodeRecord],
                        bin_width: float = 0.1, max_range: float = 2.0
                        ) -> Tuple[List[Tuple[float, int]],
                                   List[Tuple[float, float]]]:
    """Step-level clearance histogram plus cumulative trial recall.

    Returns (histogram, recall) where each entry is (bin_left, value).
    recall[i] is the fraction of episodes whose minimum clearance falls
    below the bin's right edge, so the curve is monotone non-decreasing
    and ends at the fraction of episodes that ever enter the range.
    """
    if bin_width <= 0 or max_range <= 0:
        raise ValueError("bin_width and max_range must be positive")
    nbins = int(round(max_range / bin_width))
    edges = [i * bin_width for i in range(nbins + 1)]
    counts = [0] * nbins
    minima = []
    for record in records:
        finite = [s.clearance for s in record.steps if s.clearance is not None]
        for c in finite:
            if 0.0 <= c < max_range:
                counts[min(int(c / bin_width), nbins - 1)] += 1
        if finite:
            minima.append(min(finite))
    histogram = [(edges[i], counts[i]) for i in range(nbins)]
    n = len(records)
    recall = []
    for i in range(nbins):
        hit = sum(1 for m in minima if m < edges[i + 1])
        recall.append((edges[i], hit / n if n else 0.0))
    return histogram, recall


# -- serialization -----------------------------------------------------------


def _step_to_json(step: EpisodeStep) -> dict:
    return {
        "kind": "step",
        "ego": list(step.ego_pose),
        "ado": None if step.ado_pose is None else list(step.ado_pose),
        "q_lat": step.q_lat, "q_rot": step.q_rot,
        "overlap": step.overlap_fraction, "clearance": step.clearance,
        "terms": step.reward_terms, "reward": step.reward,
        "action": step.action, "frame": step.frame_index, "lead": step.lead,
    }


def _step_from_json(d: dict) -> EpisodeStep:
    return EpisodeStep(
        ego_pose=tuple(d["ego"]),
        ado_pose=None if d["ado"] is None else tuple(d["ado"]),
        q_lat=d["q_lat"], q_rot=d["q_rot"],
        overlap_fraction=d["overlap"], clearance=d["clearance"],
        reward_terms=dict(d["terms"]), reward=d["reward"],
        action=d["action"], frame_index=d["frame"], lead=d["lead"],
    )


def write_records(path, records: Sequence[EpisodeRecord],
                  run_info: Optional[dict] = None) -> None:
    """JSON lines: a run header, then per episode a header, its steps
    (one per line), and an end line carrying the terminal cause."""
    with open(path, "w", encoding="utf-8") as f:
        header = {"kind": "run", "episodes": len(records)}
        header.update(run_info or {})
        f.write(json.dumps(header) + "\n")
        for record in records:
            f.write(json.dumps({"kind": "episode", "index": record.index,
                                "init": record.init}) + "\n")
            for step in record.steps:
                f.write(json.dumps(_step_to_json(step)) + "\n")
            f.write(json.dumps({"kind": "end", "terminal": record.terminal,
                                "steps": record.length}) + "\n")


def read_records(path) -> Tuple[dict, List[EpisodeRecord]]:
    run_info: dict = {}
    records: List[EpisodeRecord] = []
    current: Optional[EpisodeRecord] = None
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            d = json.loads(line)
            kind = d.pop("kind")
            if kind == "run":
                run_info = d
            elif kind == "episode":
                current = EpisodeRecord(index=d["index"], init=d["init"])
            elif kind == "step":
                if current is None:
                    raise ValueError("step line before episode header")
                current.steps.append(_step_from_json(d))
            elif kind == "end":
                if current is None:
                    raise ValueError("end line before episode header")
                if d["steps"] != current.length:
                    raise ValueError("episode step count mismatch")
                current.terminal = d["terminal"]
                records.append(current)
                current = None
            else:
                raise ValueError(f"unknown record line kind {kind!r}")
    if current is not None:
        raise ValueError("truncated records file: episode missing end line")
    return run_info, records


def write_summary_csv(path, summary: MetricsSummary) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(SUMMARY_COLUMNS) + "\n")
        f.write(",".join(repr(getattr(summary, c))
                         for c in SUMMARY_COLUMNS) + "\n")


def write_breakdown_csv(path, table: Dict[str, List[BreakdownBin]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("axis,label,count," + ",".join(SUMMARY_COLUMNS) + "\n")
        for axis, bins in table.items():
            for b in bins:
                if b.summary is None:
                    row = [axis, b.label, "0", "", "", "", ""]
                else:
                    row = [axis, b.label, str(b.count)] + [
                        repr(getattr(b.summary, c)) for c in SUMMARY_COLUMNS]
                f.write(",".join(row) + "\n")


def write_curve_csv(path, pairs: Sequence[Tuple[float, float]],
                    value_name: str = "value") -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"bin_left,{value_name}\n")
        for left, value in pairs:
            f.write(f"{left!r},{value!r}\n")
