"""Tests for the offline evaluation harness."""

import json
import math

import numpy as np
import pytest

from adosim.evaluation import (
    BREAKDOWN_AXES,
    DIFFICULTY_LABELS,
    SUMMARY_COLUMNS,
    EpisodeRecord,
    EpisodeStep,
    MetricsSummary,
    breakdown,
    clearance_histogram,
    metrics,
    per_position_intervention,
    policy_action_fn,
    read_records,
    rollout_episode,
    run_eval,
    write_breakdown_csv,
    write_curve_csv,
    write_records,
    write_summary_csv,
)
from adosim.policy import NetworkConfig, PolicyParams
from adosim.tasks import DrivingEnv, TaskSpec

from test_tasks import arc_trace, line_trace


def make_step(overlap=0.0, q_lat=0.1, q_rot=0.02, clearance=1.0,
              frame=0, reward=1.0, action=0.0, lead=0.0):
    return EpisodeStep(
        ego_pose=(float(frame), 0.0, 0.0),
        ado_pose=(float(frame) + 8.0, 1.0, 0.0),
        q_lat=q_lat, q_rot=q_rot, overlap_fraction=overlap,
        clearance=clearance, reward_terms={"lane": reward},
        reward=reward, action=action, frame_index=frame, lead=lead)


def make_record(index=0, overlaps=(0.0, 0.0, 0.0), q_lats=None, q_rots=None,
                clearances=None, frames=None, init=None):
    n = len(overlaps)
    q_lats = q_lats or [0.1] * n
    q_rots = q_rots or [0.02] * n
    clearances = clearances if clearances is not None else [1.0] * n
    frames = frames or list(range(n))
    steps = [make_step(overlap=overlaps[i], q_lat=q_lats[i], q_rot=q_rots[i],
                       clearance=clearances[i], frame=frames[i])
             for i in range(n)]
    terminal = "collision" if any(o > 0 for o in overlaps) else "timeout"
    base_init = {"gap": 10.0, "lateral": 1.5, "ego_speed": 5.0,
                 "ado_speed": 4.0, "road_curvature": 0.01}
    base_init.update(init or {})
    return EpisodeRecord(index=index, init=base_init, steps=steps,
                         terminal=terminal)


# -- rollouts ----------------------------------------------------------------


def test_run_eval_empty():
    params = PolicyParams.init(NetworkConfig.privileged(), seed=0)
    assert run_eval(TaskSpec("lane_follow"), line_trace(60.0), params,
                    0, seed=0) == []


def test_run_eval_deterministic_and_worker_independent():
    spec = TaskSpec("overtake", max_steps=50)
    trace = line_trace(90.0)
    params = PolicyParams.init(NetworkConfig.privileged(), seed=3)
    a = run_eval(spec, trace, params, 4, seed=11)
    b = run_eval(spec, trace, params, 4, seed=11)
    c = run_eval(spec, trace, params, 4, seed=11, workers=3)
    for other in (b, c):
        assert [r.terminal for r in other] == [r.terminal for r in a]
        assert [r.steps for r in other] == [r.steps for r in a]
        assert [r.init for r in other] == [r.init for r in a]


def test_straight_policy_leaves_lane_on_curve():
    spec = TaskSpec("lane_follow", max_steps=250)
    trace = arc_trace(radius=30.0, length=140.0)
    params = PolicyParams.zeros(NetworkConfig.privileged())  # mode action 0
    records = run_eval(spec, trace, params, 3, seed=5)
    assert any(r.terminal == "off_lane" for r in records)


def test_eval_collision_threshold_is_zero():
    # driving straight at a laterally-shifted slower ado must eventually
    # touch it for some seed; at eval the first contact ends the episode
    spec = TaskSpec("overtake", max_steps=200)
    trace = line_trace(160.0)
    params = PolicyParams.zeros(NetworkConfig.privileged())
    records = run_eval(spec, trace, params, 10, seed=2)
    hits = [r for r in records if r.terminal == "collision"]
    assert hits, "expected at least one contact across 10 episodes"
    for r in hits:
        assert r.steps[-1].overlap_fraction > 0.0
        assert all(s.overlap_fraction == 0.0 for s in r.steps[:-1])
        assert r.intervened and r.first_intervention() == r.length - 1


def test_rollout_record_matches_env_stream():
    spec = TaskSpec("car_follow", max_steps=40)
    trace = line_trace(80.0)
    env = DrivingEnv(spec, trace)
    actions = [0.05 * math.sin(0.3 * i) for i in range(40)]
    it = iter(actions)
    record = rollout_episode(env, lambda obs: next(it), seed=21)

    twin = DrivingEnv(spec, trace)
    twin.reset(seed=21)
    for i, step in enumerate(record.steps):
        result = twin.step(actions[i])
        info = result.info
        assert step.ego_pose == tuple(info["ego_pose"])
        assert step.ado_pose == tuple(info["ado_pose"])
        assert step.q_lat == info["q_lat"]
        assert step.overlap_fraction == info["overlap_fraction"]
        assert step.reward == result.reward
        assert step.frame_index == info["frame_index"]
        if result.done:
            assert record.terminal == result.terminal
            assert i == record.length - 1


def test_policy_action_fn_is_recurrent_mode():
    config = NetworkConfig.privileged()
    params = PolicyParams.init(config, seed=7)
    act = policy_action_fn(params)
    obs = np.linspace(-0.5, 0.5, config.obs_dim)
    first = act(obs)
    second = act(obs)  # recurrent state advanced, output may differ
    act2 = policy_action_fn(params)
    assert act2(obs) == first
    assert abs(first) <= config.delta_max and abs(second) <= config.delta_max


# -- metrics -----------------------------------------------------------------


def test_metrics_hand_computed():
    a = make_record(overlaps=(0.0, 0.0, 0.0), q_lats=[0.1, -0.6, 0.3],
                    q_rots=[0.01, -0.2, 0.05], clearances=[2.0, 0.8, 1.5])
    b = make_record(index=1, overlaps=(0.0, 0.0), q_lats=[0.4, 0.2],
                    q_rots=[0.1, 0.02], clearances=[1.2, 3.0])
    m = metrics([a, b])
    assert m.intervention == 0.0
    assert m.min_clearance == pytest.approx((0.8 + 1.2) / 2, abs=1e-12)
    assert m.max_deviation == pytest.approx((0.6 + 0.4) / 2, abs=1e-12)
    assert m.max_yaw == pytest.approx((0.2 + 0.1) / 2, abs=1e-12)
    assert m.episodes == 2


def test_metrics_intervention_rate_counts_episodes():
    clean = make_record(overlaps=(0.0, 0.0, 0.0))
    hit = make_record(index=1, overlaps=(0.0, 0.0, 0.4))
    assert metrics([clean, hit]).intervention == 0.5
    assert metrics([hit, hit]).intervention == 1.0


def test_metrics_exclude_steps_from_intervention_on():
    rec = make_record(overlaps=(0.0, 0.0, 0.3, 0.0, 0.0),
                      q_lats=[0.1, 0.2, 5.0, 9.0, 9.0],
                      q_rots=[0.01, 0.02, 3.0, 3.0, 3.0],
                      clearances=[1.0, 0.5, 0.0, 0.0, 0.0])
    m = metrics([rec])
    # only the two pre-contact steps count toward the extrema
    assert m.max_deviation == 0.2
    assert m.max_yaw == 0.02
    assert m.min_clearance == 0.5
    assert m.intervention == 1.0


def test_metrics_contact_at_first_step():
    rec = make_record(overlaps=(0.5,))
    m = metrics([rec])
    assert m.intervention == 1.0
    # no clean steps: extrema fall back to zero, never NaN
    assert m.min_clearance == 0.0 and m.max_deviation == 0.0
    assert m.max_yaw == 0.0


def test_metrics_permutation_invariant():
    rng = np.random.default_rng(0)
    records = [make_record(index=i,
                           overlaps=tuple(rng.uniform(0, 0.2)
                                          * (rng.uniform() < 0.3)
                                          for _ in range(5)),
                           q_lats=list(rng.uniform(-1, 1, 5)),
                           q_rots=list(rng.uniform(-0.4, 0.4, 5)),
                           clearances=list(rng.uniform(0.1, 3, 5)))
               for i in range(12)]
    forward = metrics(records)
    backward = metrics(records[::-1])
    assert forward == backward


def test_metrics_empty_raises():
    with pytest.raises(ValueError):
        metrics([])


def test_metrics_validation():
    with pytest.raises(ValueError):
        MetricsSummary(1.5, 0.0, 0.0, 0.0, 1)
    with pytest.raises(ValueError):
        MetricsSummary(0.5, -0.1, 0.0, 0.0, 1)


def test_metrics_ignore_missing_clearance():
    # lane-follow style records carry no ado, hence no clearance
    rec = make_record(overlaps=(0.0, 0.0), clearances=[None, None])
    m = metrics([rec])
    assert m.min_clearance == 0.0
    assert m.max_deviation > 0.0


# -- difficulty breakdown ----------------------------------------------------


def _manual_quantile(sorted_values, p):
    # linear interpolation between order statistics, h = (n-1)p
    h = (len(sorted_values) - 1) * p
    lo = math.floor(h)
    hi = math.ceil(h)
    return sorted_values[lo] + (h - lo) * (sorted_values[hi]
                                           - sorted_values[lo])


def test_breakdown_degenerate_single_bin():
    records = [make_record(index=i) for i in range(8)]
    table = breakdown(records)
    for axis in BREAKDOWN_AXES:
        bins = table[axis]
        assert [b.label for b in bins] == list(DIFFICULTY_LABELS)
        assert [b.count for b in bins] == [8, 0, 0, 0]
        assert bins[0].summary is not None
        assert all(b.summary is None for b in bins[1:])


def test_breakdown_partitions_and_matches_quartile_oracle():
    rng = np.random.default_rng(4)
    records = []
    for i in range(37):
        records.append(make_record(
            index=i,
            init={"lateral": float(rng.uniform(-2, 2)),
                  "ado_speed": float(rng.uniform(3, 5)),
                  "road_curvature": float(rng.uniform(0, 0.05))}))
    table = breakdown(records)
    values_by_axis = {
        "road_curvature": [r.init["road_curvature"] for r in records],
        "front_speed": [r.init["ado_speed"] for r in records],
        "initial_condition": [-abs(r.init["lateral"]) for r in records],
    }
    for axis, values in values_by_axis.items():
        bins = table[axis]
        assert sum(b.count for b in bins) == len(records)
        ordered = sorted(values)
        edges = [-math.inf] + [_manual_quantile(ordered, p)
                               for p in (0.25, 0.5, 0.75)] + [math.inf]
        for i, b in enumerate(bins):
            expect = sum(1 for v in values if edges[i] < v <= edges[i + 1])
            assert b.count == expect
            if b.summary is not None:
                assert b.summary.episodes == b.count


def test_breakdown_initial_condition_orders_by_evasion_room():
    # overlap constructed on exactly the small-offset episodes: the front
    # car sits nearest the lane center there, so those land in the hard and
    # challenging bins and drive their intervention rates strictly higher
    rng = np.random.default_rng(11)
    records = []
    for i in range(40):
        lateral = float(rng.uniform(1.0, 2.0)) * (1 if i % 2 else -1)
        hit = abs(lateral) < 1.5
        records.append(make_record(
            index=i,
            overlaps=(0.0, 0.4 if hit else 0.0),
            init={"lateral": lateral, "ado_speed": 4.0,
                  "road_curvature": 0.01}))
    bins = {b.label: b for b in breakdown(records)["initial_condition"]}
    for tough in ("hard", "challenging"):
        for mild in ("easy", "normal"):
            assert (bins[tough].summary.intervention
                    > bins[mild].summary.intervention)


def test_breakdown_unknown_axis():
    with pytest.raises(ValueError, match="weather"):
        breakdown([make_record()], axes=("weather",))


def test_breakdown_empty_input():
    with pytest.raises(ValueError):
        breakdown([])


# -- per-position intervention ----------------------------------------------


def test_per_position_clean_episode_all_zero():
    trace = line_trace(30.0)
    rec = make_record(overlaps=(0.0,) * 4, frames=[3, 4, 4, 5])
    rates = per_position_intervention([rec], trace)
    assert rates == {3: 0.0, 4: 0.0, 5: 0.0}


def test_per_position_shared_frames_half():
    trace = line_trace(30.0)
    clean = make_record(overlaps=(0.0, 0.0), frames=[2, 3])
    hit = make_record(index=1, overlaps=(0.0, 0.7), frames=[3, 4])
    rates = per_position_intervention([clean, hit], trace)
    assert rates == {2: 0.0, 3: 0.5, 4: 1.0}


def test_per_position_matches_brute_force():
    trace = line_trace(40.0)
    rng = np.random.default_rng(9)
    records = []
    for i in range(20):
        n = int(rng.integers(1, 12))
        frames = sorted(int(rng.integers(0, 60)) for _ in range(n))
        overlaps = tuple(0.2 if rng.uniform() < 0.15 else 0.0
                         for _ in range(n))
        records.append(make_record(index=i, overlaps=overlaps,
                                   frames=frames))
    rates = per_position_intervention(records, trace)
    visits, bad = {}, {}
    for rec in records:
        hit = any(s.overlap_fraction > 0 for s in rec.steps)
        for f in {s.frame_index for s in rec.steps}:
            visits[f] = visits.get(f, 0) + 1
            bad[f] = bad.get(f, 0) + (1 if hit else 0)
    assert set(rates) == set(visits)
    for f in visits:
        assert rates[f] == pytest.approx(bad[f] / visits[f], abs=1e-15)


def test_per_position_rejects_out_of_range_frames():
    trace = line_trace(4.0)  # 9 frames
    rec = make_record(overlaps=(0.0,), frames=[50])
    with pytest.raises(ValueError):
        per_position_intervention([rec], trace)


# -- clearance histogram and recall -------------------------------------------


def test_histogram_point_mass():
    rec = make_record(overlaps=(0.0,) * 3, clearances=[1.0, 1.0, 1.0])
    hist, recall = clearance_histogram([rec])
    occupied = [(left, c) for left, c in hist if c > 0]
    assert occupied == [(1.0, 3)]
    # recall jumps from 0 to 1 exactly at the 1.0 m bin
    for left, value in recall:
        assert value == (1.0 if left >= 1.0 else 0.0)


def test_histogram_empty_records():
    hist, recall = clearance_histogram([])
    assert all(c == 0 for _, c in hist)
    assert all(v == 0.0 for _, v in recall)
    assert len(hist) == len(recall) == 20


def test_histogram_counts_and_recall_monotone():
    rng = np.random.default_rng(3)
    records = []
    for i in range(15):
        n = int(rng.integers(2, 30))
        clearances = list(rng.uniform(0.0, 3.0, n))
        records.append(make_record(index=i, overlaps=(0.0,) * n,
                                   clearances=clearances))
    hist, recall = clearance_histogram(records, bin_width=0.1, max_range=2.0)
    total = sum(c for _, c in hist)
    expect = sum(1 for r in records for s in r.steps if s.clearance < 2.0)
    assert total == expect
    values = [v for _, v in recall]
    assert all(b >= a for a, b in zip(values, values[1:]))
    entered = sum(1 for r in records
                  if min(s.clearance for s in r.steps) < 2.0)
    assert values[-1] == pytest.approx(entered / len(records), abs=1e-15)


def test_histogram_ignores_missing_clearance():
    rec = make_record(overlaps=(0.0, 0.0), clearances=[None, 0.5])
    hist, recall = clearance_histogram([rec])
    assert sum(c for _, c in hist) == 1
    assert recall[-1][1] == 1.0


def test_histogram_validation():
    with pytest.raises(ValueError):
        clearance_histogram([], bin_width=0.0)


# -- serialization -----------------------------------------------------------


def test_records_roundtrip_exact(tmp_path):
    spec = TaskSpec("overtake", max_steps=30)
    trace = line_trace(70.0)
    params = PolicyParams.init(NetworkConfig.privileged(), seed=1)
    records = run_eval(spec, trace, params, 3, seed=4)
    path = tmp_path / "records.jsonl"
    write_records(path, records, {"task": "overtake", "seed": 4})
    info, back = read_records(path)
    assert info["task"] == "overtake" and info["episodes"] == 3
    assert [r.terminal for r in back] == [r.terminal for r in records]
    assert [r.steps for r in back] == [r.steps for r in records]
    assert metrics(back) == metrics(records)


def test_records_file_shape(tmp_path):
    rec = make_record(overlaps=(0.0, 0.0))
    path = tmp_path / "r.jsonl"
    write_records(path, [rec])
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    kinds = [d["kind"] for d in lines]
    assert kinds == ["run", "episode", "step", "step", "end"]
    assert lines[-1]["terminal"] == "timeout"


def test_read_records_rejects_malformed(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"kind": "step", "ego": [0,0,0]}\n')
    with pytest.raises(ValueError):
        read_records(path)
    rec = make_record(overlaps=(0.0,))
    write_records(path, [rec])
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")  # drop the end line
    with pytest.raises(ValueError):
        read_records(path)


def test_summary_csv_columns(tmp_path):
    path = tmp_path / "summary.csv"
    write_summary_csv(path, MetricsSummary(0.25, 0.5, 0.75, 0.1, 4))
    lines = path.read_text().splitlines()
    assert lines[0] == "intervention,min_clearance,max_deviation,max_yaw"
    values = [float(x) for x in lines[1].split(",")]
    assert values == [0.25, 0.5, 0.75, 0.1]
    assert SUMMARY_COLUMNS == ("intervention", "min_clearance",
                               "max_deviation", "max_yaw")


def test_breakdown_csv_shape(tmp_path):
    records = [make_record(index=i,
                           init={"lateral": 1.0 + 0.1 * i,
                                 "ado_speed": 3.0 + 0.2 * i,
                                 "road_curvature": 0.01 * i})
               for i in range(8)]
    path = tmp_path / "breakdown.csv"
    write_breakdown_csv(path, breakdown(records))
    lines = path.read_text().splitlines()
    assert lines[0].startswith("axis,label,count,intervention")
    assert len(lines) == 1 + len(BREAKDOWN_AXES) * len(DIFFICULTY_LABELS)


def test_curve_csv_roundtrip(tmp_path):
    pairs = [(0.0, 3.0), (0.1, 5.0)]
    path = tmp_path / "hist.csv"
    write_curve_csv(path, pairs, value_name="count")
    lines = path.read_text().splitlines()
    assert lines[0] == "bin_left,count"
    parsed = [tuple(float(x) for x in line.split(",")) for line in lines[1:]]
    assert parsed == pairs
