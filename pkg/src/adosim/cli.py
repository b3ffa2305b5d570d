"""Command-line surface: trace generation, training, evaluation, replay.

One JSON run config drives everything; the materialized copy written into
the run directory is sufficient to reproduce a run bit-exactly. Exit
codes: 0 success, 2 bad config or usage, 3 I/O failure, 4 training
divergence, 5 checkpoint mismatch. `ADO_SIM_THREADS` overrides the eval
worker count.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from PIL import Image

from .config import (
    RunConfig,
    load_run_config,
    resolve_trace,
    road_from_dict,
    save_run_config,
)
from .evaluation import (
    breakdown,
    clearance_histogram,
    metrics,
    policy_action_fn,
    rollout_episode,
    run_eval,
    write_breakdown_csv,
    write_curve_csv,
    write_records,
    write_summary_csv,
    SUMMARY_COLUMNS,
)
from .policy import CheckpointError, load_checkpoint
from .ppo import TrainingDiverged, train
from .synthetic import generate_synthetic_trace
from .tasks import DrivingEnv
from .trace import TraceError, load_trace, save_trace

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_CHECKPOINT = 5


def _eval_workers(config: RunConfig) -> int:
    value = os.environ.get("ADO_SIM_THREADS")
    if value is None:
        return config.eval_workers
    try:
        workers = int(value)
    except ValueError:
        raise ValueError(f"ADO_SIM_THREADS must be an integer, got {value!r}")
    if workers < 1:
        raise ValueError("ADO_SIM_THREADS must be positive")
    return workers


def _load_policy(config: RunConfig, ckpt_path):
    params, _, _, _ = load_checkpoint(ckpt_path)
    if params.config != config.network:
        raise CheckpointError(
            "checkpoint network config does not match the run config")
    return params


# -- subcommands ---------------------------------------------------------------


def cmd_gen_trace(args) -> int:
    if args.road is None:
        road = road_from_dict({})
    else:
        with open(args.road, "r", encoding="utf-8") as f:
            road = road_from_dict(json.load(f), where="road config")
    trace = generate_synthetic_trace(road, seed=args.seed)
    save_trace(trace, args.out)
    length = float(trace.arclength[-1])
    print(f"wrote {len(trace.frames)} frames, {length:.1f} m arclength, "
          f"to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = load_run_config(args.config)
    os.makedirs(config.out_dir, exist_ok=True)
    save_run_config(config, os.path.join(config.out_dir, "config.json"))
    trace = resolve_trace(config)
    print(f"trace ready: {len(trace.frames)} frames, "
          f"{float(trace.arclength[-1]):.1f} m")
    result = train(config.task, trace, config.network, config.ppo,
                   config.out_dir, config.train_seed,
                   resume_from=args.resume, augment=config.augment)
    print(f"trained {result.updates_run} updates; "
          f"checkpoint {result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    config = load_run_config(args.config)
    episodes = config.eval_episodes if args.episodes is None else args.episodes
    seed = config.eval_seed if args.seed is None else args.seed
    workers = _eval_workers(config)
    params = _load_policy(config, args.ckpt)
    os.makedirs(config.out_dir, exist_ok=True)
    save_run_config(config, os.path.join(config.out_dir, "config.json"))
    trace = resolve_trace(config)
    records = run_eval(config.task, trace, params, episodes, seed,
                       workers=workers)

    out = config.out_dir
    write_records(os.path.join(out, "records.jsonl"), records,
                  {"task": config.task.task, "seed": seed,
                   "checkpoint": str(args.ckpt)})
    hist, recall = clearance_histogram(records)
    write_curve_csv(os.path.join(out, "clearance_hist.csv"), hist,
                    value_name="count")
    write_curve_csv(os.path.join(out, "clearance_recall.csv"), recall,
                    value_name="recall")
    if records:
        summary = metrics(records)
        write_summary_csv(os.path.join(out, "summary.csv"), summary)
        write_breakdown_csv(os.path.join(out, "breakdown.csv"),
                            breakdown(records))
        print(f"evaluated {episodes} episodes: "
              + ", ".join(f"{c}={getattr(summary, c):.4g}"
                          for c in SUMMARY_COLUMNS))
    else:
        with open(os.path.join(out, "summary.csv"), "w") as f:
            f.write(",".join(SUMMARY_COLUMNS) + "\n")
        with open(os.path.join(out, "breakdown.csv"), "w") as f:
            f.write("axis,label,count," + ",".join(SUMMARY_COLUMNS) + "\n")
        print("evaluated 0 episodes")
    return 0


def cmd_replay(args) -> int:
    config = load_run_config(args.config)
    params = _load_policy(config, args.ckpt)
    trace = resolve_trace(config)
    os.makedirs(args.out, exist_ok=True)
    env = DrivingEnv(config.task, trace, obs_mode=config.network.mode)
    act = policy_action_fn(params)

    obs = env.reset(args.seed)
    actions = []
    frames = []
    terminal = "none"
    step = 0
    while True:
        # frame N shows the state the step-N action was chosen in
        view = env.render_view(include_ado=not args.no_ado)
        Image.fromarray(view.image).save(
            os.path.join(args.out, f"{step:04d}.png"))
        result = env.step(act(obs))
        actions.append(float(result.info["command"]))
        frames.append(int(result.info["frame_index"]))
        obs = result.observation
        step += 1
        if result.done:
            terminal = result.terminal
            break
    with open(os.path.join(args.out, "metadata.json"), "w") as f:
        json.dump({"seed": args.seed, "steps": step, "terminal": terminal,
                   "no_ado": bool(args.no_ado), "actions": actions,
                   "frame_indices": frames, "task": config.task.task}, f,
                  indent=2)
    print(f"replayed {step} steps ({terminal}) into {args.out}")
    return 0


def cmd_inspect_trace(args) -> int:
    trace = load_trace(args.path)
    rig = trace.rig
    length = float(trace.arclength[-1])
    duration = trace.frames[-1].timestamp - trace.frames[0].timestamp
    print(f"frames: {len(trace.frames)}")
    print(f"arclength: {length:.2f} m")
    print(f"duration: {duration:.2f} s")
    print(f"image: {rig.width}x{rig.height}")
    print(f"intrinsics: fx={rig.fx} fy={rig.fy} cx={rig.cx} cy={rig.cy}")
    print(f"camera height: {float(rig.T_cam_to_body[2, 3]):.2f} m")
    return 0


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adosim",
        description="data-driven driving simulator: traces, training, eval")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-trace", help="render a synthetic trace")
    p.add_argument("--road", help="road config JSON (default: built-in road)")
    p.add_argument("--out", required=True, help="output trace directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("train", help="run PPO training from a run config")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a frozen policy checkpoint")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--ckpt", required=True, help="policy checkpoint")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("replay", help="dump one episode as PNG frames")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--ckpt", required=True, help="policy checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-ado", action="store_true",
                   help="render without the in-painted front car")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("inspect-trace", help="print a trace summary")
    p.add_argument("path", help="trace directory")
    p.set_defaults(func=cmd_inspect_trace)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, TraceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
