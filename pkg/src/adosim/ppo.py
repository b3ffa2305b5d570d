"""On-policy training: parallel rollouts, GAE, clipped-surrogate updates.

Rollouts fill a fixed-capacity buffer from N environments; advantages come
from GAE over each environment's stream; optimization runs several epochs
of shuffled minibatches of fixed-length recurrent segments. All randomness
derives from (seed, update index), so interrupted runs resume bit-exactly:
every collection phase resets its environments with freshly derived seeds.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .policy import (
    BPTT_WINDOW,
    AdamState,
    CheckpointError,
    NetworkConfig,
    PolicyParams,
    RecurrentState,
    adam_update,
    backward_sequence,
    forward_sequence,
    forward_step,
    save_checkpoint,
    load_checkpoint,
)
from .tasks import DrivingEnv, TaskSpec
from .trace import Trace

LOG_COLUMNS = ("update", "steps", "mean_return", "mean_ep_len", "surrogate",
               "value_loss", "entropy", "clip_frac", "kl")
EPISODE_COLUMNS = ("update", "env", "episode", "return", "length", "terminal")


class TrainingDiverged(RuntimeError):
    """Raised when a loss or parameter turns non-finite during training."""

    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class PpoConfig:
    clip_eps: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    epochs: int = 10
    minibatch_size: int = 512
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    learning_rate: float = 3e-4
    num_envs: int = 8
    buffer_capacity: int = 32000
    total_steps: int = 200_000
    bptt_window: int = BPTT_WINDOW
    max_grad_norm: float = 0.5
    kl_stop: float = 0.05
    checkpoint_interval: int = 1

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if not 0.0 < self.gamma <= 1.0 or not 0.0 < self.lam <= 1.0:
            raise ValueError("gamma and lam must lie in (0, 1]")
        if min(self.epochs, self.num_envs, self.bptt_window,
               self.checkpoint_interval) <= 0:
            raise ValueError("counts must be positive")
        if self.buffer_capacity % self.num_envs != 0:
            raise ValueError("buffer_capacity must divide evenly across envs")
        if self.minibatch_size % self.bptt_window != 0:
            raise ValueError("minibatch_size must be a multiple of bptt_window")
        if self.total_steps < self.buffer_capacity:
            raise ValueError("total_steps must cover at least one buffer")

    @property
    def steps_per_env(self) -> int:
        return self.buffer_capacity // self.num_envs

    @property
    def num_updates(self) -> int:
        return self.total_steps // self.buffer_capacity


@dataclass
class EpisodeStat:
    env_index: int
    episode_index: int
    return_: float
    length: int
    terminal: str


@dataclass
class RolloutBuffer:
    """Per-environment transition streams plus post-GAE targets."""

    obs: np.ndarray          # (N, T, ...)
    actions: np.ndarray      # (N, T)
    logp_old: np.ndarray     # (N, T)
    values_old: np.ndarray   # (N, T)
    rewards: np.ndarray      # (N, T)
    terminals: np.ndarray    # (N, T) bool
    h_starts: np.ndarray     # (N, T, H) recurrent state at step start
    c_starts: np.ndarray
    bootstrap: np.ndarray    # (N,) value of the observation after step T-1
    episodes: List[EpisodeStat] = field(default_factory=list)
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    @property
    def capacity(self) -> int:
        return self.obs.shape[0] * self.obs.shape[1]


@dataclass
class MiniBatch:
    """Padded recurrent segments: (S, W, ...) with a validity mask."""

    obs: np.ndarray
    actions: np.ndarray
    logp_old: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    mask: np.ndarray
    h0: np.ndarray
    c0: np.ndarray


def _episode_seed(seed: int, update: int, env: int, episode: int):
    return np.random.SeedSequence([seed, update, env, 2, episode])


def collect_rollouts(envs: Sequence[DrivingEnv], params: PolicyParams,
                     config: PpoConfig, seed: int,
                     update_index: int) -> RolloutBuffer:
    """Fill exactly buffer_capacity transitions from freshly reset envs.

    Each env stream draws from its own seed lineage, so the buffer content
    per env is independent of any interleaving.
    """
    n, t = len(envs), config.steps_per_env
    if n != config.num_envs:
        raise ValueError("env count does not match config")
    hsize = params.config.recurrent_size
    delta_max = params.config.delta_max

    action_rngs = [np.random.default_rng(
        np.random.SeedSequence([seed, update_index, i, 1])) for i in range(n)]
    episode_counts = [0] * n
    obs_list = []
    for i, env in enumerate(envs):
        try:
            obs_list.append(env.reset(_episode_seed(seed, update_index, i, 0)))
        except Exception as exc:
            raise RuntimeError(f"env {i} failed on reset: {exc}") from exc
    obs_now = np.stack(obs_list)
    state = RecurrentState.zeros(n, hsize)

    buf = RolloutBuffer(
        obs=np.zeros((n, t) + obs_now.shape[1:]),
        actions=np.zeros((n, t)), logp_old=np.zeros((n, t)),
        values_old=np.zeros((n, t)), rewards=np.zeros((n, t)),
        terminals=np.zeros((n, t), dtype=bool),
        h_starts=np.zeros((n, t, hsize)), c_starts=np.zeros((n, t, hsize)),
        bootstrap=np.zeros(n))
    ep_return = np.zeros(n)
    ep_length = np.zeros(n, dtype=int)

    for step in range(t):
        buf.obs[:, step] = obs_now
        buf.h_starts[:, step] = state.h
        buf.c_starts[:, step] = state.c
        dist, values, state = forward_step(params, obs_now, state)
        sigma = math.exp(dist.log_std)
        actions = np.empty(n)
        for i in range(n):
            u = dist.mean[i] + sigma * action_rngs[i].standard_normal()
            actions[i] = math.tanh(u) * delta_max
        logp = dist.log_prob(actions)
        buf.actions[:, step] = actions
        buf.logp_old[:, step] = logp
        buf.values_old[:, step] = values

        for i, env in enumerate(envs):
            try:
                result = env.step(actions[i])
            except Exception as exc:
                raise RuntimeError(f"env {i} failed on step: {exc}") from exc
            buf.rewards[i, step] = result.reward
            buf.terminals[i, step] = result.done
            ep_return[i] += result.reward
            ep_length[i] += 1
            if result.done:
                buf.episodes.append(EpisodeStat(
                    i, episode_counts[i], float(ep_return[i]),
                    int(ep_length[i]), result.terminal))
                ep_return[i] = 0.0
                ep_length[i] = 0
                episode_counts[i] += 1
                obs_now[i] = envs[i].reset(_episode_seed(
                    seed, update_index, i, episode_counts[i]))
                state.h[i] = 0.0
                state.c[i] = 0.0
            else:
                obs_now[i] = result.observation

    _, bootstrap, _ = forward_step(params, obs_now, state)
    buf.bootstrap = bootstrap
    return buf


def compute_gae(rewards: np.ndarray, values: np.ndarray,
                terminals: np.ndarray, bootstrap: np.ndarray, gamma: float,
                lam: float) -> Tuple[np.ndarray, np.ndarray]:
    """delta_t = r_t + g*V_{t+1}*(1-term_t) - V_t;
    A_t = delta_t + g*l*(1-term_t)*A_{t+1}; returns = A + V."""
    n, t = rewards.shape
    adv = np.zeros((n, t))
    next_values = bootstrap.astype(float)
    next_adv = np.zeros(n)
    for step in reversed(range(t)):
        live = 1.0 - terminals[:, step].astype(float)
        delta = rewards[:, step] + gamma * next_values * live \
            - values[:, step]
        next_adv = delta + gamma * lam * live * next_adv
        adv[:, step] = next_adv
        next_values = values[:, step]
    return adv, adv + values


def normalize_advantages(advantages: np.ndarray,
                         mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Zero-mean unit-variance over the (masked) samples."""
    if mask is None:
        sel = advantages
    else:
        sel = advantages[mask.astype(bool)]
    mean = sel.mean()
    std = sel.std()
    return (advantages - mean) / (std + 1e-8)


def build_segments(buffer: RolloutBuffer, window: int) -> List[MiniBatch]:
    """Cut env streams into <= window chunks that never cross terminals.

    Returns one single-segment MiniBatch per chunk; training stacks them.
    """
    if buffer.advantages is None:
        raise ValueError("run compute_gae before segmenting")
    n, t = buffer.rewards.shape
    segments = []
    for i in range(n):
        boundaries = list(np.flatnonzero(buffer.terminals[i]) + 1)
        if not boundaries or boundaries[-1] != t:
            boundaries.append(t)
        starts = [0] + boundaries[:-1]
        for ep_start, ep_end in zip(starts, boundaries):
            for s in range(ep_start, ep_end, window):
                e = min(s + window, ep_end)
                length = e - s
                pad = window - length
                def padded(arr):
                    chunk = arr[i, s:e]
                    if pad == 0:
                        return chunk[None]
                    shape = (pad,) + chunk.shape[1:]
                    return np.concatenate([chunk, np.zeros(shape)])[None]
                mask = np.zeros((1, window))
                mask[0, :length] = 1.0
                segments.append(MiniBatch(
                    obs=padded(buffer.obs), actions=padded(buffer.actions),
                    logp_old=padded(buffer.logp_old),
                    advantages=padded(buffer.advantages),
                    returns=padded(buffer.returns), mask=mask,
                    h0=buffer.h_starts[i, s][None].copy(),
                    c0=buffer.c_starts[i, s][None].copy()))
    return segments


def stack_segments(segments: Sequence[MiniBatch]) -> MiniBatch:
    return MiniBatch(*[np.concatenate([getattr(s, f.name) for s in segments])
                       for f in dataclasses.fields(MiniBatch)])


def ppo_loss(params: PolicyParams, batch: MiniBatch, config: PpoConfig):
    """Clipped-surrogate loss with analytic gradients.

    Expects batch.advantages already normalized. Returns
    (total, surrogate, value_loss, entropy, clip_frac, kl, grads).
    """
    out = forward_sequence(params, batch.obs, batch.h0, batch.c0)
    mask = batch.mask
    n_real = mask.sum()
    sigma = math.exp(out.log_std)
    delta_max = params.config.delta_max

    ratio_act = np.clip(batch.actions / delta_max, -1.0 + 1e-6, 1.0 - 1e-6)
    u = np.arctanh(ratio_act)
    z = (u - out.means) / sigma
    lp_new = (-0.5 * z ** 2 - out.log_std - 0.5 * math.log(2.0 * math.pi)
              - np.log(delta_max * (1.0 - ratio_act ** 2)))
    diff = (lp_new - batch.logp_old) * mask
    ratio = np.exp(diff) * mask  # masked entries contribute nothing below
    if not np.all(np.isfinite(ratio)):
        raise TrainingDiverged("non-finite probability ratio")

    adv = batch.advantages
    s1 = ratio * adv
    s2 = np.clip(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps) * adv
    per_sample = np.minimum(s1, s2)
    surrogate = float((per_sample * mask).sum() / n_real)
    value_err = (out.values - batch.returns) * mask
    value_loss = float((value_err ** 2).sum() / n_real)
    entropy = 0.5 * math.log(2.0 * math.pi * math.e) + out.log_std
    total = -surrogate + config.value_coef * value_loss \
        - config.entropy_coef * entropy
    if not math.isfinite(total):
        raise TrainingDiverged("non-finite loss")

    clip_frac = float(((np.abs(ratio - 1.0) > config.clip_eps) * mask).sum()
                      / n_real)
    kl = float((((ratio - 1.0) - diff) * mask).sum() / n_real)

    # d(total)/d(lp_new): only where the unclipped branch is active
    dlp = -(s1 <= s2).astype(float) * ratio * adv * mask / n_real
    d_means = dlp * (z / sigma)
    d_values = config.value_coef * 2.0 * value_err / n_real
    d_log_std = float((dlp * (z ** 2 - 1.0)).sum()) - config.entropy_coef
    grads = backward_sequence(params, out, d_means, d_values, d_log_std)
    return total, surrogate, value_loss, entropy, clip_frac, kl, grads


def clip_grad_norm(grads: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grads))
    if norm > max_norm and norm > 0.0:
        return grads * (max_norm / norm)
    return grads


def update_phase(params: PolicyParams, adam: AdamState,
                 buffer: RolloutBuffer, config: PpoConfig, seed: int,
                 update_index: int) -> Tuple[PolicyParams, AdamState, Dict]:
    """Epochs of shuffled minibatch updates over one buffer."""
    buffer.advantages, buffer.returns = compute_gae(
        buffer.rewards, buffer.values_old, buffer.terminals, buffer.bootstrap,
        config.gamma, config.lam)
    buffer.advantages = normalize_advantages(buffer.advantages)
    segments = build_segments(buffer, config.bptt_window)
    per_batch = max(config.minibatch_size // config.bptt_window, 1)
    shuffle_rng = np.random.default_rng(
        np.random.SeedSequence([seed, update_index, 3]))

    stats = {k: [] for k in ("surrogate", "value_loss", "entropy",
                             "clip_frac", "kl")}
    stop = False
    for _ in range(config.epochs):
        order = shuffle_rng.permutation(len(segments))
        for start in range(0, len(segments) - per_batch + 1, per_batch):
            chosen = [segments[j] for j in order[start:start + per_batch]]
            batch = stack_segments(chosen)
            batch.advantages = normalize_advantages(batch.advantages,
                                                    batch.mask) * batch.mask
            total, surr, vloss, ent, cfrac, kl, grads = ppo_loss(
                params, batch, config)
            grads = clip_grad_norm(grads, config.max_grad_norm)
            new_vec, adam = adam_update(params.vector, grads, adam,
                                        config.learning_rate)
            if not np.all(np.isfinite(new_vec)):
                raise TrainingDiverged(
                    "non-finite parameters after update",
                    {"update": update_index, "loss": total})
            params = PolicyParams(params.config, new_vec, params.slices)
            stats["surrogate"].append(surr)
            stats["value_loss"].append(vloss)
            stats["entropy"].append(ent)
            stats["clip_frac"].append(cfrac)
            stats["kl"].append(kl)
            if kl > config.kl_stop:
                stop = True
                break
        if stop:
            break
    summary = {k: float(np.mean(v)) if v else float("nan")
               for k, v in stats.items()}
    return params, adam, summary


@dataclass
class TrainResult:
    checkpoint_path: str
    log_path: str
    episodes_path: str
    updates_run: int
    final_params: PolicyParams


def train(spec: TaskSpec, trace: Trace, net_config: NetworkConfig,
          config: PpoConfig, out_dir, seed: int,
          resume_from: Optional[str] = None,
          augment: bool = False) -> TrainResult:
    """Full training run; bit-reproducible from (configs, seed).

    Resuming from a checkpoint written by this function continues the
    update schedule exactly where it stopped: every phase derives its
    seeds from (seed, update index) alone, and environments are freshly
    reset at each phase start.
    """
    os.makedirs(out_dir, exist_ok=True)
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "log.csv")
    episodes_path = os.path.join(out_dir, "episodes.csv")

    start_update = 0
    if resume_from is not None:
        params, adam, _, extra = load_checkpoint(resume_from)
        if params.config != net_config:
            raise CheckpointError(
                "checkpoint network config does not match run")
        if adam is None:
            raise CheckpointError(
                "checkpoint lacks optimizer state; cannot resume")
        start_update = int(extra.get("update_index", 0))
    else:
        params = PolicyParams.init(net_config, seed)
        adam = AdamState.zeros(params.count)

    envs = [DrivingEnv(spec, trace, obs_mode=net_config.mode, augment=augment)
            for _ in range(config.num_envs)]

    append = resume_from is not None and os.path.exists(log_path)
    log_file = open(log_path, "a" if append else "w", newline="")
    log_writer = csv.writer(log_file)
    ep_append = resume_from is not None and os.path.exists(episodes_path)
    ep_file = open(episodes_path, "a" if ep_append else "w", newline="")
    ep_writer = csv.writer(ep_file)
    if not append:
        log_writer.writerow(LOG_COLUMNS)
    if not ep_append:
        ep_writer.writerow(EPISODE_COLUMNS)

    final_path = os.path.join(ckpt_dir, "ckpt_final.bin")
    try:
        for update in range(start_update, config.num_updates):
            buffer = collect_rollouts(envs, params, config, seed, update)
            returns = [e.return_ for e in buffer.episodes]
            lengths = [e.length for e in buffer.episodes]
            for e in buffer.episodes:
                ep_writer.writerow([update + 1, e.env_index, e.episode_index,
                                    repr(e.return_), e.length, e.terminal])
            try:
                params, adam, stats = update_phase(params, adam, buffer,
                                                   config, seed, update)
            except TrainingDiverged as exc:
                diag_path = os.path.join(out_dir, "divergence.json")
                snap = os.path.join(ckpt_dir, "ckpt_diverged.bin")
                save_checkpoint(snap, params, adam,
                                step_count=update * config.buffer_capacity,
                                extra={"update_index": update, "seed": seed})
                with open(diag_path, "w") as f:
                    json.dump({"error": str(exc), "update": update + 1,
                               "diagnostics": exc.diagnostics,
                               "checkpoint": snap}, f, indent=2)
                exc.diagnostics["snapshot"] = snap
                raise
            steps_done = (update + 1) * config.buffer_capacity
            log_writer.writerow([
                update + 1, steps_done,
                repr(float(np.mean(returns))) if returns else "nan",
                repr(float(np.mean(lengths))) if lengths else "nan",
                repr(stats["surrogate"]), repr(stats["value_loss"]),
                repr(stats["entropy"]), repr(stats["clip_frac"]),
                repr(stats["kl"])])
            log_file.flush()
            ep_file.flush()
            done = update + 1
            if done % config.checkpoint_interval == 0 \
                    or done == config.num_updates:
                path = os.path.join(ckpt_dir, f"ckpt_{done:04d}.bin")
                save_checkpoint(path, params, adam, step_count=steps_done,
                                extra={"update_index": done, "seed": seed,
                                       "task": spec.task})
        save_checkpoint(final_path, params, adam,
                        step_count=config.num_updates
                        * config.buffer_capacity,
                        extra={"update_index": config.num_updates,
                               "seed": seed, "task": spec.task})
    finally:
        log_file.close()
        ep_file.close()
    return TrainResult(final_path, log_path, episodes_path,
                       config.num_updates - start_update, params)
