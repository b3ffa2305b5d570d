"""Stochastic steering policy and value function with manual gradients.

The network is a feature encoder (MLP for state vectors, a small conv
stack for images), an LSTM cell, and linear action/value heads. All
parameters live in one flat float64 vector with named slices; forward
passes cache intermediates so the backward pass can produce exact
gradients without an autodiff framework. Actions are tanh-squashed
Gaussians bounded by the steering limit.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

LOG_STD_MIN = -4.0
LOG_STD_MAX = 1.0
BPTT_WINDOW = 16
CHECKPOINT_MAGIC = b"ADOP"
CHECKPOINT_VERSION = 1

# Typical magnitude per slot of the 11-dim privileged observation
# [q_lat/Z, q_rot/Z, v, delta, dx, dy, dyaw, dv, kappa x3]. Inputs are
# divided by these and tanh-bounded so the absent-ado sentinel (dx=+100)
# cannot saturate the first dense layer.
PRIVILEGED_OBS_SCALE = (1.0, 1.0, 5.0, 1.0, 10.0, 3.0, 2.0, 5.0,
                        1.0, 1.0, 1.0)


class CheckpointError(ValueError):
    """Checkpoint file malformed or inconsistent with the requested config."""


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture description. tanh activations throughout.

    Image inputs run through `conv_spec` ((channels, kernel, stride) per
    layer, valid padding) before the dense stack; vector inputs skip it.
    """

    mode: str = "privileged"
    obs_dim: int = 11
    image_shape: Tuple[int, int] = (32, 48)
    conv_spec: Tuple[Tuple[int, int, int], ...] = ((8, 5, 2), (16, 3, 2))
    hidden_sizes: Tuple[int, ...] = (64, 64)
    recurrent_size: int = 64
    delta_max: float = 0.5236
    log_std_init: float = -0.5
    input_scale: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.mode not in ("privileged", "pixels"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "privileged" and self.obs_dim <= 0:
            raise ValueError("obs_dim must be positive")
        if min(self.hidden_sizes, default=1) <= 0 or self.recurrent_size <= 0:
            raise ValueError("layer sizes must be positive")
        if self.delta_max <= 0:
            raise ValueError("delta_max must be positive")
        if not LOG_STD_MIN <= self.log_std_init <= LOG_STD_MAX:
            raise ValueError("log_std_init outside the clamp range")
        if self.input_scale:
            if self.mode != "privileged":
                raise ValueError("input_scale applies to privileged mode only")
            if len(self.input_scale) != self.obs_dim:
                raise ValueError("input_scale length must equal obs_dim")
            if min(self.input_scale) <= 0:
                raise ValueError("input_scale entries must be positive")
        if self.mode == "pixels":
            h, w = self.image_shape
            for channels, kernel, stride in self.conv_spec:
                if min(channels, kernel, stride) <= 0:
                    raise ValueError("conv spec entries must be positive")
                h = (h - kernel) // stride + 1
                w = (w - kernel) // stride + 1
                if h <= 0 or w <= 0:
                    raise ValueError("conv stack consumes the whole image")

    @staticmethod
    def privileged(obs_dim: int = 11, delta_max: float = 0.5236,
                   log_std_init: float = -0.5) -> "NetworkConfig":
        scale = PRIVILEGED_OBS_SCALE if obs_dim == 11 else ()
        return NetworkConfig(mode="privileged", obs_dim=obs_dim,
                             hidden_sizes=(64, 64), delta_max=delta_max,
                             log_std_init=log_std_init, input_scale=scale)

    @staticmethod
    def pixels(image_shape: Tuple[int, int] = (32, 48),
               delta_max: float = 0.5236,
               log_std_init: float = -0.5) -> "NetworkConfig":
        return NetworkConfig(mode="pixels", image_shape=image_shape,
                             hidden_sizes=(64,), delta_max=delta_max,
                             log_std_init=log_std_init)

    def conv_output_shapes(self) -> List[Tuple[int, int, int]]:
        shapes = []
        h, w = self.image_shape
        for channels, kernel, stride in self.conv_spec:
            h = (h - kernel) // stride + 1
            w = (w - kernel) // stride + 1
            shapes.append((channels, h, w))
        return shapes

    def embed_dim(self) -> int:
        return self.hidden_sizes[-1] if self.hidden_sizes else self._flat_dim()

    def _flat_dim(self) -> int:
        if self.mode == "privileged":
            return self.obs_dim
        c, h, w = self.conv_output_shapes()[-1]
        return c * h * w

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_shape"] = list(self.image_shape)
        d["conv_spec"] = [list(e) for e in self.conv_spec]
        d["hidden_sizes"] = list(self.hidden_sizes)
        d["input_scale"] = list(self.input_scale)
        return d

    @staticmethod
    def from_dict(d: dict) -> "NetworkConfig":
        return NetworkConfig(
            mode=d["mode"], obs_dim=int(d["obs_dim"]),
            image_shape=tuple(d["image_shape"]),
            conv_spec=tuple(tuple(e) for e in d["conv_spec"]),
            hidden_sizes=tuple(d["hidden_sizes"]),
            recurrent_size=int(d["recurrent_size"]),
            delta_max=float(d["delta_max"]),
            log_std_init=float(d.get("log_std_init", -0.5)),
            input_scale=tuple(d.get("input_scale", ())))


def _layer_shapes(config: NetworkConfig) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {}
    if config.mode == "pixels":
        in_ch = 1
        for i, (channels, kernel, _) in enumerate(config.conv_spec):
            shapes[f"conv{i}_w"] = (channels, in_ch, kernel, kernel)
            shapes[f"conv{i}_b"] = (channels,)
            in_ch = channels
    fan_in = config._flat_dim()
    for i, size in enumerate(config.hidden_sizes):
        shapes[f"fc{i}_w"] = (size, fan_in)
        shapes[f"fc{i}_b"] = (size,)
        fan_in = size
    h = config.recurrent_size
    shapes["lstm_wx"] = (4 * h, config.embed_dim())
    shapes["lstm_wh"] = (4 * h, h)
    shapes["lstm_b"] = (4 * h,)
    shapes["mean_w"] = (1, h)
    shapes["mean_b"] = (1,)
    shapes["value_w"] = (1, h)
    shapes["value_b"] = (1,)
    shapes["log_std"] = (1,)
    return shapes


@dataclass
class PolicyParams:
    """Flat float64 parameter vector with a named slice per layer."""

    config: NetworkConfig
    vector: np.ndarray
    slices: Dict[str, Tuple[int, Tuple[int, ...]]]

    def view(self, name: str) -> np.ndarray:
        offset, shape = self.slices[name]
        size = int(np.prod(shape))
        return self.vector[offset:offset + size].reshape(shape)

    @property
    def count(self) -> int:
        return self.vector.size

    @staticmethod
    def _slice_table(config: NetworkConfig):
        slices, offset = {}, 0
        for name, shape in _layer_shapes(config).items():
            slices[name] = (offset, shape)
            offset += int(np.prod(shape))
        return slices, offset

    @staticmethod
    def zeros(config: NetworkConfig) -> "PolicyParams":
        slices, total = PolicyParams._slice_table(config)
        return PolicyParams(config, np.zeros(total), slices)

    @staticmethod
    def init(config: NetworkConfig, seed) -> "PolicyParams":
        rng = np.random.default_rng(seed)
        params = PolicyParams.zeros(config)
        for name, (offset, shape) in params.slices.items():
            view = params.view(name)
            if name.endswith("_b"):
                continue  # biases start at zero
            if name == "log_std":
                view[:] = config.log_std_init
            elif name == "mean_w":
                bound = 0.01 / math.sqrt(shape[-1])
                view[:] = rng.uniform(-bound, bound, shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                bound = 1.0 / math.sqrt(fan_in)
                view[:] = rng.uniform(-bound, bound, shape)
        h = config.recurrent_size
        params.view("lstm_b")[h:2 * h] = 1.0  # open forget gates initially
        return params

    def clone(self) -> "PolicyParams":
        return PolicyParams(self.config, self.vector.copy(), self.slices)


@dataclass
class RecurrentState:
    h: np.ndarray  # (B, recurrent_size)
    c: np.ndarray

    @staticmethod
    def zeros(batch: int, size: int) -> "RecurrentState":
        return RecurrentState(np.zeros((batch, size)), np.zeros((batch, size)))

    def copy(self) -> "RecurrentState":
        return RecurrentState(self.h.copy(), self.c.copy())


@dataclass
class ActionDistribution:
    """tanh-squashed Gaussian over steering angles in (-delta_max, delta_max)."""

    mean: np.ndarray  # (B,) pre-squash Gaussian mean
    log_std: float
    delta_max: float

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        u = self.mean + math.exp(self.log_std) * rng.standard_normal(
            self.mean.shape)
        return np.tanh(u) * self.delta_max

    def mode(self) -> np.ndarray:
        return np.tanh(self.mean) * self.delta_max

    def log_prob(self, action: np.ndarray) -> np.ndarray:
        ratio = np.clip(np.asarray(action, dtype=float) / self.delta_max,
                        -1.0 + 1e-6, 1.0 - 1e-6)
        u = np.arctanh(ratio)
        z = (u - self.mean) / math.exp(self.log_std)
        return (-0.5 * z ** 2 - self.log_std - 0.5 * math.log(2.0 * math.pi)
                - np.log(self.delta_max * (1.0 - ratio ** 2)))

    def entropy(self) -> float:
        """Entropy of the base Gaussian (pre-squash)."""
        return 0.5 * math.log(2.0 * math.pi * math.e) + self.log_std


def effective_log_std(params: PolicyParams) -> Tuple[float, float]:
    """Clamped log_std and the gradient gate (0 when the clamp is active)."""
    raw = float(params.view("log_std")[0])
    clamped = min(max(raw, LOG_STD_MIN), LOG_STD_MAX)
    gate = 1.0 if LOG_STD_MIN < raw < LOG_STD_MAX else 0.0
    return clamped, gate


# -- encoder -----------------------------------------------------------------


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                  stride: int) -> np.ndarray:
    k = w.shape[2]
    windows = np.lib.stride_tricks.sliding_window_view(
        x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("bchwij,ocij->bohw", windows, w, optimize=True)
    return out + b[None, :, None, None]


def _conv_backward(x: np.ndarray, w: np.ndarray, stride: int,
                   dout: np.ndarray):
    k = w.shape[2]
    oh, ow = dout.shape[2], dout.shape[3]
    windows = np.lib.stride_tricks.sliding_window_view(
        x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    dw = np.einsum("bohw,bchwij->ocij", dout, windows, optimize=True)
    db = dout.sum(axis=(0, 2, 3))
    dx = np.zeros_like(x)
    for ki in range(k):
        for kj in range(k):
            patch = np.einsum("bohw,oc->bchw", dout, w[:, :, ki, kj],
                              optimize=True)
            dx[:, :, ki:ki + stride * oh:stride,
               kj:kj + stride * ow:stride] += patch
    return dx, dw, db


def _encode_forward(params: PolicyParams, obs: np.ndarray):
    """obs (N, obs_dim) or (N, H, W) -> embeddings (N, E) plus caches."""
    config = params.config
    cache: Dict[str, object] = {}
    if config.mode == "pixels":
        x = obs[:, None, :, :].astype(float)
        conv_in, conv_out = [], []
        for i, (_, _, stride) in enumerate(config.conv_spec):
            conv_in.append(x)
            pre = _conv_forward(x, params.view(f"conv{i}_w"),
                                params.view(f"conv{i}_b"), stride)
            x = np.tanh(pre)
            conv_out.append(x)
        cache["conv_in"], cache["conv_out"] = conv_in, conv_out
        x = x.reshape(x.shape[0], -1)
    else:
        x = np.asarray(obs, dtype=float)
        if config.input_scale:
            x = np.tanh(x / np.asarray(config.input_scale))
    fc_in, fc_out = [], []
    for i in range(len(config.hidden_sizes)):
        fc_in.append(x)
        pre = x @ params.view(f"fc{i}_w").T + params.view(f"fc{i}_b")
        x = np.tanh(pre)
        fc_out.append(x)
    cache["fc_in"], cache["fc_out"] = fc_in, fc_out
    return x, cache


def _encode_backward(params: PolicyParams, cache, de: np.ndarray,
                     grads: Dict[str, np.ndarray]) -> None:
    config = params.config
    d = de
    for i in reversed(range(len(config.hidden_sizes))):
        d = d * (1.0 - cache["fc_out"][i] ** 2)
        grads[f"fc{i}_w"] += d.T @ cache["fc_in"][i]
        grads[f"fc{i}_b"] += d.sum(axis=0)
        d = d @ params.view(f"fc{i}_w")
    if config.mode == "pixels":
        c, h, w = config.conv_output_shapes()[-1]
        d = d.reshape(-1, c, h, w)
        for i in reversed(range(len(config.conv_spec))):
            d = d * (1.0 - cache["conv_out"][i] ** 2)
            dx, dw, db = _conv_backward(cache["conv_in"][i],
                                        params.view(f"conv{i}_w"),
                                        config.conv_spec[i][2], d)
            grads[f"conv{i}_w"] += dw
            grads[f"conv{i}_b"] += db
            d = dx


# -- recurrent core ----------------------------------------------------------


def _lstm_step(params: PolicyParams, e: np.ndarray, h: np.ndarray,
               c: np.ndarray):
    """Gate order i, f, g, o. Returns (h', c', cache)."""
    n = params.config.recurrent_size
    z = e @ params.view("lstm_wx").T + h @ params.view("lstm_wh").T \
        + params.view("lstm_b")
    i = 1.0 / (1.0 + np.exp(-z[:, 0:n]))
    f = 1.0 / (1.0 + np.exp(-z[:, n:2 * n]))
    g = np.tanh(z[:, 2 * n:3 * n])
    o = 1.0 / (1.0 + np.exp(-z[:, 3 * n:]))
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (e, h, c, i, f, g, o, tc)


def _lstm_backward(params: PolicyParams, cache, dh: np.ndarray,
                   dc: np.ndarray, grads: Dict[str, np.ndarray]):
    """Returns (de, dh_prev, dc_prev) and accumulates weight gradients."""
    n = params.config.recurrent_size
    e, h_prev, c_prev, i, f, g, o, tc = cache
    do = dh * tc
    dcc = dc + dh * o * (1.0 - tc ** 2)
    di = dcc * g
    df = dcc * c_prev
    dg = dcc * i
    dc_prev = dcc * f
    dz = np.concatenate([di * i * (1.0 - i), df * f * (1.0 - f),
                         dg * (1.0 - g ** 2), do * o * (1.0 - o)], axis=1)
    grads["lstm_wx"] += dz.T @ e
    grads["lstm_wh"] += dz.T @ h_prev
    grads["lstm_b"] += dz.sum(axis=0)
    de = dz @ params.view("lstm_wx")
    dh_prev = dz @ params.view("lstm_wh")
    return de, dh_prev, dc_prev


# -- single-step and sequence forward ----------------------------------------


def forward_step(params: PolicyParams, obs: np.ndarray,
                 rstate: RecurrentState):
    """One policy step: (distribution, value (B,), new recurrent state)."""
    obs = np.asarray(obs, dtype=float)
    expected = (params.config.obs_dim,) if params.config.mode == "privileged" \
        else tuple(params.config.image_shape)
    if obs.shape[1:] != expected:
        raise ValueError(f"observation shape {obs.shape[1:]} != {expected}")
    e, _ = _encode_forward(params, obs)
    h, c, _ = _lstm_step(params, e, rstate.h, rstate.c)
    mean = (h @ params.view("mean_w").T + params.view("mean_b"))[:, 0]
    value = (h @ params.view("value_w").T + params.view("value_b"))[:, 0]
    log_std, _ = effective_log_std(params)
    dist = ActionDistribution(mean, log_std, params.config.delta_max)
    return dist, value, RecurrentState(h, c)


@dataclass
class SequenceOutputs:
    means: np.ndarray    # (B, T)
    values: np.ndarray   # (B, T)
    log_std: float
    _caches: list
    _h0: np.ndarray
    _c0: np.ndarray
    _hs: np.ndarray      # (B, T, H) post-step hidden states


def forward_sequence(params: PolicyParams, obs_seq: np.ndarray,
                     h0: np.ndarray, c0: np.ndarray) -> SequenceOutputs:
    """Unrolled forward over (B, T, ...) observation windows."""
    b, t = obs_seq.shape[:2]
    flat = obs_seq.reshape((b * t,) + obs_seq.shape[2:])
    e_flat, enc_cache = _encode_forward(params, flat)
    e_seq = e_flat.reshape(b, t, -1)
    h, c = h0, c0
    hs = np.empty((b, t, params.config.recurrent_size))
    caches = [enc_cache]
    for step in range(t):
        h, c, cache = _lstm_step(params, e_seq[:, step], h, c)
        hs[:, step] = h
        caches.append(cache)
    hs_flat = hs.reshape(b * t, -1)
    means = (hs_flat @ params.view("mean_w").T
             + params.view("mean_b")).reshape(b, t)
    values = (hs_flat @ params.view("value_w").T
              + params.view("value_b")).reshape(b, t)
    log_std, _ = effective_log_std(params)
    return SequenceOutputs(means, values, log_std, caches, h0, c0, hs)


def backward_sequence(params: PolicyParams, out: SequenceOutputs,
                      d_means: np.ndarray, d_values: np.ndarray,
                      d_log_std: float) -> np.ndarray:
    """Gradient of a scalar loss given its derivatives at the heads.

    Truncated BPTT: gradients stop at the stored window boundary (the
    initial recurrent state is treated as a constant).
    """
    b, t = d_means.shape
    grads = {name: np.zeros(shape)
             for name, shape in _layer_shapes(params.config).items()}
    hs_flat = out._hs.reshape(b * t, -1)
    dm_flat = d_means.reshape(b * t, 1)
    dv_flat = d_values.reshape(b * t, 1)
    grads["mean_w"] += dm_flat.T @ hs_flat
    grads["mean_b"] += dm_flat.sum(axis=0)
    grads["value_w"] += dv_flat.T @ hs_flat
    grads["value_b"] += dv_flat.sum(axis=0)
    _, gate = effective_log_std(params)
    grads["log_std"][0] = d_log_std * gate

    dh_head = (dm_flat @ params.view("mean_w")
               + dv_flat @ params.view("value_w")).reshape(b, t, -1)
    de_seq = np.empty((b, t, params.config.embed_dim()))
    dh = np.zeros((b, params.config.recurrent_size))
    dc = np.zeros_like(dh)
    for step in reversed(range(t)):
        de, dh, dc = _lstm_backward(params, out._caches[step + 1],
                                    dh + dh_head[:, step], dc, grads)
        de_seq[:, step] = de
    _encode_backward(params, out._caches[0],
                     de_seq.reshape(b * t, -1), grads)

    flat = np.empty(params.count)
    for name, (offset, shape) in params.slices.items():
        size = int(np.prod(shape))
        flat[offset:offset + size] = grads[name].ravel()
    return flat


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @staticmethod
    def zeros(count: int) -> "AdamState":
        return AdamState(np.zeros(count), np.zeros(count), 0)


def adam_update(vector: np.ndarray, grad: np.ndarray, state: AdamState,
                lr: float, beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8) -> Tuple[np.ndarray, AdamState]:
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad ** 2
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new_vector = vector - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_vector, AdamState(m, v, t)


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, params: PolicyParams,
                    adam: Optional[AdamState] = None, step_count: int = 0,
                    extra: Optional[dict] = None) -> None:
    """magic + version + header length + JSON header + raw LE float64 blocks."""
    blocks = [("params", params.vector)]
    header = {
        "config": params.config.to_dict(),
        "slices": {k: [off, list(shape)]
                   for k, (off, shape) in params.slices.items()},
        "param_count": params.count,
        "step_count": int(step_count),
        "adam_t": 0 if adam is None else int(adam.t),
        "blocks": ["params"],
        "extra": extra or {},
    }
    if adam is not None:
        blocks += [("adam_m", adam.m), ("adam_v", adam.v)]
        header["blocks"] = ["params", "adam_m", "adam_v"]
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(payload)))
        f.write(payload)
        for _, arr in blocks:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Tuple[PolicyParams, Optional[AdamState], int, dict]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a policy checkpoint")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        header = json.loads(f.read(hlen).decode("utf-8"))
        config = NetworkConfig.from_dict(header["config"])
        count = int(header["param_count"])
        arrays = {}
        for name in header["blocks"]:
            raw = f.read(8 * count)
            if len(raw) != 8 * count:
                raise CheckpointError(f"{path}: truncated block {name!r}")
            arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    slices, total = PolicyParams._slice_table(config)
    if total != count:
        raise CheckpointError(f"{path}: parameter count {count} does not "
                              f"match config ({total})")
    params = PolicyParams(config, arrays["params"], slices)
    adam = None
    if "adam_m" in arrays:
        adam = AdamState(arrays["adam_m"], arrays["adam_v"],
                         int(header["adam_t"]))
    return params, adam, int(header["step_count"]), header.get("extra", {})
