"""Spatial-temporal transformer: temporal-conv embedding, sinusoidal positions,
post-norm encoder blocks with temporal multi-head attention, three task heads.

Parameters live in a flat ordered ``dict[str, Tensor]`` so the optimizer and
the checkpoint writer can walk them by name.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DimensionError, WindowError

NUM_EXPR_CLASSES = 8
NUM_AUS = 12
NUM_VA = 2


@dataclass(frozen=True)
class ModelConfig:
    d_v: int
    d_m: int = 128
    num_heads: int = 4
    d_k: int = 0  # 0 means d_m // num_heads
    d_ffn: int = 256
    num_layers: int = 2
    conv_kernel: int = 3
    max_T: int = 64
    dropout_rate: float = 0.1
    seed: int = 0
    positional_encoding: bool = True

    def __post_init__(self):
        if self.d_v < 1 or self.d_m < 1 or self.d_ffn < 1:
            raise ConfigError("d_v, d_m and d_ffn must be positive")
        if self.num_heads < 1:
            raise ConfigError(f"num_heads must be positive, got {self.num_heads}")
        if self.d_k == 0:
            if self.d_m % self.num_heads:
                raise ConfigError(f"d_m={self.d_m} is not divisible by num_heads={self.num_heads}")
            object.__setattr__(self, "d_k", self.d_m // self.num_heads)
        if self.d_m != self.num_heads * self.d_k:
            raise ConfigError(
                f"d_m={self.d_m} must equal num_heads*d_k={self.num_heads}*{self.d_k}"
            )
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.max_T < 1:
            raise ConfigError(f"max_T must be at least 1, got {self.max_T}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.num_layers < 0:
            raise ConfigError("num_layers must be nonnegative")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.positional_encoding and self.d_m % 2:
            raise ConfigError(f"sinusoidal positional encoding needs an even d_m, got {self.d_m}")

    def to_dict(self):
        return asdict(self)


@dataclass
class AttentionProjections:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor

    @classmethod
    def from_params(cls, params, prefix):
        return cls(*(params[f"{prefix}.{n}"] for n in ("w_q", "w_k", "w_v", "w_o")))


@dataclass
class TaskOutputs:
    va: Tensor           # T x 2, tanh-bounded
    expr_logits: Tensor  # T x 8
    au_logits: Tensor    # T x 12

    def numpy(self):
        return self.va.data, self.expr_logits.data, self.au_logits.data


# (name, shape, kind, fan_in, fan_out); kind is weight | bias | gain
def param_specs(cfg: ModelConfig):
    k, dv, dm = cfg.conv_kernel, cfg.d_v, cfg.d_m
    specs = [
        ("embed.conv.w", (k, dv, dm), "weight", k * dv, k * dm),
        ("embed.conv.b", (dm,), "bias", 0, 0),
    ]
    for i in range(cfg.num_layers):
        p = f"layers.{i}"
        for n in ("w_q", "w_k", "w_v", "w_o"):
            specs.append((f"{p}.attn.{n}", (dm, dm), "weight", dm, dm))
        specs += [
            (f"{p}.norm1.gamma", (dm,), "gain", 0, 0),
            (f"{p}.norm1.beta", (dm,), "bias", 0, 0),
            (f"{p}.ffn.w1", (dm, cfg.d_ffn), "weight", dm, cfg.d_ffn),
            (f"{p}.ffn.b1", (cfg.d_ffn,), "bias", 0, 0),
            (f"{p}.ffn.w2", (cfg.d_ffn, dm), "weight", cfg.d_ffn, dm),
            (f"{p}.ffn.b2", (dm,), "bias", 0, 0),
            (f"{p}.norm2.gamma", (dm,), "gain", 0, 0),
            (f"{p}.norm2.beta", (dm,), "bias", 0, 0),
        ]
    for head, n_out in (("va", NUM_VA), ("expr", NUM_EXPR_CLASSES), ("au", NUM_AUS)):
        specs += [
            (f"head.{head}.w", (dm, n_out), "weight", dm, n_out),
            (f"head.{head}.b", (n_out,), "bias", 0, 0),
        ]
    return specs


def init_params(cfg: ModelConfig, seed: int | None = None) -> dict[str, Tensor]:
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = {}
    for name, shape, kind, fan_in, fan_out in param_specs(cfg):
        if kind == "weight":
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-limit, limit, size=shape)
        elif kind == "gain":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


@lru_cache(maxsize=16)
def _positional_table(max_t: int, d_m: int) -> np.ndarray:
    t = np.arange(max_t, dtype=np.float64)[:, None]
    two_i = np.arange(0, d_m, 2, dtype=np.float64)[None, :]
    angle = t / np.power(10000.0, two_i / d_m)
    pe = np.empty((max_t, d_m))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    pe.setflags(write=False)
    return pe


def positional_encoding(max_T: int, d_m: int) -> Tensor:
    if d_m % 2:
        raise ConfigError(f"positional encoding needs an even model dim, got {d_m}")
    if max_T < 1:
        raise ConfigError(f"max_T must be at least 1, got {max_T}")
    return Tensor(_positional_table(max_T, d_m))


def _features(x) -> np.ndarray | Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(getattr(x, "features", x))


def embed_sequence(x, cfg: ModelConfig, params) -> Tensor:
    x = _features(x)
    if x.ndim != 2:
        raise DimensionError(f"expected a T x d_v feature matrix, got shape {x.shape}")
    t, d = x.shape
    if t > cfg.max_T:
        raise WindowError(f"window of {t} frames exceeds max_T={cfg.max_T}")
    if t < 1:
        raise WindowError("empty window")
    if d != cfg.d_v:
        raise DimensionError(f"feature dim {d} does not match model d_v={cfg.d_v}")
    h = ag.conv1d_temporal(x, params["embed.conv.w"], params["embed.conv.b"])
    if cfg.positional_encoding:
        h = h + Tensor(_positional_table(cfg.max_T, cfg.d_m)[:t])
    return h


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, return_weights=False):
    """softmax(Q K^T / sqrt(d_k)) V over all timesteps, no mask.

    Works on T x d_k matrices or on a leading head axis (H x T x d_k).
    """
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1] or q.ndim not in (2, 3):
        raise DimensionError(f"attention: mismatched Q {q.shape}, K {k.shape}, V {v.shape}")
    scores = ag.scale(ag.matmul(q, ag.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    weights = ag.softmax_lastdim(scores)
    out = ag.matmul(weights, v)
    return (out, weights) if return_weights else out


def tma_forward(x: Tensor, proj: AttentionProjections, num_heads: int) -> Tensor:
    """Temporal multi-head attention: project, split heads, attend, merge, project."""
    d_m = x.shape[-1]
    if num_heads < 1 or d_m % num_heads:
        raise ConfigError(f"d_m={d_m} is not divisible by {num_heads} heads")
    q = ag.split_heads(ag.matmul(x, proj.w_q), num_heads)
    k = ag.split_heads(ag.matmul(x, proj.w_k), num_heads)
    v = ag.split_heads(ag.matmul(x, proj.w_v), num_heads)
    heads = scaled_dot_attention(q, k, v)
    return ag.matmul(ag.merge_heads(heads), proj.w_o)


def encoder_block(x: Tensor, cfg: ModelConfig, params, layer: int,
                  train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    p = f"layers.{layer}"
    rate = cfg.dropout_rate if train else 0.0
    if rate and rng is None:
        raise ConfigError("training-mode dropout needs a random generator")
    attn = tma_forward(x, AttentionProjections.from_params(params, f"{p}.attn"), cfg.num_heads)
    y = ag.layer_norm_lastdim(
        x + ag.dropout(attn, rate, rng), params[f"{p}.norm1.gamma"], params[f"{p}.norm1.beta"]
    )
    hidden = ag.relu(ag.matmul(y, params[f"{p}.ffn.w1"]) + params[f"{p}.ffn.b1"])
    ffn = ag.matmul(hidden, params[f"{p}.ffn.w2"]) + params[f"{p}.ffn.b2"]
    return ag.layer_norm_lastdim(
        y + ag.dropout(ffn, rate, rng), params[f"{p}.norm2.gamma"], params[f"{p}.norm2.beta"]
    )


def encode(x, cfg: ModelConfig, params, mode: str = "infer", dropout_key=()) -> Tensor:
    """Embedding plus encoder stack; the shared trunk under the heads."""
    if mode not in ("train", "infer"):
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    train = mode == "train" and cfg.dropout_rate > 0
    rng = np.random.default_rng([cfg.seed, *dropout_key]) if train else None
    h = embed_sequence(x, cfg, params)
    for i in range(cfg.num_layers):
        h = encoder_block(h, cfg, params, i, train=train, rng=rng)
    return h


def model_forward(x, cfg: ModelConfig, params, mode: str = "infer", dropout_key=()) -> TaskOutputs:
    """Full forward pass.

    ``dropout_key`` (a tuple of ints, e.g. ``(step, window_index)``) seeds the
    dropout stream together with ``cfg.seed`` so training is replayable.
    """
    h = encode(x, cfg, params, mode, dropout_key)
    va = ag.tanh_elem(ag.matmul(h, params["head.va.w"]) + params["head.va.b"])
    expr = ag.matmul(h, params["head.expr.w"]) + params["head.expr.b"]
    au = ag.matmul(h, params["head.au.w"]) + params["head.au.b"]
    return TaskOutputs(va, expr, au)
