"""
AMAD encoder: input embedding, stacked AutoMask blocks, reconstruction head.

Each block runs two attention branches over the same input. The self-attention
branch is plain scaled dot-product attention. The AutoMask branch rotates its
queries and keys pairwise by ``p * omega[head] * theta[k]``, a rotary
embedding whose per-head frequency ``omega`` is learned. The two row-stochastic
maps are mixed convexly and applied to the values.

The two branches have separate query/key projections so that stopping the
gradient on one branch's attention map fully isolates the other branch's
weights from the divergence term.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
import numpy as np

from . import container
from . import tensor as T
from .errors import ConfigError, NumericError, ShapeError
from .tensor import Tensor


@dataclass
class ModelConfig:
    n_layers: int = 3
    d_model: int = 32
    n_heads: int = 4
    window_len: int = 100
    input_dim: int = 1
    mixup_alpha: float = 0.9
    rope_base: float = 10000.0
    deterministic_seed: int = 0
    # True: 1/sqrt(d_model) for self-attention and 1/d_model for AutoMask
    model_dim_scaling: bool = False

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def validate(self) -> "ModelConfig":
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.window_len < 2:
            raise ConfigError(f"window_len must be >= 2, got {self.window_len}")
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_head % 2:
            raise ConfigError(f"per-head dim {self.d_head} must be even for rotary pairs")
        if not 0.0 <= self.mixup_alpha <= 1.0:
            raise ConfigError(f"mixup_alpha must lie in [0, 1], got {self.mixup_alpha}")
        if not self.rope_base > 0:
            raise ConfigError(f"rope_base must be positive, got {self.rope_base}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


FULL_SIZE_CONFIG = dict(n_layers=3, d_model=512, n_heads=8)

LAYER_PARAM_NAMES = (
    "w_q_self", "w_k_self", "w_q_mask", "w_k_mask", "w_v", "omega",
    "ffn.weight", "ffn.bias", "norm1.gamma", "norm1.beta", "norm2.gamma", "norm2.beta",
)
SELF_ATTN_PARAMS = ("w_q_self", "w_k_self")
AUTOMASK_PARAMS = ("w_q_mask", "w_k_mask", "omega")


@dataclass
class AmadParams:
    """Learnable tensors in declaration order plus fixed buffers."""

    cfg: ModelConfig
    tensors: dict[str, Tensor]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def layer(self, l: int, name: str) -> Tensor:
        return self.tensors[f"layers.{l}.{name}"]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def named(self):
        return self.tensors.items()

    def zero_grad(self) -> None:
        T.zero_grad(self.tensors.values())

    def copy(self) -> "AmadParams":
        return AmadParams(
            self.cfg,
            {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.tensors.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )


@dataclass
class AttentionPack:
    """Per-layer AutoMask maps ``A`` and self-attention maps ``S``, each B x h x N x N."""

    A: list[Tensor]
    S: list[Tensor]

    def __len__(self) -> int:
        return len(self.S)


@dataclass
class ForwardOutput:
    recon: Tensor
    attn: AttentionPack


def sinusoidal_table(n_pos: int, d_model: int) -> np.ndarray:
    pos = np.arange(n_pos, dtype=np.float64)[:, None]
    i = np.arange(0, d_model, 2, dtype=np.float64)
    div = np.exp(-math.log(10000.0) * i / d_model)
    table = np.zeros((n_pos, d_model))
    table[:, 0::2] = np.sin(pos * div)
    table[:, 1::2] = np.cos(pos * div[: d_model // 2])
    return table


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(cfg: ModelConfig, seed: int | None = None) -> AmadParams:
    cfg.validate()
    rng = np.random.default_rng(cfg.deterministic_seed if seed is None else seed)
    D, d, h = cfg.d_model, cfg.input_dim, cfg.n_heads
    raw: dict[str, np.ndarray] = {
        "embed.weight": _glorot(rng, d, D),
        "embed.bias": np.zeros(D),
    }
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        for name in ("w_q_self", "w_k_self", "w_q_mask", "w_k_mask", "w_v"):
            raw[p + name] = _glorot(rng, D, D)
        # omega = 1 reproduces the fixed-frequency rotary embedding at init
        raw[p + "omega"] = np.ones(h)
        raw[p + "ffn.weight"] = _glorot(rng, D, D)
        raw[p + "ffn.bias"] = np.zeros(D)
        raw[p + "norm1.gamma"] = np.ones(D)
        raw[p + "norm1.beta"] = np.zeros(D)
        raw[p + "norm2.gamma"] = np.ones(D)
        raw[p + "norm2.beta"] = np.zeros(D)
    raw["head.weight"] = _glorot(rng, D, d)
    raw["head.bias"] = np.zeros(d)
    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}
    return AmadParams(cfg, tensors, {"pos_table": sinusoidal_table(cfg.window_len, D)})


# -- heads -------------------------------------------------------------------
def split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, N, D = x.shape
    return x.reshape(B, N, n_heads, D // n_heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    """B x h x N x dh -> B x N x (h*dh); same layout as concatenating heads."""
    B, h, N, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, N, h * dh)


def default_positions(n: int, offset: int = 0) -> np.ndarray:
    return np.arange(1, n + 1, dtype=np.float64) + offset


def rotary_mask_embed(x: Tensor, positions, omega, rope_base: float = 10000.0) -> Tensor:
    """Rotate consecutive feature pairs of a B x h x N x dh tensor.

    Pair k of head e at position p turns by ``p * omega[e] * theta[k]`` with
    ``theta[k] = rope_base ** (-2k / dh)``. Differentiable in ``x`` and ``omega``.
    """
    x = T.as_tensor(x)
    omega = T.as_tensor(omega)
    B, h, N, dh = x.shape
    if dh % 2:
        raise ConfigError(f"rotary embedding needs an even head dim, got {dh}")
    if len(positions) != N:
        raise ShapeError(f"got {len(positions)} positions for sequence length {N}")
    if omega.shape != (h,):
        raise ShapeError(f"omega has shape {omega.shape}, expected ({h},)")
    kappa = np.arange(dh // 2, dtype=np.float64)
    theta = rope_base ** (-2.0 * kappa / dh)
    base = np.asarray(positions, dtype=np.float64)[:, None] * theta[None, :]  # N x dh/2
    ang = omega.data[:, None, None] * base[None]  # h x N x dh/2
    c, s = np.cos(ang), np.sin(ang)
    xe, xo = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = xe * c - xo * s
    out[..., 1::2] = xe * s + xo * c

    def bw(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = None
        if x.grad_node is not None:
            # inverse rotation
            gx = np.empty_like(g)
            gx[..., 0::2] = ge * c + go * s
            gx[..., 1::2] = -ge * s + go * c
        gw = None
        if omega.grad_node is not None:
            d_ang = -ge * out[..., 1::2] + go * out[..., 0::2]
            gw = (d_ang * base).sum(axis=(0, 2, 3))
        return gx, gw

    return T.make_op(out, (x, omega), bw)


def _scores_to_attn(logits: Tensor) -> Tensor:
    if not np.isfinite(logits.data).all():
        raise NumericError("attention logits contain non-finite values")
    return T.softmax_last_axis(logits)


def automask_logits(Q: Tensor, K: Tensor, omega, cfg: ModelConfig, positions=None) -> Tensor:
    """Rotated Q K^T per head, scaled; B x h x N x N."""
    h = cfg.n_heads
    N = Q.shape[1]
    positions = default_positions(N) if positions is None else positions
    qh = rotary_mask_embed(split_heads(Q, h), positions, omega, cfg.rope_base)
    kh = rotary_mask_embed(split_heads(K, h), positions, omega, cfg.rope_base)
    denom = float(cfg.d_model) if cfg.model_dim_scaling else math.sqrt(cfg.d_head)
    return (qh @ kh.transpose()) / denom


def automask_attention(Q: Tensor, K: Tensor, omega, cfg: ModelConfig, positions=None) -> Tensor:
    return _scores_to_attn(automask_logits(Q, K, omega, cfg, positions))


def self_attention(Q: Tensor, K: Tensor, cfg: ModelConfig) -> Tensor:
    h = cfg.n_heads
    qh, kh = split_heads(Q, h), split_heads(K, h)
    denom = math.sqrt(cfg.d_model if cfg.model_dim_scaling else cfg.d_head)
    return _scores_to_attn((qh @ kh.transpose()) / denom)


def attn_mixup(A, S, alpha: float) -> Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"mixup alpha must lie in [0, 1], got {alpha}")
    A, S = T.as_tensor(A), T.as_tensor(S)
    if A.shape != S.shape:
        raise ShapeError(f"attn_mixup: shapes differ {A.shape} vs {S.shape}")
    if alpha == 1.0:
        return A
    if alpha == 0.0:
        return S
    return A * alpha + S * (1.0 - alpha)


def amad_block_forward(x: Tensor, params: AmadParams, l: int, automask: bool = True, positions=None):
    """One AutoMask block. Returns ``(x_out, A, S)``; ``A`` is None when the branch is off."""
    cfg = params.cfg
    P = lambda name: params.layer(l, name)  # noqa: E731
    if x.shape[-1] != cfg.d_model:
        raise ShapeError(f"block input has width {x.shape[-1]}, expected {cfg.d_model}")
    S = self_attention(x @ P("w_q_self"), x @ P("w_k_self"), cfg)
    if automask:
        A = automask_attention(x @ P("w_q_mask"), x @ P("w_k_mask"), P("omega"), cfg, positions)
        mix = attn_mixup(A, S, cfg.mixup_alpha)
    else:
        A, mix = None, S
    V = split_heads(x @ P("w_v"), cfg.n_heads)
    Z = merge_heads(mix @ V)
    H = T.layer_norm(x + Z, P("norm1.gamma"), P("norm1.beta"))
    ff = T.gelu(H @ P("ffn.weight") + P("ffn.bias"))
    out = T.layer_norm(H + ff, P("norm2.gamma"), P("norm2.beta"))
    return out, A, S


def model_forward(x, params: AmadParams, automask: bool = True) -> ForwardOutput:
    cfg = params.cfg
    x = T.as_tensor(x)
    if x.ndim != 3 or x.shape[1] != cfg.window_len or x.shape[2] != cfg.input_dim:
        raise ShapeError(
            f"model input must be B x {cfg.window_len} x {cfg.input_dim}, got {x.shape}"
        )
    if not np.isfinite(x.data).all():
        raise NumericError("model input contains non-finite values")
    hid = x @ params["embed.weight"] + params["embed.bias"] + params.buffers["pos_table"]
    As, Ss = [], []
    for l in range(cfg.n_layers):
        hid, A, S = amad_block_forward(hid, params, l, automask=automask)
        As.append(A)
        Ss.append(S)
    recon = hid @ params["head.weight"] + params["head.bias"]
    return ForwardOutput(recon, AttentionPack(As, Ss))


# -- checkpoints -------------------------------------------------------------
def save_checkpoint(path, params: AmadParams, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
    """Write config, learnable tensors (declaration order), buffers, then ``extra`` arrays."""
    arrays = {k: t.data for k, t in params.tensors.items()}
    arrays.update({f"buffer.{k}": v for k, v in params.buffers.items()})
    arrays.update({f"extra.{k}": v for k, v in (extra or {}).items()})
    header = {"model_config": params.cfg.to_dict(), **(meta or {})}
    container.write(path, container.KIND_PARAMS, header, arrays)


def load_checkpoint(path) -> tuple[AmadParams, dict[str, np.ndarray], dict]:
    _, meta, arrays = container.read(path, expect_kind=container.KIND_PARAMS)
    cfg = ModelConfig.from_dict(meta["model_config"]).validate()
    tensors, buffers, extra = {}, {}, {}
    for k, v in arrays.items():
        if k.startswith("buffer."):
            buffers[k[len("buffer."):]] = v
        elif k.startswith("extra."):
            extra[k[len("extra."):]] = v
        else:
            tensors[k] = Tensor(v, requires_grad=True, name=k)
    return AmadParams(cfg, tensors, buffers), extra, meta
