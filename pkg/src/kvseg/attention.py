"""QKV, KV and KV+pos self-attention.

QKV scores each token pair with ``Q K^T / sqrt(d_k)``. KV drops the query
projection and scores with ``K K^T / sqrt(d_k)``, which is symmetric. KV+pos
restores asymmetry: the ``n x n`` score matrix is broadcast against a fixed
``n x n x m`` positional table and projected back to ``n x n`` by a learned
``m``-weight linear map (plus a scalar bias) before the softmax.

None of the projections carry bias terms.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .nn import Module, he_normal, parameter
from .tensor import Tensor


class Variant(str, enum.Enum):
    QKV = "QKV"
    KV = "KV"
    KV_POS = "KV_POS"

    @classmethod
    def parse(cls, text: str) -> "Variant":
        key = text.strip().upper().replace("-", "_").replace("+", "_")
        if key in ("KVPOS", "KV_POSITION"):
            key = "KV_POS"
        try:
            return cls(key)
        except ValueError:
            raise ConfigurationError(f"unknown attention variant {text!r}") from None


@dataclass(frozen=True)
class AttentionConfig:
    variant: Variant
    d_model: int
    heads: int
    pos_dim: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.d_model < 1 or self.heads < 1:
            raise ConfigurationError("d_model and heads must be positive")
        if self.d_model % self.heads:
            raise ConfigurationError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if (self.pos_dim is not None) != (self.variant is Variant.KV_POS):
            raise ConfigurationError("pos_dim must be given exactly when variant is KV_POS")
        if self.pos_dim is not None and (self.pos_dim < 2 or self.pos_dim % 2):
            raise ConfigurationError(f"pos_dim must be even and >= 2, got {self.pos_dim}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads


@dataclass
class AttentionWeights:
    w_k: Tensor
    w_v: Tensor
    w_out: Tensor
    w_q: Tensor | None = None
    pos_table: np.ndarray | None = None
    pos_proj: Tensor | None = None
    pos_bias: Tensor | None = None

    def validate(self, cfg: AttentionConfig) -> None:
        if (self.w_q is not None) != (cfg.variant is Variant.QKV):
            raise ConfigurationError("w_q must be present exactly for the QKV variant")
        has_pos = (self.pos_table, self.pos_proj, self.pos_bias)
        if any(p is not None for p in has_pos) != (cfg.variant is Variant.KV_POS) or (
            cfg.variant is Variant.KV_POS and any(p is None for p in has_pos)
        ):
            raise ConfigurationError("positional parts must be present exactly for KV_POS")


def build_pos_table(n: int, m: int) -> np.ndarray:
    """Fixed 2D sinusoidal table of shape ``(n, n, m)``.

    Channels ``[0, m/2)`` encode the row index ``i``, channels ``[m/2, m)``
    the column index ``j``. Within each half, channel ``2k`` is
    ``sin(pos / 10000^(2k/(m/2)))`` and ``2k+1`` the matching cosine.
    """
    if m < 2 or m % 2:
        raise ConfigurationError(f"positional dimension must be even and >= 2, got {m}")
    half = m // 2
    pos = np.arange(n, dtype=np.float64)[:, None]
    ch = np.arange(half)
    freq = 10000.0 ** (-(2 * (ch // 2)) / half)
    angles = pos * freq[None, :]
    enc = np.where(ch % 2 == 0, np.sin(angles), np.cos(angles))  # (n, half)
    table = np.empty((n, n, m))
    table[:, :, :half] = enc[:, None, :]
    table[:, :, half:] = enc[None, :, :]
    return table


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = x.reshape(*lead, n, heads, d // heads)
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return x.transpose(axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dk = x.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return x.transpose(axes).reshape(*lead, n, h * dk)


def pos_scores(scores: Tensor, table: np.ndarray, proj: Tensor, bias: Tensor) -> Tensor:
    """Project ``E[i,j,c] = S[i,j] + table[i,j,c]`` back to ``n x n``.

    ``sum_c w_c (S + P_c) + b`` is evaluated as ``S * sum(w) + P @ w + b``,
    which never materialises the ``n x n x m`` tensor per head.
    """
    n = scores.shape[-1]
    if n > table.shape[0]:
        raise ConfigurationError(f"sequence length {n} exceeds positional table size {table.shape[0]}")
    p = Tensor(table[:n, :n, :], dtype=scores.dtype)
    return scores * proj.sum() + (p @ proj) + bias


def attend(
    q: Tensor | None,
    k: Tensor,
    v: Tensor,
    cfg: AttentionConfig,
    pos: tuple[np.ndarray, Tensor, Tensor] | None = None,
    trace: dict | None = None,
) -> Tensor:
    """Head-wise scaled dot-product mixing of already projected tokens.

    ``q`` is ``None`` for the KV variants (keys stand in for queries).
    Returns the concatenated heads, before the output projection. When a
    ``trace`` dict is given it receives the pre-softmax ``scores``, the
    positional ``mixed_scores`` (KV+pos only) and the attention ``probs``.
    """
    if k.shape[-1] != cfg.d_model or v.shape != k.shape or (q is not None and q.shape != k.shape):
        raise DimensionError(f"projected tokens must share shape (..., n, {cfg.d_model})")
    kh = _split_heads(k, cfg.heads)
    qh = kh if q is None else _split_heads(q, cfg.heads)
    vh = _split_heads(v, cfg.heads)
    scores = (qh @ T.swapaxes(kh, -1, -2)) * (1.0 / math.sqrt(cfg.d_k))
    logits = scores
    if cfg.variant is Variant.KV_POS:
        if pos is None:
            raise ConfigurationError("KV_POS attention needs positional weights")
        logits = pos_scores(scores, *pos)
    probs = T.softmax_rows(logits)
    if trace is not None:
        trace["scores"] = scores.data
        trace["probs"] = probs.data
        if logits is not scores:
            trace["mixed_scores"] = logits.data
    return _merge_heads(probs @ vh)


def _check_tokens(x: Tensor, cfg: AttentionConfig) -> None:
    if x.ndim < 2 or x.shape[-1] != cfg.d_model:
        raise DimensionError(f"expected tokens (..., n, {cfg.d_model}), got {x.shape}")


def qkv_attention(x: Tensor, w: AttentionWeights, cfg: AttentionConfig, trace: dict | None = None) -> Tensor:
    if cfg.variant is not Variant.QKV:
        raise ConfigurationError(f"qkv_attention called with variant {cfg.variant.value}")
    w.validate(cfg)
    _check_tokens(x, cfg)
    mixed = attend(x @ w.w_q, x @ w.w_k, x @ w.w_v, cfg, trace=trace)
    return mixed @ w.w_out


def kv_attention(x: Tensor, w: AttentionWeights, cfg: AttentionConfig, trace: dict | None = None) -> Tensor:
    if cfg.variant is not Variant.KV:
        raise ConfigurationError(f"kv_attention called with variant {cfg.variant.value}")
    w.validate(cfg)
    _check_tokens(x, cfg)
    mixed = attend(None, x @ w.w_k, x @ w.w_v, cfg, trace=trace)
    return mixed @ w.w_out


def kv_pos_attention(x: Tensor, w: AttentionWeights, cfg: AttentionConfig, trace: dict | None = None) -> Tensor:
    if cfg.variant is not Variant.KV_POS:
        raise ConfigurationError(f"kv_pos_attention called with variant {cfg.variant.value}")
    w.validate(cfg)
    _check_tokens(x, cfg)
    pos = (w.pos_table, w.pos_proj, w.pos_bias)
    mixed = attend(None, x @ w.w_k, x @ w.w_v, cfg, pos=pos, trace=trace)
    return mixed @ w.w_out


_DISPATCH = {Variant.QKV: qkv_attention, Variant.KV: kv_attention, Variant.KV_POS: kv_pos_attention}


def self_attention(x: Tensor, w: AttentionWeights, cfg: AttentionConfig, trace: dict | None = None) -> Tensor:
    return _DISPATCH[cfg.variant](x, w, cfg, trace=trace)


class PositionalMixer(Module):
    """Learned ``m``-weight projection (+ bias) over a fixed positional table."""

    _no_decay = frozenset({"pos_bias"})

    def __init__(self, n_max: int, m: int):
        super().__init__()
        self.table = build_pos_table(n_max, m)
        self.pos_proj = parameter(np.full(m, 1.0 / m))
        self.pos_bias = parameter(np.zeros(1))

    def parts(self) -> tuple[np.ndarray, Tensor, Tensor]:
        return self.table, self.pos_proj, self.pos_bias


class MultiHeadAttention(Module):
    """Token-sequence self-attention in any of the three variants.

    Parameter names follow the functional weights: ``w_q`` (QKV only),
    ``w_k``, ``w_v``, ``w_out`` and, for KV+pos, ``pos.pos_proj`` /
    ``pos.pos_bias``.
    """

    def __init__(self, cfg: AttentionConfig, n_max: int, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        if cfg.variant is Variant.QKV:
            self.w_q = he_normal(rng, (d, d), d)
        self.w_k = he_normal(rng, (d, d), d)
        self.w_v = he_normal(rng, (d, d), d)
        self.w_out = he_normal(rng, (d, d), d)
        if cfg.variant is Variant.KV_POS:
            self.pos = PositionalMixer(n_max, cfg.pos_dim)

    def weights(self) -> AttentionWeights:
        w = AttentionWeights(w_k=self.w_k, w_v=self.w_v, w_out=self.w_out, w_q=getattr(self, "w_q", None))
        if self.cfg.variant is Variant.KV_POS:
            w.pos_table, w.pos_proj, w.pos_bias = self.pos.parts()
        return w

    def forward(self, x: Tensor, trace: dict | None = None) -> Tensor:
        return self_attention(x, self.weights(), self.cfg, trace=trace)
