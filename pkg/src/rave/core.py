"""Causal attention substrate: configuration, RoPE, logits, masked softmax, GQA.

All array functions accept arbitrary leading batch/head axes and operate on
the trailing ``(N, d)`` or ``(N, N)`` axes, so a single head and a full
``(B, H, N, d)`` stack go through the same code.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels
from .errors import ConfigurationError, DimensionError, MaskError

LOCATIONS = ("pre_softmax", "post_softmax")
FORMS = ("additive", "multiplicative")
STAGES = ("prefill_and_decode", "decode_only")


def round_half_up(x: float) -> int:
    # Python's round() is banker's rounding; gated-head counts use half-up
    return int(math.floor(x + 0.5 + 1e-12))


@dataclass(frozen=True)
class AttentionConfig:
    """Attention hyperparameters shared by every layer of a model."""

    d_model: int
    d_k: int
    d_v: int
    num_layers: int
    n_heads: int
    n_kv_heads: int
    rope_base: float = 10000.0
    gamma: float = 1.0
    head_ratio: float = 0.25
    phi: str = "tanh"
    location: str = "pre_softmax"
    form: str = "additive"
    stage: str = "prefill_and_decode"

    def __post_init__(self):
        for name in ("d_model", "d_k", "d_v", "num_layers", "n_heads", "n_kv_heads"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.d_k % 2:
            raise ConfigurationError(f"d_k must be even for RoPE, got {self.d_k}")
        if self.n_heads % self.n_kv_heads:
            raise ConfigurationError(
                f"n_heads={self.n_heads} is not a multiple of n_kv_heads={self.n_kv_heads}"
            )
        if not self.rope_base > 0:
            raise ConfigurationError("rope_base must be positive")
        if not 0.0 <= self.head_ratio <= 1.0:
            raise ConfigurationError(f"head_ratio must lie in [0, 1], got {self.head_ratio}")
        if self.phi != "tanh":
            raise ConfigurationError(f"unsupported gate nonlinearity {self.phi!r}")
        if self.location not in LOCATIONS:
            raise ConfigurationError(f"location must be one of {LOCATIONS}")
        if self.form not in FORMS:
            raise ConfigurationError(f"form must be one of {FORMS}")
        if self.stage not in STAGES:
            raise ConfigurationError(f"stage must be one of {STAGES}")

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads

    @property
    def gated_per_group(self) -> int:
        return round_half_up(self.head_ratio * self.group_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "AttentionConfig":
        return cls(**data)


@dataclass(frozen=True)
class CausalMask:
    """Lower-triangular admissibility pattern of size ``n``.

    Entry ``(i, j)`` is admissible (logit offset 0) when ``j <= i`` and is
    excluded from the softmax reduction otherwise.
    """

    size: int

    @property
    def allowed(self) -> np.ndarray:
        return np.tri(self.size, dtype=bool)

    def offsets(self) -> np.ndarray:
        """Float view with ``-inf`` in excluded slots, for display only."""
        return np.where(self.allowed, 0.0, -np.inf)


def _rotate_pairs(x: np.ndarray, angles: np.ndarray) -> np.ndarray:
    cos, sin = np.cos(angles), np.sin(angles)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rope_angles(positions, d_k: int, base: float = 10000.0) -> np.ndarray:
    """``(N, d_k/2)`` rotation angles ``pos * base**(-2m/d_k)``."""
    if d_k % 2:
        raise ConfigurationError(f"RoPE needs an even head dimension, got {d_k}")
    pos = np.asarray(positions, dtype=np.float64)
    inv_freq = base ** (-np.arange(0, d_k, 2, dtype=np.float64) / d_k)
    return pos[:, None] * inv_freq[None, :]


def rope_apply(x: np.ndarray, positions, base: float = 10000.0) -> np.ndarray:
    """Rotate dimension pairs ``(2m, 2m+1)`` of each row by its position angle."""
    x = np.asarray(x)
    d_k = x.shape[-1]
    if d_k % 2:
        raise ConfigurationError(f"RoPE needs an even head dimension, got {d_k}")
    positions = np.asarray(positions)
    if positions.ndim != 1 or positions.shape[0] != x.shape[-2]:
        raise DimensionError(
            f"positions has shape {positions.shape}, expected ({x.shape[-2]},)"
        )
    if np.any(positions < 0):
        raise DimensionError("positions must be nonnegative")
    return _rotate_pairs(x, rope_angles(positions, d_k, base).astype(x.dtype, copy=False))


def rope_transpose(grad: np.ndarray, positions, base: float = 10000.0) -> np.ndarray:
    """Adjoint of :func:`rope_apply` (rotation by the negated angles)."""
    d_k = grad.shape[-1]
    angles = -rope_angles(positions, d_k, base).astype(grad.dtype, copy=False)
    return _rotate_pairs(grad, angles)


def attention_logits(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Scaled dot-product scores ``q_i . k_j / sqrt(d_k)``."""
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"head dims differ: {q.shape[-1]} vs {k.shape[-1]}")
    return (q @ np.swapaxes(k, -1, -2)) / np.sqrt(q.shape[-1]).astype(q.dtype)


def masked_softmax_rows(logits: np.ndarray, mask=None) -> np.ndarray:
    """Row softmax with excluded columns getting probability exactly 0.

    ``mask`` is ``None`` or a :class:`CausalMask` for the causal pattern
    (dispatched to the compiled kernel), or a boolean array of admissible
    entries broadcastable to ``logits``.
    """
    logits = np.asarray(logits)
    n_rows, n_cols = logits.shape[-2:]
    if mask is None or isinstance(mask, CausalMask):
        if mask is not None and mask.size != n_cols:
            raise DimensionError(f"mask size {mask.size} does not match logits {logits.shape}")
        if n_rows != n_cols:
            raise DimensionError("causal softmax needs square logits")
        return _kernels.causal_softmax(logits)

    allowed = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    if not np.all(allowed.any(axis=-1)):
        raise MaskError("a softmax row has every column masked")
    row_max = np.where(allowed, logits, -np.inf).max(axis=-1, keepdims=True)
    e = np.where(allowed, np.exp(np.where(allowed, logits - row_max, 0.0)), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def kv_head_index(n_heads: int, n_kv_heads: int) -> np.ndarray:
    """Key/value head used by each query head: ``h // (n_heads / n_kv_heads)``."""
    if n_kv_heads <= 0 or n_heads % n_kv_heads:
        raise ConfigurationError(f"cannot group {n_heads} query heads over {n_kv_heads} kv heads")
    return np.arange(n_heads) // (n_heads // n_kv_heads)


def gqa_expand(k_kv: np.ndarray, v_kv: np.ndarray, n_heads: int, n_kv_heads: int):
    """Per-query-head views of K and V along the head axis (axis -3)."""
    if k_kv.shape[-3] != n_kv_heads or v_kv.shape[-3] != n_kv_heads:
        raise DimensionError("head axis of K/V does not match n_kv_heads")
    index = kv_head_index(n_heads, n_kv_heads)
    if n_heads == n_kv_heads:
        return k_kv, v_kv
    return np.take(k_kv, index, axis=-3), np.take(v_kv, index, axis=-3)


def gqa_reduce(grad: np.ndarray, n_kv_heads: int) -> np.ndarray:
    """Sum per-query-head gradients back onto their shared kv head."""
    n_heads = grad.shape[-3]
    if n_heads == n_kv_heads:
        return grad
    r = n_heads // n_kv_heads
    shape = grad.shape[:-3] + (n_kv_heads, r) + grad.shape[-2:]
    return grad.reshape(shape).sum(axis=-3)


def standard_attention_forward(q_bar, k_bar, v, positions, mask=None, base: float = 10000.0):
    """Causal RoPE attention for one head (or matching head stacks).

    Returns ``(O, A)`` with ``A`` the attention probabilities.
    """
    q = rope_apply(q_bar, positions, base)
    k = rope_apply(k_bar, positions, base)
    probs = masked_softmax_rows(attention_logits(q, k), mask)
    return probs @ v, probs
