"""Pair-gated attention over visual keys, its variants, and its gradients.

A layer owns two vectors ``w_q`` and ``w_k`` of length ``d_k``. For every
selected query head the pre-rotary queries and keys are projected to one
scalar per token, the outer product of those scalars is squashed by
``tanh`` into a gate ``G``, and ``gamma * G`` is injected into the logits of
visual-key columns before the softmax. Ungated heads and text-key columns
are left bitwise untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .core import (
    AttentionConfig,
    attention_logits,
    gqa_expand,
    gqa_reduce,
    kv_head_index,
    rope_apply,
    rope_transpose,
    round_half_up,
)
from .errors import ConfigurationError, DegenerateRowError, DimensionError


# ---------------------------------------------------------------------------
# parameters and head selection


@dataclass
class GateParams:
    """Per-layer gate projections, shared by every query head in a layer."""

    w_q: np.ndarray  # (num_layers, d_k)
    w_k: np.ndarray  # (num_layers, d_k)

    def __post_init__(self):
        self.w_q = np.asarray(self.w_q)
        self.w_k = np.asarray(self.w_k)
        if self.w_q.ndim != 2 or self.w_q.shape != self.w_k.shape:
            raise DimensionError(
                f"gate weights must both be (num_layers, d_k), got {self.w_q.shape} and {self.w_k.shape}"
            )

    @classmethod
    def zeros(cls, num_layers: int, d_k: int, dtype=np.float64) -> "GateParams":
        return cls(np.zeros((num_layers, d_k), dtype), np.zeros((num_layers, d_k), dtype))

    @classmethod
    def init(cls, num_layers: int, d_k: int, mode: str = "zero", std: float = 0.02,
             rng: Optional[np.random.Generator] = None, dtype=np.float64) -> "GateParams":
        """Initialize gate weights.

        ``zero``: both vectors exactly 0. Every gradient of ``w_q`` is then
        proportional to ``w_k`` and vice versa, so this point is stationary.
        ``half``: ``w_k = 0`` and ``w_q ~ N(0, std)``; the gate is still
        exactly 0 but ``w_k`` receives gradient. ``normal``: both ``N(0, std)``.
        """
        params = cls.zeros(num_layers, d_k, dtype)
        if mode == "zero":
            return params
        rng = rng if rng is not None else np.random.default_rng(0)
        if mode == "half":
            params.w_q[...] = rng.normal(0.0, std, size=params.w_q.shape)
        elif mode == "normal":
            params.w_q[...] = rng.normal(0.0, std, size=params.w_q.shape)
            params.w_k[...] = rng.normal(0.0, std, size=params.w_k.shape)
        else:
            raise ConfigurationError(f"unknown gate init mode {mode!r}")
        return params

    @property
    def num_layers(self) -> int:
        return self.w_q.shape[0]

    @property
    def num_parameters(self) -> int:
        return self.w_q.size + self.w_k.size


@dataclass(frozen=True)
class HeadPartition:
    """Query heads routed through the gated path."""

    n_heads: int
    n_kv_heads: int
    per_group: int
    heads: tuple

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.n_heads, dtype=bool)
        m[list(self.heads)] = True
        return m

    def __contains__(self, head: int) -> bool:
        return head in self.heads

    def __len__(self) -> int:
        return len(self.heads)


def select_heads(n_heads: int, n_kv_heads: int, p: float) -> HeadPartition:
    """Gate the ``round(p * r)`` lowest-index query heads of every GQA group."""
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"head ratio must lie in [0, 1], got {p}")
    kv_head_index(n_heads, n_kv_heads)  # validates divisibility
    r = n_heads // n_kv_heads
    per_group = round_half_up(p * r)
    heads = tuple(g * r + i for g in range(n_kv_heads) for i in range(per_group))
    return HeadPartition(n_heads, n_kv_heads, per_group, heads)


def visual_key_mask(segmap, n: Optional[int] = None) -> np.ndarray:
    """Boolean indicator of image-segment positions (read-only)."""
    n = segmap.length if n is None else n
    mask = np.zeros(n, dtype=bool)
    img = [j for j in segmap.img if j < n]
    mask[img] = True
    mask.flags.writeable = False
    return mask


# ---------------------------------------------------------------------------
# elementary operations


def gate_scores(q_bar: np.ndarray, k_bar: np.ndarray, params: GateParams, layer: int):
    """Per-token scalar scores from pre-rotary features: ``(q_bar @ w_q, k_bar @ w_k)``."""
    if not 0 <= layer < params.num_layers:
        raise DimensionError(f"no gate parameters for layer {layer}")
    w_q, w_k = params.w_q[layer], params.w_k[layer]
    if q_bar.shape[-1] != w_q.shape[0] or k_bar.shape[-1] != w_k.shape[0]:
        raise DimensionError("feature width does not match gate weights")
    return q_bar @ w_q, k_bar @ w_k


def pair_gate(s_q: np.ndarray, s_k: np.ndarray, phi: str = "tanh") -> np.ndarray:
    if phi != "tanh":
        raise ConfigurationError(f"unsupported gate nonlinearity {phi!r}")
    if s_q.shape[:-1] != s_k.shape[:-1]:
        raise DimensionError("score vectors have mismatched leading shapes")
    return np.tanh(s_q[..., :, None] * s_k[..., None, :])


def recalibrate_logits(logits, gate, gamma: float, visual, form: str = "additive"):
    """Inject ``gamma * gate`` into visual-key columns; other columns are returned as-is."""
    logits = np.asarray(logits)
    if logits.shape != np.shape(gate):
        raise DimensionError(f"logits {logits.shape} and gate {np.shape(gate)} differ")
    cols = np.asarray(visual, dtype=bool)
    if cols.shape[-1] != logits.shape[-1]:
        raise DimensionError("visual mask length does not match key count")
    cols = cols[..., None, :]
    if form == "additive":
        return np.where(cols, logits + gamma * gate, logits)
    if form == "multiplicative":
        return np.where(cols, logits * (1.0 + gamma * gate), logits)
    raise ConfigurationError(f"unknown recalibration form {form!r}")


def post_softmax_recalibrate(probs, gate, gamma: float, visual, form: str = "additive",
                             allowed=None):
    """Adjust visual columns of an already normalized distribution, clamp at 0, renormalize.

    ``allowed`` restricts which entries may be adjusted (the causal pattern
    inside attention); by default every entry is.
    """
    probs = np.asarray(probs)
    if probs.shape != np.shape(gate):
        raise DimensionError(f"probs {probs.shape} and gate {np.shape(gate)} differ")
    region = np.broadcast_to(np.asarray(visual, dtype=bool)[..., None, :], probs.shape)
    if allowed is not None:
        region = region & allowed
    if form == "additive":
        raw = probs + gamma * gate
    elif form == "multiplicative":
        raw = probs * (1.0 + gamma * gate)
    else:
        raise ConfigurationError(f"unknown recalibration form {form!r}")
    adjusted = np.where(region, np.maximum(raw, 0.0), probs)
    touched = region.any(axis=-1, keepdims=True)
    total = adjusted.sum(axis=-1, keepdims=True)
    if np.any(touched & (total <= 0.0)):
        raise DegenerateRowError("post-softmax recalibration left a row with zero mass")
    return np.where(touched, adjusted / np.where(touched, total, 1.0), probs)


# ---------------------------------------------------------------------------
# full attention over head stacks


@dataclass
class GateInputs:
    """Everything the gated path needs besides Q/K/V for one layer.

    ``visual`` and ``rows`` have shape ``(..., N)`` matching the batch axes
    of the attention inputs; ``rows`` marks query positions that may be
    recalibrated (all of them unless the stage is decode-only).
    """

    w_q: np.ndarray
    w_k: np.ndarray
    heads: np.ndarray
    visual: np.ndarray
    rows: np.ndarray
    gamma: float = 1.0
    location: str = "pre_softmax"
    form: str = "additive"


@dataclass
class AttentionState:
    q_bar: np.ndarray
    k_bar_x: np.ndarray
    q: np.ndarray
    k_x: np.ndarray
    v_x: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    positions: np.ndarray
    base: float
    n_kv_heads: int
    gate: Optional[GateInputs] = None
    s_q: Optional[np.ndarray] = None
    s_k: Optional[np.ndarray] = None
    g: Optional[np.ndarray] = None
    region: Optional[np.ndarray] = None
    base_probs: Optional[np.ndarray] = None
    raw: Optional[np.ndarray] = None
    touched: Optional[np.ndarray] = None
    total: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)


def _region(gate: GateInputs, n_heads: int, n: int) -> np.ndarray:
    heads = np.asarray(gate.heads, dtype=bool)
    if heads.shape != (n_heads,):
        raise DimensionError(f"head mask has shape {heads.shape}, expected ({n_heads},)")
    rows = np.asarray(gate.rows, dtype=bool)[..., None, :, None]
    cols = np.asarray(gate.visual, dtype=bool)[..., None, None, :]
    return heads[:, None, None] & rows & cols


def rave_attention(q_bar, k_bar, v, positions, *, base: float = 10000.0,
                   gate: Optional[GateInputs] = None):
    """Causal RoPE attention over ``(..., H, N, d)`` stacks with optional pair gating.

    ``k_bar`` and ``v`` carry ``H_kv`` heads and are shared across each GQA
    group. Returns ``(O, A, state)``; ``state`` feeds
    :func:`rave_attention_backward`.
    """
    n_heads, n = q_bar.shape[-3], q_bar.shape[-2]
    n_kv = k_bar.shape[-3]
    positions = np.asarray(positions)
    k_bar_x, v_x = gqa_expand(k_bar, v, n_heads, n_kv)
    q = rope_apply(q_bar, positions, base)
    k_x = np.take(rope_apply(k_bar, positions, base), kv_head_index(n_heads, n_kv), axis=-3)
    logits = attention_logits(q, k_x)
    state = AttentionState(q_bar, k_bar_x, q, k_x, v_x, logits, None, positions, base, n_kv)

    if gate is None or not np.any(gate.heads):
        probs = _kernels.causal_softmax(logits)
    else:
        state.gate = gate
        state.s_q = q_bar @ gate.w_q
        state.s_k = k_bar_x @ gate.w_k
        g = np.tanh(state.s_q[..., :, None] * state.s_k[..., None, :])
        region = _region(gate, n_heads, n)
        state.g = g
        if gate.location == "pre_softmax":
            if gate.form == "additive":
                adjusted = np.where(region, logits + gate.gamma * g, logits)
            elif gate.form == "multiplicative":
                adjusted = np.where(region, logits * (1.0 + gate.gamma * g), logits)
            else:
                raise ConfigurationError(f"unknown recalibration form {gate.form!r}")
            state.extra["adjusted_logits"] = adjusted
            probs = _kernels.causal_softmax(adjusted)
        elif gate.location == "post_softmax":
            region = region & np.tri(n, dtype=bool)
            base_probs = _kernels.causal_softmax(logits)
            if gate.form == "additive":
                raw = base_probs + gate.gamma * g
            elif gate.form == "multiplicative":
                raw = base_probs * (1.0 + gate.gamma * g)
            else:
                raise ConfigurationError(f"unknown recalibration form {gate.form!r}")
            adjusted = np.where(region, np.maximum(raw, 0.0), base_probs)
            touched = region.any(axis=-1, keepdims=True)
            total = adjusted.sum(axis=-1, keepdims=True)
            if np.any(touched & (total <= 0.0)):
                raise DegenerateRowError("post-softmax recalibration left a row with zero mass")
            probs = np.where(touched, adjusted / np.where(touched, total, 1.0), base_probs)
            state.base_probs, state.raw, state.touched, state.total = base_probs, raw, touched, total
        else:
            raise ConfigurationError(f"unknown recalibration location {gate.location!r}")
        state.region = region

    state.probs = probs
    return probs @ v_x, probs, state


def rave_attention_backward(grad_out: np.ndarray, state: AttentionState) -> dict:
    """Reverse-mode pass through :func:`rave_attention`.

    Returns gradients for ``q_bar``, ``k_bar``, ``v`` and, when gated,
    ``w_q`` and ``w_k``.
    """
    if state is None or state.probs is None:
        raise ValueError("no cached forward state")
    probs, v_x = state.probs, state.v_x
    grad_probs = grad_out @ np.swapaxes(v_x, -1, -2)
    grad_v = gqa_reduce(np.swapaxes(probs, -1, -2) @ grad_out, state.n_kv_heads)

    gate = state.gate
    grad_gate = None
    if gate is None:
        grad_logits = _kernels.causal_softmax_grad(probs, grad_probs)
    elif gate.location == "pre_softmax":
        grad_adj = _kernels.causal_softmax_grad(probs, grad_probs)
        if gate.form == "additive":
            grad_logits = grad_adj
            grad_gate = np.where(state.region, gate.gamma * grad_adj, 0.0)
        else:
            grad_logits = np.where(state.region, grad_adj * (1.0 + gate.gamma * state.g), grad_adj)
            grad_gate = np.where(state.region, gate.gamma * grad_adj * state.logits, 0.0)
    else:
        touched, total = state.touched, state.total
        inner = (grad_probs * probs).sum(axis=-1, keepdims=True)
        grad_adj = np.where(touched, (grad_probs - inner) / np.where(touched, total, 1.0), grad_probs)
        live = state.region & (state.raw > 0.0)
        if gate.form == "additive":
            grad_base = np.where(state.region, np.where(live, grad_adj, 0.0), grad_adj)
            grad_gate = np.where(live, gate.gamma * grad_adj, 0.0)
        else:
            grad_base = np.where(
                state.region, np.where(live, grad_adj * (1.0 + gate.gamma * state.g), 0.0), grad_adj
            )
            grad_gate = np.where(live, gate.gamma * grad_adj * state.base_probs, 0.0)
        grad_logits = _kernels.causal_softmax_grad(state.base_probs, grad_base)

    scale = 1.0 / np.sqrt(state.q.shape[-1])
    grad_q = (grad_logits @ state.k_x) * scale
    grad_k_x = (np.swapaxes(grad_logits, -1, -2) @ state.q) * scale
    grad_q_bar = rope_transpose(grad_q, state.positions, state.base)
    grad_k_bar = rope_transpose(gqa_reduce(grad_k_x, state.n_kv_heads), state.positions, state.base)
    grads = {"q_bar": grad_q_bar, "k_bar": grad_k_bar, "v": grad_v}

    if gate is not None:
        d = state.q_bar.shape[-1]
        grad_pre = grad_gate * (1.0 - state.g * state.g)
        grad_s_q = (grad_pre * state.s_k[..., None, :]).sum(axis=-1)
        grad_s_k = (grad_pre * state.s_q[..., :, None]).sum(axis=-2)
        grads["w_q"] = grad_s_q.reshape(-1) @ state.q_bar.reshape(-1, d)
        grads["w_k"] = grad_s_k.reshape(-1) @ state.k_bar_x.reshape(-1, d)
        grads["q_bar"] = grad_q_bar + grad_s_q[..., None] * gate.w_q
        grads["k_bar"] = grad_k_bar + gqa_reduce(grad_s_k[..., None] * gate.w_k, state.n_kv_heads)
    return grads


def rave_attention_step(q_bar_t, k_bar, k_rot, v, position: int, *, base: float = 10000.0,
                        gate: Optional[GateInputs] = None):
    """One cached decoding step: a single new query row against all keys so far.

    ``q_bar_t`` is ``(..., H, 1, d_k)``; ``k_bar``/``k_rot``/``v`` hold the
    cached pre-rotary keys, rotated keys and values ``(..., H_kv, T, d)``.
    ``gate.visual`` is ``(..., T)``; ``gate.rows`` is a ``(...,)`` flag for
    whether this query row may be recalibrated. Returns ``(o_t, a_t)``.
    """
    n_heads, n_kv = q_bar_t.shape[-3], k_bar.shape[-3]
    index = kv_head_index(n_heads, n_kv)
    q = rope_apply(q_bar_t, np.array([position]), base)
    k_x = np.take(k_rot, index, axis=-3)
    v_x = np.take(v, index, axis=-3)
    logits = attention_logits(q, k_x)  # (..., H, 1, T)

    def softmax(x):
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    if gate is None or not np.any(gate.heads):
        probs = softmax(logits)
    else:
        k_bar_x = np.take(k_bar, index, axis=-3)
        s_q = q_bar_t @ gate.w_q
        s_k = k_bar_x @ gate.w_k
        g = np.tanh(s_q[..., :, None] * s_k[..., None, :])
        rows = np.asarray(gate.rows, dtype=bool)[..., None, None, None]
        cols = np.asarray(gate.visual, dtype=bool)[..., None, None, :]
        region = np.asarray(gate.heads, dtype=bool)[:, None, None] & rows & cols
        if gate.location == "pre_softmax":
            if gate.form == "additive":
                probs = softmax(np.where(region, logits + gate.gamma * g, logits))
            else:
                probs = softmax(np.where(region, logits * (1.0 + gate.gamma * g), logits))
        else:
            base_probs = softmax(logits)
            if gate.form == "additive":
                raw = base_probs + gate.gamma * g
            else:
                raw = base_probs * (1.0 + gate.gamma * g)
            adjusted = np.where(region, np.maximum(raw, 0.0), base_probs)
            touched = region.any(axis=-1, keepdims=True)
            total = adjusted.sum(axis=-1, keepdims=True)
            if np.any(touched & (total <= 0.0)):
                raise DegenerateRowError("post-softmax recalibration left a row with zero mass")
            probs = np.where(touched, adjusted / np.where(touched, total, 1.0), base_probs)
    return probs @ v_x, probs


# ---------------------------------------------------------------------------
# single-head entry points


def _single_head_gate(params, layer, partition, head, config, segmap, n, stage):
    visual = visual_key_mask(segmap, n)
    rows = segmap.recalibrated_rows(stage, n)
    return GateInputs(
        w_q=params.w_q[layer],
        w_k=params.w_k[layer],
        heads=np.array([head in partition]),
        visual=visual,
        rows=rows,
        gamma=config.gamma,
        location=config.location,
        form=config.form,
    )


def rave_attention_forward(q_bar, k_bar, v, positions, mask, params: GateParams,
                           partition: HeadPartition, config: AttentionConfig, segmap,
                           *, layer: int = 0, head: int = 0, return_state: bool = False):
    """Gated attention for query head ``head`` of ``layer`` on one sequence.

    ``q_bar``/``k_bar`` are ``(N, d_k)`` pre-rotary features and ``v`` is
    ``(N, d_v)``; ``mask`` must be ``None`` or the causal mask. Heads outside
    ``partition`` take the plain path.
    """
    if mask is not None and getattr(mask, "size", q_bar.shape[0]) != q_bar.shape[0]:
        raise DimensionError("mask size does not match sequence length")
    n = q_bar.shape[0]
    gate = _single_head_gate(params, layer, partition, head, config, segmap, n, config.stage)
    out, probs, state = rave_attention(
        q_bar[None], k_bar[None], v[None], positions, base=config.rope_base, gate=gate
    )
    if return_state:
        return out[0], probs[0], state
    return out[0], probs[0]


def gate_gradients(grad_out, state: Optional[AttentionState]) -> dict:
    """Backward pass for :func:`rave_attention_forward` (single head)."""
    if state is None:
        raise ValueError("gate_gradients needs the cached forward state")
    grads = rave_attention_backward(np.asarray(grad_out)[None], state)
    out = {k: (g[0] if k in ("q_bar", "k_bar", "v") else g) for k, g in grads.items()}
    d = state.q_bar.shape[-1]
    out.setdefault("w_q", np.zeros(d))
    out.setdefault("w_k", np.zeros(d))
    return out
