"""A small pre-norm decoder-only transformer with hand-written backprop.

Parameters live in a flat ``{name: ndarray}`` dict so the optimizer,
checkpoint writer and gradient checks can treat them uniformly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .core import AttentionConfig, rope_apply
from .diagnostics import AttentionTrace, SegmentMap
from .errors import ConfigurationError, DimensionError, VocabularyError
from .gate import GateInputs, GateParams, rave_attention, rave_attention_backward, rave_attention_step, select_heads

RMS_EPS = 1e-6


@dataclass(frozen=True)
class ToyModelSpec:
    vocab_size: int = 64
    d_model: int = 32
    num_layers: int = 2
    n_heads: int = 4
    n_kv_heads: int = 2
    d_ff: int = 64
    max_seq_len: int = 64
    variant: str = "standard"
    rope_base: float = 10000.0
    gamma: float = 1.0
    head_ratio: float = 0.25
    location: str = "pre_softmax"
    form: str = "additive"
    stage: str = "prefill_and_decode"

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "num_layers", "n_heads", "n_kv_heads", "d_ff", "max_seq_len"):
            if int(getattr(self, name)) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigurationError("d_model must equal n_heads * d_k")
        if self.variant not in ("standard", "rave"):
            raise ConfigurationError(f"unknown attention variant {self.variant!r}")
        self.attention_config()  # validates the remaining switches

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(
            d_model=self.d_model, d_k=self.d_k, d_v=self.d_k, num_layers=self.num_layers,
            n_heads=self.n_heads, n_kv_heads=self.n_kv_heads, rope_base=self.rope_base,
            gamma=self.gamma, head_ratio=self.head_ratio, location=self.location,
            form=self.form, stage=self.stage,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ToyModelSpec":
        return cls(**data)


def init_params(spec: ToyModelSpec, seed: int = 0, *, gate_init: str = "zero",
                gate_std: float = 0.02, dtype=np.float64) -> dict:
    rng = np.random.default_rng(seed)
    d, dk, f = spec.d_model, spec.d_k, spec.d_ff
    resid = 1.0 / np.sqrt(2 * spec.num_layers)

    def normal(shape, scale):
        return rng.normal(0.0, scale, size=shape).astype(dtype)

    params = {"embed": normal((spec.vocab_size, d), 1.0)}
    for layer in range(spec.num_layers):
        p = f"layers.{layer}."
        params[p + "norm1"] = np.ones(d, dtype)
        params[p + "wq"] = normal((d, spec.n_heads * dk), d ** -0.5)
        params[p + "wk"] = normal((d, spec.n_kv_heads * dk), d ** -0.5)
        params[p + "wv"] = normal((d, spec.n_kv_heads * dk), d ** -0.5)
        params[p + "wo"] = normal((spec.n_heads * dk, d), resid * (spec.n_heads * dk) ** -0.5)
        params[p + "norm2"] = np.ones(d, dtype)
        params[p + "w1"] = normal((d, f), d ** -0.5)
        params[p + "w2"] = normal((f, d), resid * f ** -0.5)
    params["norm_f"] = np.ones(d, dtype)
    params["lm_head"] = normal((d, spec.vocab_size), d ** -0.5)
    if spec.variant == "rave":
        gates = GateParams.init(spec.num_layers, dk, gate_init, gate_std,
                                np.random.default_rng([seed, 1]), dtype)
        for layer in range(spec.num_layers):
            params[f"layers.{layer}.gate_q"] = gates.w_q[layer].copy()
            params[f"layers.{layer}.gate_k"] = gates.w_k[layer].copy()
    return params


class ToyModel:
    def __init__(self, spec: ToyModelSpec, params: dict):
        self.spec = spec
        self.params = params
        self.partition = select_heads(spec.n_heads, spec.n_kv_heads, spec.head_ratio)

    @classmethod
    def create(cls, spec: ToyModelSpec, seed: int = 0, **kwargs) -> "ToyModel":
        return cls(spec, init_params(spec, seed, **kwargs))

    @property
    def gate_params(self) -> Optional[GateParams]:
        if self.spec.variant != "rave":
            return None
        n = self.spec.num_layers
        return GateParams(
            np.stack([self.params[f"layers.{i}.gate_q"] for i in range(n)]),
            np.stack([self.params[f"layers.{i}.gate_k"] for i in range(n)]),
        )

    def gate_inputs(self, layer: int, visual: np.ndarray, rows) -> Optional[GateInputs]:
        if self.spec.variant != "rave":
            return None
        p = f"layers.{layer}."
        return GateInputs(
            w_q=self.params[p + "gate_q"], w_k=self.params[p + "gate_k"],
            heads=self.partition.mask, visual=visual, rows=rows, gamma=self.spec.gamma,
            location=self.spec.location, form=self.spec.form,
        )


# ---------------------------------------------------------------------------
# building blocks


def _rmsnorm(x, gain):
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + RMS_EPS)
    return x * inv * gain, inv


def _rmsnorm_backward(grad_y, x, inv, gain):
    scaled = grad_y * gain
    d = x.shape[-1]
    grad_x = inv * scaled - x * inv ** 3 * (scaled * x).sum(axis=-1, keepdims=True) / d
    grad_gain = (grad_y * x * inv).reshape(-1, d).sum(axis=0)
    return grad_x, grad_gain


def _sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


def _split_heads(x, n_heads):
    b, n, _ = x.shape
    return x.reshape(b, n, n_heads, -1).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, n, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * d)


def cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy over entries with ``target >= 0``; returns ``(loss, grad_logits)``."""
    valid = targets >= 0
    count = int(valid.sum())
    if count == 0:
        raise ValueError("no supervised positions")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_z
    safe = np.where(valid, targets, 0)
    picked = np.take_along_axis(log_probs, safe[..., None], axis=-1)[..., 0]
    loss = -(picked * valid).sum() / count
    grad = np.exp(log_probs)
    np.put_along_axis(grad, safe[..., None], np.take_along_axis(grad, safe[..., None], axis=-1) - 1.0, axis=-1)
    grad = grad * (valid[..., None] / count)
    return float(loss), grad


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardResult:
    logits: np.ndarray
    loss: Optional[float]
    attention: list  # per layer (B, H, N, N)
    cache: Optional[dict] = None
    grad_logits: Optional[np.ndarray] = None


def forward(model: ToyModel, tokens: np.ndarray, segmap: SegmentMap,
            targets: Optional[np.ndarray] = None, *, keep_cache: bool = False) -> ForwardResult:
    spec, P = model.spec, model.params
    tokens = np.atleast_2d(tokens)
    b, n = tokens.shape
    if n > spec.max_seq_len:
        raise DimensionError(f"sequence length {n} exceeds max_seq_len={spec.max_seq_len}")
    if n != segmap.length:
        raise DimensionError(f"segment map covers {segmap.length} positions, sequence has {n}")
    if tokens.min() < 0 or tokens.max() >= spec.vocab_size:
        raise VocabularyError("token id outside the vocabulary")

    positions = np.arange(n)
    visual = np.zeros(n, dtype=bool)
    visual[list(segmap.img)] = True
    rows = segmap.recalibrated_rows(spec.stage, n)

    x = P["embed"][tokens]
    layers, attention = [], []
    for layer in range(spec.num_layers):
        p = f"layers.{layer}."
        x_in = x
        h, inv1 = _rmsnorm(x, P[p + "norm1"])
        q_bar = _split_heads(h @ P[p + "wq"], spec.n_heads)
        k_bar = _split_heads(h @ P[p + "wk"], spec.n_kv_heads)
        v = _split_heads(h @ P[p + "wv"], spec.n_kv_heads)
        o, probs, att_state = rave_attention(
            q_bar, k_bar, v, positions, base=spec.rope_base,
            gate=model.gate_inputs(layer, visual, rows),
        )
        merged = _merge_heads(o)
        x = x + merged @ P[p + "wo"]
        x_mid = x
        h2, inv2 = _rmsnorm(x, P[p + "norm2"])
        u = h2 @ P[p + "w1"]
        sig = _sigmoid(u)
        act = u * sig
        x = x + act @ P[p + "w2"]
        attention.append(probs)
        if keep_cache:
            layers.append(dict(x_in=x_in, h=h, inv1=inv1, att=att_state, merged=merged,
                               x_mid=x_mid, h2=h2, inv2=inv2, u=u, sig=sig, act=act))

    hf, inv_f = _rmsnorm(x, P["norm_f"])
    logits = hf @ P["lm_head"]
    loss = grad_logits = None
    if targets is not None:
        loss, grad_logits = cross_entropy(logits, targets)
    cache = None
    if keep_cache:
        cache = dict(tokens=tokens, layers=layers, x=x, hf=hf, inv_f=inv_f)
    return ForwardResult(logits, loss, attention, cache, grad_logits)


def backward(model: ToyModel, result: ForwardResult) -> dict:
    """Gradients of ``result.loss`` for every parameter, same keys as ``model.params``."""
    if result.cache is None or result.grad_logits is None:
        raise ValueError("backward needs a forward pass run with targets and keep_cache=True")
    spec, P, c = model.spec, model.params, result.cache
    grads = {}
    g_logits = result.grad_logits
    d = spec.d_model
    grads["lm_head"] = c["hf"].reshape(-1, d).T @ g_logits.reshape(-1, spec.vocab_size)
    g_x, grads["norm_f"] = _rmsnorm_backward(g_logits @ P["lm_head"].T, c["x"], c["inv_f"], P["norm_f"])

    for layer in reversed(range(spec.num_layers)):
        p = f"layers.{layer}."
        s = c["layers"][layer]
        # feed-forward branch
        grads[p + "w2"] = s["act"].reshape(-1, spec.d_ff).T @ g_x.reshape(-1, d)
        g_act = g_x @ P[p + "w2"].T
        sig, u = s["sig"], s["u"]
        g_u = g_act * (sig + u * sig * (1.0 - sig))
        grads[p + "w1"] = s["h2"].reshape(-1, d).T @ g_u.reshape(-1, spec.d_ff)
        g_h2 = g_u @ P[p + "w1"].T
        g_mid, grads[p + "norm2"] = _rmsnorm_backward(g_h2, s["x_mid"], s["inv2"], P[p + "norm2"])
        g_x = g_x + g_mid
        # attention branch
        hq = spec.n_heads * spec.d_k
        grads[p + "wo"] = s["merged"].reshape(-1, hq).T @ g_x.reshape(-1, d)
        g_o = _split_heads(g_x @ P[p + "wo"].T, spec.n_heads)
        ag = rave_attention_backward(g_o, s["att"])
        g_q, g_k, g_v = (_merge_heads(ag["q_bar"]), _merge_heads(ag["k_bar"]), _merge_heads(ag["v"]))
        h = s["h"].reshape(-1, d)
        grads[p + "wq"] = h.T @ g_q.reshape(-1, g_q.shape[-1])
        grads[p + "wk"] = h.T @ g_k.reshape(-1, g_k.shape[-1])
        grads[p + "wv"] = h.T @ g_v.reshape(-1, g_v.shape[-1])
        if spec.variant == "rave":
            dk = spec.d_k
            grads[p + "gate_q"] = ag.get("w_q", np.zeros(dk, g_x.dtype))
            grads[p + "gate_k"] = ag.get("w_k", np.zeros(dk, g_x.dtype))
        g_h = g_q @ P[p + "wq"].T + g_k @ P[p + "wk"].T + g_v @ P[p + "wv"].T
        g_in, grads[p + "norm1"] = _rmsnorm_backward(g_h, s["x_in"], s["inv1"], P[p + "norm1"])
        g_x = g_x + g_in

    g_embed = np.zeros_like(P["embed"])
    np.add.at(g_embed, c["tokens"].reshape(-1), g_x.reshape(-1, d))
    grads["embed"] = g_embed
    return {k: grads[k] for k in P}


def forward_lm(model: ToyModel, batch, *, with_trace: bool = False):
    """Logits, answer-masked cross-entropy and (optionally) per-sequence traces."""
    result = forward(model, batch.tokens, batch.segmap, batch.targets)
    traces = None
    if with_trace:
        traces = [trace_from_attention(result.attention, batch.segmap, i) for i in range(len(batch))]
    return result.logits, result.loss, traces


def trace_from_attention(attention: list, segmap: SegmentMap, index: int = 0) -> AttentionTrace:
    """Answer-step rows of a teacher-forced forward pass.

    Step ``t`` uses the query at ``prompt_length - 2 + t``, the position
    whose output predicts answer token ``t``.
    """
    num_layers, num_heads = len(attention), attention[0].shape[1]
    trace = AttentionTrace(num_layers, num_heads)
    start = segmap.prompt_length - 1
    for pos in range(start, start + len(segmap.ans)):
        rows = np.stack([a[index, :, pos, : pos + 1] for a in attention])
        trace.record(rows, pos)
    return trace


# ---------------------------------------------------------------------------
# greedy decoding


@dataclass
class DecodeResult:
    tokens: np.ndarray  # (B, max_new_tokens)
    traces: list  # one AttentionTrace per sequence
    step_logits: list  # (B, V) per step
    segmap: SegmentMap  # extended to cover the generated tokens


def greedy_decode(model: ToyModel, prompt: np.ndarray, segmap: SegmentMap,
                  max_new_tokens: int, *, trace: bool = True, use_cache: bool = True) -> DecodeResult:
    """Greedy generation; every generated token joins the answer segment.

    With ``use_cache`` the prompt is processed once and each later step runs
    a single query row against cached keys and values. Without it every step
    re-runs the full forward pass (reference path).
    """
    spec = model.spec
    prompt = np.atleast_2d(np.asarray(prompt, dtype=np.int64))
    b, n_prompt = prompt.shape
    if segmap.length != n_prompt or segmap.ans:
        raise DimensionError("segment map must describe exactly the prompt (no answer tokens yet)")
    if n_prompt + max_new_tokens > spec.max_seq_len:
        raise DimensionError(
            f"prompt of {n_prompt} plus {max_new_tokens} new tokens exceeds max_seq_len={spec.max_seq_len}"
        )
    traces = [AttentionTrace(spec.num_layers, spec.n_heads) for _ in range(b)] if trace else []
    generated = np.zeros((b, 0), dtype=np.int64)
    step_logits = []
    if max_new_tokens == 0:
        return DecodeResult(generated, traces, step_logits, segmap)

    def record(rows_per_layer, position):
        if trace:
            for i in range(b):
                traces[i].record(np.stack([r[i] for r in rows_per_layer]), position)

    if not use_cache:
        seq = prompt
        for step in range(max_new_tokens):
            cur_map = segmap.extend(step)
            res = forward(model, seq, cur_map)
            last = seq.shape[1] - 1
            record([a[:, :, last, :] for a in res.attention], last)
            logits = res.logits[:, -1]
            step_logits.append(logits)
            nxt = logits.argmax(axis=-1)
            generated = np.concatenate([generated, nxt[:, None]], axis=1)
            seq = np.concatenate([seq, nxt[:, None]], axis=1)
        return DecodeResult(generated, traces, step_logits, segmap.extend(max_new_tokens))

    logits, caches, rows = _prefill(model, prompt, segmap)
    record(rows, n_prompt - 1)
    step_logits.append(logits)
    nxt = logits.argmax(axis=-1)
    generated = np.concatenate([generated, nxt[:, None]], axis=1)
    visual = np.zeros(n_prompt, dtype=bool)
    visual[list(segmap.img)] = True
    for step in range(1, max_new_tokens):
        position = n_prompt + step - 1
        visual = np.append(visual, False)
        logits, rows = _decode_step(model, nxt, position, caches, visual)
        record(rows, position)
        step_logits.append(logits)
        nxt = logits.argmax(axis=-1)
        generated = np.concatenate([generated, nxt[:, None]], axis=1)
    return DecodeResult(generated, traces, step_logits, segmap.extend(max_new_tokens))


def _prefill(model, prompt, segmap):
    spec, P = model.spec, model.params
    n = prompt.shape[1]

    positions = np.arange(n)
    visual = np.zeros(n, dtype=bool)
    visual[list(segmap.img)] = True
    rows = segmap.recalibrated_rows(spec.stage, n)
    x = P["embed"][prompt]
    caches, last_rows = [], []
    for layer in range(spec.num_layers):
        p = f"layers.{layer}."
        h, _ = _rmsnorm(x, P[p + "norm1"])
        q_bar = _split_heads(h @ P[p + "wq"], spec.n_heads)
        k_bar = _split_heads(h @ P[p + "wk"], spec.n_kv_heads)
        v = _split_heads(h @ P[p + "wv"], spec.n_kv_heads)
        o, probs, _ = rave_attention(q_bar, k_bar, v, positions, base=spec.rope_base,
                                     gate=model.gate_inputs(layer, visual, rows))
        caches.append(dict(k_bar=k_bar, k_rot=rope_apply(k_bar, positions, spec.rope_base), v=v))
        last_rows.append(probs[:, :, -1, :])
        x = x + _merge_heads(o) @ P[p + "wo"]
        h2, _ = _rmsnorm(x, P[p + "norm2"])
        u = h2 @ P[p + "w1"]
        x = x + (u * _sigmoid(u)) @ P[p + "w2"]
    hf, _ = _rmsnorm(x[:, -1:], P["norm_f"])
    return (hf @ P["lm_head"])[:, 0], caches, last_rows


def _decode_step(model, token, position, caches, visual):
    spec, P = model.spec, model.params

    x = P["embed"][token][:, None, :]
    rows_out = []
    for layer in range(spec.num_layers):
        p = f"layers.{layer}."
        cache = caches[layer]
        h, _ = _rmsnorm(x, P[p + "norm1"])
        q_bar = _split_heads(h @ P[p + "wq"], spec.n_heads)
        k_bar = _split_heads(h @ P[p + "wk"], spec.n_kv_heads)
        v = _split_heads(h @ P[p + "wv"], spec.n_kv_heads)
        cache["k_bar"] = np.concatenate([cache["k_bar"], k_bar], axis=2)
        cache["k_rot"] = np.concatenate(
            [cache["k_rot"], rope_apply(k_bar, np.array([position]), spec.rope_base)], axis=2
        )
        cache["v"] = np.concatenate([cache["v"], v], axis=2)
        # a decoding query always emits an answer token, so it is eligible in every stage
        o, probs = rave_attention_step(
            q_bar, cache["k_bar"], cache["k_rot"], cache["v"], position, base=spec.rope_base,
            gate=model.gate_inputs(layer, visual, True),
        )
        rows_out.append(probs[:, :, 0, :])
        x = x + _merge_heads(o) @ P[p + "wo"]
        h2, _ = _rmsnorm(x, P[p + "norm2"])
        u = h2 @ P[p + "w1"]
        x = x + (u * _sigmoid(u)) @ P[p + "w2"]
    hf, _ = _rmsnorm(x, P["norm_f"])
    return (hf @ P["lm_head"])[:, 0], rows_out
