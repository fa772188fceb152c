"""Pair-gated visual attention recalibration in a minimal numpy transformer."""

from .core import (
    AttentionConfig,
    CausalMask,
    attention_logits,
    gqa_expand,
    masked_softmax_rows,
    rope_apply,
    standard_attention_forward,
)
from .diagnostics import AttentionTrace, MassProfile, SegmentMap
from .gate import (
    GateParams,
    HeadPartition,
    gate_gradients,
    gate_scores,
    pair_gate,
    post_softmax_recalibrate,
    rave_attention_forward,
    recalibrate_logits,
    select_heads,
)
from .model import ToyModel, ToyModelSpec, forward_lm, greedy_decode

__version__ = "0.1.0"
