"""Segment bookkeeping, attention traces, and segment-wise attention mass.

Positions are 0-based throughout. Decoding steps are 1-based: step ``t`` is
the forward pass that emits the ``t``-th answer token, and its query is the
last position of the sequence at that moment.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError, TraceError

SEGMENTS = ("sys", "img", "que", "ans")
CURVE_HEADER = ["step", "alpha_sys", "alpha_img", "alpha_que", "alpha_ans"]


@dataclass(frozen=True)
class SegmentMap:
    """Partition of positions ``0..length-1`` into system/image/question/answer."""

    sys: tuple
    img: tuple
    que: tuple
    ans: tuple

    def __post_init__(self):
        for name in SEGMENTS:
            object.__setattr__(self, name, tuple(sorted(int(i) for i in getattr(self, name))))
        everything = [i for name in SEGMENTS for i in getattr(self, name)]
        if len(set(everything)) != len(everything):
            raise ValueError("segments overlap")
        if sorted(everything) != list(range(len(everything))):
            raise ValueError("segments must cover 0..N-1 exactly")
        prefill = self.sys + self.img + self.que
        if self.ans and prefill and min(self.ans) < max(prefill):
            raise ValueError("answer positions must follow every prefill position")

    @classmethod
    def from_lengths(cls, n_sys: int, n_img: int, n_que: int, n_ans: int = 0) -> "SegmentMap":
        bounds = np.cumsum([0, n_sys, n_img, n_que, n_ans])
        spans = [tuple(range(bounds[i], bounds[i + 1])) for i in range(4)]
        return cls(*spans)

    @property
    def length(self) -> int:
        return len(self.sys) + len(self.img) + len(self.que) + len(self.ans)

    @property
    def prompt_length(self) -> int:
        return self.length - len(self.ans)

    def indices(self, segment: str) -> tuple:
        return getattr(self, segment)

    def labels(self) -> np.ndarray:
        """Segment id (index into ``SEGMENTS``) of every position."""
        out = np.empty(self.length, dtype=np.int64)
        for sid, name in enumerate(SEGMENTS):
            out[list(getattr(self, name))] = sid
        return out

    def extend(self, n_new: int) -> "SegmentMap":
        """Append ``n_new`` generated answer tokens."""
        start = self.length
        return SegmentMap(self.sys, self.img, self.que, self.ans + tuple(range(start, start + n_new)))

    def restricted(self, n: int) -> "SegmentMap":
        """Map of the first ``n`` positions (later positions dropped)."""
        return SegmentMap(*(tuple(i for i in getattr(self, s) if i < n) for s in SEGMENTS))

    def recalibrated_rows(self, stage: str, n: Optional[int] = None) -> np.ndarray:
        """Query rows eligible for gating under ``stage``.

        ``decode_only`` keeps the rows whose next-token prediction is an
        answer token: every position from the last prompt token onward.
        """
        n = self.length if n is None else n
        if stage == "prefill_and_decode":
            return np.ones(n, dtype=bool)
        if stage == "decode_only":
            return np.arange(n) >= self.prompt_length - 1
        raise ValueError(f"unknown stage {stage!r}")

    def to_dict(self) -> dict:
        return {name: list(getattr(self, name)) for name in SEGMENTS}

    @classmethod
    def from_dict(cls, data: dict) -> "SegmentMap":
        return cls(*(data.get(name, []) for name in SEGMENTS))


@dataclass
class AttentionTrace:
    """Attention rows of every decoding step, stored as ``(L, H, N(t))`` float32."""

    num_layers: int
    num_heads: int
    rows: list = field(default_factory=list)
    positions: list = field(default_factory=list)

    def record(self, step_rows: np.ndarray, position: int) -> None:
        step_rows = np.asarray(step_rows)
        if step_rows.shape[:2] != (self.num_layers, self.num_heads):
            raise DimensionError(
                f"expected ({self.num_layers}, {self.num_heads}, N) rows, got {step_rows.shape}"
            )
        if step_rows.shape[2] != position + 1:
            raise DimensionError("a trace row must cover positions 0..query position")
        self.rows.append(step_rows.astype(np.float32))
        self.positions.append(int(position))

    @property
    def num_steps(self) -> int:
        return len(self.rows)

    def step(self, t: int) -> np.ndarray:
        if not 1 <= t <= len(self.rows):
            raise TraceError(f"step {t} was not recorded (have {len(self.rows)})")
        return self.rows[t - 1]


@dataclass
class MassProfile:
    step: int
    alpha: np.ndarray  # (4,) in SEGMENTS order
    per_layer: Optional[np.ndarray] = None  # (L, 4)

    def as_dict(self) -> dict:
        return dict(zip(SEGMENTS, self.alpha.tolist()))


def _segment_sums(rows: np.ndarray, segmap: SegmentMap) -> np.ndarray:
    # rows (..., n); sum each segment's columns in float64
    n = rows.shape[-1]
    restricted = segmap.restricted(n)
    if restricted.length != n:
        raise TraceError(f"segment map covers {segmap.length} positions, row needs {n}")
    rows = rows.astype(np.float64)
    return np.stack(
        [rows[..., list(getattr(restricted, s))].sum(axis=-1) for s in SEGMENTS], axis=-1
    )


def segment_mass_layer_resolved(trace: AttentionTrace, segmap: SegmentMap, t: int,
                                layer: Optional[int] = None) -> np.ndarray:
    """Head-averaged segment mass at step ``t``: ``(4,)`` for one layer or ``(L, 4)``."""
    per_head = _segment_sums(trace.step(t), segmap)  # (L, H, 4)
    per_layer = per_head.mean(axis=1)
    return per_layer if layer is None else per_layer[layer]


def segment_mass_layer_avg(trace: AttentionTrace, segmap: SegmentMap, t: int) -> np.ndarray:
    """Segment mass at step ``t`` averaged over all layers and heads."""
    per_head = _segment_sums(trace.step(t), segmap)
    return per_head.reshape(-1, len(SEGMENTS)).sum(axis=0) / (trace.num_layers * trace.num_heads)


def profiles_from_trace(trace: AttentionTrace, segmap: SegmentMap,
                        resolved: bool = True) -> list:
    if trace.num_steps == 0:
        raise TraceError("trace has no decoding steps")
    out = []
    for t in range(1, trace.num_steps + 1):
        per_layer = segment_mass_layer_resolved(trace, segmap, t) if resolved else None
        out.append(MassProfile(t, segment_mass_layer_avg(trace, segmap, t), per_layer))
    return out


# ---------------------------------------------------------------------------
# CSV exchange


def _fmt(x: float) -> str:
    return format(float(x), ".10g")


class _Sink:
    """Open a path for text writing, or pass through a file-like object."""

    def __init__(self, sink):
        self.sink = sink
        self.handle = None

    def __enter__(self):
        if hasattr(self.sink, "write"):
            return self.sink
        path = os.fspath(self.sink)
        try:
            self.handle = open(path, "w", encoding="utf-8", newline="")
        except OSError as exc:
            raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}", path) from exc
        return self.handle

    def __exit__(self, *exc):
        if self.handle is not None:
            self.handle.close()


def export_dilution_curve(profiles: Sequence[MassProfile], sink) -> None:
    """Write ``step,alpha_sys,alpha_img,alpha_que,alpha_ans`` with one row per step."""
    if not profiles:
        raise TraceError("need at least one decoding step")
    with _Sink(sink) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CURVE_HEADER)
        for p in profiles:
            writer.writerow([p.step] + [_fmt(a) for a in p.alpha])


def export_layer_heatmap(profiles: Sequence[MassProfile], segment: str, sink) -> None:
    """Write a headerless ``layers x steps`` matrix of one segment's mass."""
    if segment not in SEGMENTS:
        raise ValueError(f"unknown segment {segment!r}")
    if not profiles:
        raise TraceError("need at least one decoding step")
    if any(p.per_layer is None for p in profiles):
        raise TraceError("layer-resolved masses are missing")
    sid = SEGMENTS.index(segment)
    grid = np.stack([p.per_layer[:, sid] for p in profiles], axis=1)
    with _Sink(sink) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in grid:
            writer.writerow([_fmt(x) for x in row])


def _read_text(source) -> str:
    if hasattr(source, "read"):
        return source.read()
    with open(source, encoding="utf-8") as fh:
        return fh.read()


def read_dilution_curve(source) -> list:
    reader = csv.reader(io.StringIO(_read_text(source)))
    header = next(reader)
    if header != CURVE_HEADER:
        raise ValueError(f"unexpected header {header}")
    return [MassProfile(int(row[0]), np.array([float(x) for x in row[1:]])) for row in reader if row]


def read_layer_heatmap(source) -> np.ndarray:
    rows = [r for r in csv.reader(io.StringIO(_read_text(source))) if r]
    return np.array([[float(x) for x in r] for r in rows])


def write_sidecar(path, *, segmap: Optional[SegmentMap], config: dict, seed, **extra) -> None:
    payload = {"segment_map": segmap.to_dict() if segmap is not None else None,
               "config": config, "seed": seed}
    payload.update(extra)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}", os.fspath(path)) from exc


def mean_answer_mass(profiles: Iterable[MassProfile], segment: str = "img") -> float:
    sid = SEGMENTS.index(segment)
    values = [p.alpha[sid] for p in profiles]
    return float(np.mean(values)) if values else float("nan")
