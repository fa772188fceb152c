"""Seeded synthetic key-value retrieval sequences with a pseudo-visual segment.

Each sequence is ``[system] [k key/value pairs] [one queried key] [answer]``.
The image segment holds the pairs, so the answer can only be recovered by
looking it up there (``label_mode="image"``). ``label_mode="question"``
instead derives the answer from the queried key alone, giving supervision
that never needs the image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .diagnostics import SegmentMap
from .errors import VocabularyError


@dataclass(frozen=True)
class TaskVocab:
    vocab_size: int = 64
    n_sys: int = 2

    def __post_init__(self):
        if self.vocab_size - self.n_sys < 2:
            raise VocabularyError("vocabulary too small for key and value ranges")

    @property
    def sys_ids(self) -> np.ndarray:
        return np.arange(self.n_sys)

    @property
    def key_ids(self) -> np.ndarray:
        half = (self.vocab_size - self.n_sys) // 2
        return np.arange(self.n_sys, self.n_sys + half)

    @property
    def value_ids(self) -> np.ndarray:
        return np.arange(self.key_ids[-1] + 1, self.vocab_size)


@dataclass
class ToyBatch:
    tokens: np.ndarray  # (B, N) int64, answer included
    segmap: SegmentMap  # shared by every sequence in the batch
    answers: np.ndarray  # (B, n_ans)
    seed: int
    num_pairs: int
    label_mode: str = "image"

    @property
    def targets(self) -> np.ndarray:
        """Next-token targets, ``-1`` wherever the next token is not an answer token."""
        b, n = self.tokens.shape
        out = np.full((b, n), -1, dtype=np.int64)
        for pos in self.segmap.ans:
            out[:, pos - 1] = self.tokens[:, pos]
        return out

    @property
    def prompts(self) -> np.ndarray:
        return self.tokens[:, : self.segmap.prompt_length]

    @property
    def prompt_segmap(self) -> SegmentMap:
        return self.segmap.restricted(self.segmap.prompt_length)

    @property
    def segmaps(self) -> list:
        return [self.segmap] * self.tokens.shape[0]

    def __len__(self) -> int:
        return self.tokens.shape[0]


def _question_rule(key: np.ndarray, vocab: TaskVocab) -> np.ndarray:
    values = vocab.value_ids
    offset = key - vocab.key_ids[0]
    return values[(7 * offset + 3) % len(values)]


def generate_task(seed: int, num_pairs: int, batch_size: int = 32,
                  vocab: Optional[TaskVocab] = None, label_mode: str = "image") -> ToyBatch:
    if num_pairs < 1:
        raise ValueError("num_pairs must be at least 1")
    vocab = vocab or TaskVocab()
    keys_pool, values_pool = vocab.key_ids, vocab.value_ids
    if num_pairs > len(keys_pool):
        raise VocabularyError(
            f"{num_pairs} distinct keys requested but only {len(keys_pool)} key tokens exist"
        )
    if label_mode not in ("image", "question"):
        raise ValueError(f"unknown label mode {label_mode!r}")

    rng = np.random.default_rng(seed)
    keys = np.stack([rng.choice(keys_pool, size=num_pairs, replace=False) for _ in range(batch_size)])
    values = rng.choice(values_pool, size=(batch_size, num_pairs))
    pick = rng.integers(0, num_pairs, size=batch_size)
    rows = np.arange(batch_size)
    question = keys[rows, pick]
    if label_mode == "image":
        answer = values[rows, pick]
    else:
        answer = _question_rule(question, vocab)

    image = np.empty((batch_size, 2 * num_pairs), dtype=np.int64)
    image[:, 0::2] = keys
    image[:, 1::2] = values
    sys_tokens = np.broadcast_to(vocab.sys_ids, (batch_size, vocab.n_sys))
    tokens = np.concatenate(
        [sys_tokens, image, question[:, None], answer[:, None]], axis=1
    ).astype(np.int64)
    segmap = SegmentMap.from_lengths(vocab.n_sys, 2 * num_pairs, 1, 1)
    return ToyBatch(tokens, segmap, answer[:, None].astype(np.int64), seed, num_pairs, label_mode)


def lookup_answer(tokens: np.ndarray, segmap: SegmentMap) -> int:
    """Rule-based oracle: find the queried key in the image span, return its value."""
    img = [tokens[i] for i in segmap.img]
    key = tokens[segmap.que[-1]]
    for j in range(0, len(img) - 1, 2):
        if img[j] == key:
            return int(img[j + 1])
    raise LookupError(f"key {key} does not occur in the image span")


def strip_system(batch: ToyBatch) -> ToyBatch:
    """Same sequences with the system segment removed (empty ``sys`` span)."""
    n_sys = len(batch.segmap.sys)
    seg = batch.segmap
    new_map = SegmentMap.from_lengths(0, len(seg.img), len(seg.que), len(seg.ans))
    return ToyBatch(batch.tokens[:, n_sys:].copy(), new_map, batch.answers, batch.seed,
                    batch.num_pairs, batch.label_mode)
