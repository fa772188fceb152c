"""Deterministic training loop, optimizers, and held-out evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import DivergenceError
from .model import ToyModel, backward, forward
from .task import TaskVocab, generate_task

log = logging.getLogger(__name__)

EVAL_SEED_OFFSET = 1_000_003


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 3e-3
    optimizer: str = "adam"  # "sgd" or "adam"
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    grad_clip: float = 1.0  # global-norm clip; 0 disables
    seed: int = 0
    num_pairs: int = 4
    vocab_size: int = 64
    n_sys: int = 2
    label_mode: str = "image"
    fixed_batch: bool = False
    eval_batches: int = 8

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)

    @property
    def vocab(self) -> TaskVocab:
        return TaskVocab(self.vocab_size, self.n_sys)

    def batch(self, step: int):
        data_seed = self.seed if self.fixed_batch else _mix(self.seed, step)
        return generate_task(data_seed, self.num_pairs, self.batch_size, self.vocab, self.label_mode)


def _mix(*ints: int) -> int:
    return int(np.random.SeedSequence(list(ints)).generate_state(1, dtype=np.uint32)[0])


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict, grads: dict) -> None:
        for name, p in params.items():
            p -= self.lr * grads[name]


class Adam:
    def __init__(self, params: dict, lr: float, beta1: float, beta2: float, eps: float):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p -= self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


def make_optimizer(cfg: TrainConfig, params: dict):
    if cfg.optimizer == "sgd":
        return SGD(cfg.lr)
    if cfg.optimizer == "adam":
        return Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


def clip_global_norm(grads: dict, max_norm: float) -> float:
    # fixed key order keeps the reduction deterministic
    total = math.sqrt(sum(float(np.sum(grads[k] * grads[k])) for k in sorted(grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for k in grads:
            grads[k] *= scale
    return total


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    steps: int = 0


def train(model: ToyModel, cfg: TrainConfig, *, log_every: int = 0) -> TrainResult:
    """Run ``cfg.steps`` updates in place; the loss at each step is taken before its update."""
    opt = make_optimizer(cfg, model.params)
    result = TrainResult()
    for step in range(cfg.steps):
        batch = cfg.batch(step)
        fwd = forward(model, batch.tokens, batch.segmap, batch.targets, keep_cache=True)
        if not math.isfinite(fwd.loss):
            last = result.losses[-1] if result.losses else float("nan")
            raise DivergenceError(f"loss became {fwd.loss} at step {step} (previous loss {last})")
        grads = backward(model, fwd)
        clip_global_norm(grads, cfg.grad_clip)
        opt.step(model.params, grads)
        result.losses.append(fwd.loss)
        result.steps = step + 1
        if log_every and (step % log_every == 0 or step == cfg.steps - 1):
            log.info("step %d loss %.5f", step, fwd.loss)
    return result


def evaluate(model: ToyModel, cfg: TrainConfig, *, batches: Optional[int] = None) -> dict:
    """Held-out loss and greedy first-token answer accuracy on unseen seeds."""
    batches = cfg.eval_batches if batches is None else batches
    correct = total = 0
    losses = []
    for i in range(batches):
        batch = generate_task(_mix(cfg.seed + EVAL_SEED_OFFSET, i), cfg.num_pairs,
                              cfg.batch_size, cfg.vocab, cfg.label_mode)
        fwd = forward(model, batch.tokens, batch.segmap, batch.targets)
        pred = fwd.logits[:, batch.segmap.prompt_length - 1].argmax(axis=-1)
        correct += int((pred == batch.answers[:, 0]).sum())
        total += len(batch)
        losses.append(fwd.loss)
    return {"loss": float(np.mean(losses)), "accuracy": correct / total}


def write_loss_curve(losses, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss"])
        for i, loss in enumerate(losses):
            writer.writerow([i, repr(float(loss))])
