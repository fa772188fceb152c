"""Run configurations and the train / trace / ablate drivers behind the CLI.

Every driver validates its whole configuration before touching the output
directory and writes artifacts only after the computation succeeds.
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .diagnostics import (
    SEGMENTS,
    MassProfile,
    export_dilution_curve,
    export_layer_heatmap,
    profiles_from_trace,
    write_sidecar,
)
from .errors import ConfigurationError
from .model import ToyModel, ToyModelSpec, greedy_decode, init_params
from .task import generate_task, strip_system
from .train import TrainConfig, evaluate, train, write_loss_curve

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "RAVE_OUTPUT_ROOT"
MAIN_VARIANT = {"location": "pre_softmax", "form": "additive", "head_ratio": 0.25,
                "stage": "prefill_and_decode"}
HEAD_RATIOS = (0.25, 0.5, 0.75, 1.0)
RESULT_COLUMNS = ["name", "location", "form", "head_ratio", "stage", "status", "final_loss",
                  "eval_loss", "accuracy", "mean_alpha_img", "error"]


@dataclass(frozen=True)
class TraceSpec:
    seed: int = 7
    num_prompts: int = 4
    max_new_tokens: int = 8
    drop_system: bool = False
    label_mode: Optional[str] = None  # defaults to the training task's mode


@dataclass(frozen=True)
class RunConfig:
    model: ToyModelSpec = field(default_factory=ToyModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    trace: TraceSpec = field(default_factory=TraceSpec)
    model_seed: int = 0
    gate_init: str = "half"
    gate_std: float = 0.02
    grid: str = "axes"
    name: str = "run"

    def __post_init__(self):
        if self.gate_init not in ("zero", "half", "normal"):
            raise ConfigurationError(f"unknown gate_init {self.gate_init!r}")
        if self.grid not in ("axes", "full"):
            raise ConfigurationError(f"unknown ablation grid {self.grid!r}")
        if self.train.vocab_size != self.model.vocab_size:
            raise ConfigurationError("task vocab_size differs from model vocab_size")
        seq_len = self.train.n_sys + 2 * self.train.num_pairs + 2
        if seq_len > self.model.max_seq_len:
            raise ConfigurationError(f"task sequences ({seq_len}) exceed max_seq_len")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict, base_dir: Optional[Path] = None) -> "RunConfig":
        data = dict(data)
        if "config" in data and isinstance(data["config"], dict):  # a run sidecar
            data = dict(data["config"])
        model = data.pop("model", {})
        if isinstance(model, str):
            path = Path(model)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            model = json.loads(path.read_text(encoding="utf-8"))
        try:
            return cls(
                model=ToyModelSpec.from_dict(model),
                train=TrainConfig.from_dict(data.pop("train", {})),
                trace=TraceSpec(**data.pop("trace", {})),
                **data,
            )
        except TypeError as exc:
            raise ConfigurationError(f"bad run configuration: {exc}") from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data, base_dir=path.parent)

    def with_variant(self, **switches) -> "RunConfig":
        model = dataclasses.replace(self.model, variant="rave", **switches)
        return dataclasses.replace(self, model=model)


def resolve_output_dir(out: Optional[str], name: str) -> Path:
    if out:
        return Path(out)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if not root:
        raise ConfigurationError(f"no output directory given and ${OUTPUT_ROOT_ENV} is unset")
    return Path(root) / name


def _fmt(x) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# train


def build_model(cfg: RunConfig) -> ToyModel:
    params = init_params(cfg.model, cfg.model_seed, gate_init=cfg.gate_init, gate_std=cfg.gate_std)
    return ToyModel(cfg.model, params)


def run_train(cfg: RunConfig, out_dir: Path) -> dict:
    model = build_model(cfg)
    result = train(model, cfg.train)
    metrics = evaluate(model, cfg.train)
    metrics["final_loss"] = result.losses[-1] if result.losses else float("nan")

    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "checkpoint.bin", model.params, spec=cfg.model.to_dict(),
                    step=result.steps, meta={"train": cfg.train.to_dict()})
    write_loss_curve(result.losses, out_dir / "loss.csv")
    segmap = cfg.train.batch(0).segmap
    write_sidecar(out_dir / "run.json", segmap=segmap, config=cfg.to_dict(),
                  seed={"model": cfg.model_seed, "data": cfg.train.seed},
                  command="train", attention=cfg.model.attention_config().to_dict(),
                  results=metrics)
    return metrics


# ---------------------------------------------------------------------------
# trace


def load_model(checkpoint) -> tuple:
    params, spec_dict, step, meta = load_checkpoint(checkpoint)
    spec = ToyModelSpec.from_dict(spec_dict)
    expected = init_params(spec, 0, gate_init="zero")
    if set(expected) != set(params) or any(expected[k].shape != params[k].shape for k in expected):
        raise ConfigurationError(f"{checkpoint}: tensors do not match the stored model spec")
    return ToyModel(spec, params), meta


def trace_profiles(model: ToyModel, cfg: RunConfig) -> tuple:
    """Decode the configured prompts and return ``(mean_profiles, prompt_segmap, per_prompt)``."""
    tspec = cfg.trace
    label_mode = tspec.label_mode or cfg.train.label_mode
    batch = generate_task(tspec.seed, cfg.train.num_pairs, tspec.num_prompts, cfg.train.vocab, label_mode)
    if tspec.drop_system:
        batch = strip_system(batch)
    prompt_map = batch.prompt_segmap
    decoded = greedy_decode(model, batch.prompts, prompt_map, tspec.max_new_tokens, trace=True)
    per_prompt = [profiles_from_trace(tr, decoded.segmap) for tr in decoded.traces]
    mean = []
    for t in range(tspec.max_new_tokens):
        alpha = np.mean([p[t].alpha for p in per_prompt], axis=0)
        per_layer = np.mean([p[t].per_layer for p in per_prompt], axis=0)
        mean.append(MassProfile(t + 1, alpha, per_layer))
    return mean, prompt_map, per_prompt


def run_trace(cfg: RunConfig, checkpoint, out_dir: Path, *, check_spec: bool = True) -> list:
    model, _ = load_model(checkpoint)
    if check_spec and model.spec != cfg.model:
        raise ConfigurationError("model spec in the config does not match the checkpoint")
    if cfg.trace.max_new_tokens < 1:
        raise ConfigurationError("tracing needs at least one decoding step")
    profiles, prompt_map, _ = trace_profiles(model, cfg)

    out_dir.mkdir(parents=True, exist_ok=True)
    export_dilution_curve(profiles, out_dir / "curve.csv")
    for seg in SEGMENTS:
        export_layer_heatmap(profiles, seg, out_dir / f"heatmap_{seg}.csv")
    write_sidecar(out_dir / "trace.json", segmap=prompt_map, config=cfg.to_dict(),
                  seed=cfg.trace.seed, command="trace", checkpoint=str(checkpoint),
                  attention=model.spec.attention_config().to_dict())
    return profiles


# ---------------------------------------------------------------------------
# ablate


def ablation_variants(grid: str) -> list:
    """``(name, switches)`` pairs; ``axes`` changes one axis of the main setting at a time."""
    if grid == "full":
        out = []
        for loc, form, p, stage in itertools.product(
            ("pre_softmax", "post_softmax"), ("additive", "multiplicative"), HEAD_RATIOS,
            ("prefill_and_decode", "decode_only"),
        ):
            name = f"{loc.split('_')[0]}-{form[:3]}-p{p}-{'pd' if stage.startswith('prefill') else 'dec'}"
            out.append((name, dict(location=loc, form=form, head_ratio=p, stage=stage)))
        return out
    if grid == "axes":
        out = [("main", dict(MAIN_VARIANT)),
               ("post_softmax", dict(MAIN_VARIANT, location="post_softmax")),
               ("multiplicative", dict(MAIN_VARIANT, form="multiplicative"))]
        out += [(f"p{p}", dict(MAIN_VARIANT, head_ratio=p)) for p in HEAD_RATIOS[1:]]
        out.append(("decode_only", dict(MAIN_VARIANT, stage="decode_only")))
        return out
    raise ConfigurationError(f"unknown ablation grid {grid!r}")


def mean_image_mass(model: ToyModel, cfg: RunConfig) -> float:
    _, _, per_prompt = trace_profiles(model, cfg)
    return float(np.mean([p.alpha[SEGMENTS.index("img")] for prof in per_prompt for p in prof]))


def run_ablation_cell(cfg: RunConfig, out_dir: Path) -> dict:
    metrics = run_train(cfg, out_dir)
    model, _ = load_model(out_dir / "checkpoint.bin")
    metrics["mean_alpha_img"] = mean_image_mass(model, cfg)
    return metrics


def run_ablate(cfg: RunConfig, out_dir: Path, variants: Optional[list] = None) -> list:
    variants = ablation_variants(cfg.grid) if variants is None else variants
    cells = []
    for name, switches in variants:
        cells.append((name, switches, cfg.with_variant(**switches)))  # validates every cell first

    rows = []
    for name, switches, cell_cfg in cells:
        row = {"name": name, **switches}
        try:
            metrics = run_ablation_cell(cell_cfg, out_dir / "cells" / name)
            row.update(status="ok", error="", **{k: _fmt(metrics[k]) for k in
                                                 ("final_loss", "loss", "accuracy", "mean_alpha_img")})
            row["eval_loss"] = row.pop("loss")
        except Exception as exc:  # one failing cell must not stop the grid
            log.error("ablation cell %s failed: %s", name, exc)
            row.update(status="error", final_loss="", eval_loss="", accuracy="",
                       mean_alpha_img="", error=f"{type(exc).__name__}: {exc}")
        rows.append(row)

    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "results.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in RESULT_COLUMNS})
    write_sidecar(out_dir / "ablate.json", segmap=cfg.train.batch(0).segmap, config=cfg.to_dict(),
                  seed={"model": cfg.model_seed, "data": cfg.train.seed}, command="ablate",
                  variants=[{"name": n, **s} for n, s in variants])
    return rows
