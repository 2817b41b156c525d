"""Deterministic training loop with staged token growth."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .data import Dataset, synthetic_patches
from .flops import selection_overhead_flops, theoretical_flops
from .nn import cross_entropy
from .optim import cosine_lr, make_optimizer
from .pipeline import PipelineConfig
from .schedule import current_stage, stage_boundaries
from .vit import TinyViT, TokenReduction


class TrainingDiverged(RuntimeError):
    def __init__(self, record: dict):
        super().__init__(f"non-finite loss at iteration {record['iteration']}")
        self.record = record


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"  # or "folder"
    path: Optional[str] = None
    train_samples: int = 5000
    eval_samples: int = 2000
    informative: float = 0.6
    noise: float = 1.0
    seed: int = 0


@dataclass(frozen=True)
class TrainConfig:
    total_iterations: int = 3000
    batch_size: int = 32
    optimizer: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_fraction: float = 0.05
    min_lr: float = 1e-5
    seed: int = 0
    eval_every: Optional[int] = None  # default: once per epoch
    dataset: DatasetSpec = field(default_factory=DatasetSpec)

    def __post_init__(self):
        if self.total_iterations < 1:
            raise ValueError("total_iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"optimizer must be 'sgd' or 'adamw', got {self.optimizer!r}")


@dataclass
class RunMetrics:
    records: list[dict] = field(default_factory=list)

    @property
    def train(self) -> list[dict]:
        return [r for r in self.records if r["kind"] == "train"]

    @property
    def evals(self) -> list[dict]:
        return [r for r in self.records if r["kind"] == "eval"]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def to_csv(self) -> str:
        cols = ["iteration", "stage", "kept_rate", "active_tokens", "loss", "lr", "fwd_flops", "bwd_flops", "overhead_flops"]
        lines = [",".join(cols)]
        for r in self.train:
            lines.append(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols))
        return "\n".join(lines) + "\n"


def load_datasets(spec: DatasetSpec, model_config) -> tuple[Dataset, Dataset]:
    if spec.kind == "synthetic":
        common = dict(
            num_classes=model_config.num_classes,
            image_size=model_config.image_size,
            patch_size=model_config.patch_size,
            in_channels=model_config.in_channels,
            informative=spec.informative,
            noise=spec.noise,
            seed=spec.seed,
        )
        return synthetic_patches(spec.train_samples, split=0, **common), synthetic_patches(spec.eval_samples, split=1, **common)
    if spec.kind == "folder":
        from .data import load_image_folder

        if not spec.path:
            raise ValueError("dataset kind 'folder' needs a path")
        train, val, _ = load_image_folder(spec.path, model_config.image_size, model_config.in_channels)
        return train, val
    raise ValueError(f"unknown dataset kind {spec.kind!r}")


def evaluate(model: TinyViT, dataset: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy with token expansion bypassed."""
    if len(dataset) == 0:
        raise ValueError("evaluation dataset is empty")
    pred = model.predict(dataset.images, batch_size)
    return float(np.mean(pred == dataset.labels))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches; a fresh permutation every epoch."""
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield order[start:start + batch_size]
        if n < batch_size:
            yield order


def train(
    model: TinyViT,
    config: TrainConfig,
    pipeline_config: Optional[PipelineConfig] = None,
    *,
    data: tuple[Dataset, Dataset] | None = None,
    on_record: Callable[[dict], None] | None = None,
    checkpoint_dir: Path | None = None,
) -> tuple[object, RunMetrics]:
    """Run ``config.total_iterations`` steps; returns the parameters and the metrics.

    ``pipeline_config`` replaces the model's own token-expansion settings;
    pass ``None`` to keep them.
    """
    if pipeline_config is not None:
        model.config = replace(model.config, toe=pipeline_config)
        model.reduction = TokenReduction(pipeline_config)
    mcfg = model.config
    toe = mcfg.toe
    T = config.total_iterations
    if toe is not None and T < toe.schedule.num_stages:
        raise ValueError(f"total_iterations={T} is smaller than num_stages={toe.schedule.num_stages}")

    train_set, eval_set = data if data is not None else load_datasets(config.dataset, mcfg)
    optimizer = make_optimizer(config.optimizer, model.params, config.lr, config.weight_decay)
    rng = np.random.default_rng([config.seed, 17])
    batches = _batches(len(train_set), config.batch_size, rng)
    steps_per_epoch = max(1, len(train_set) // config.batch_size)
    eval_every = config.eval_every or steps_per_epoch
    n_tokens = mcfg.num_tokens
    stage_ends = {last for _, last in stage_boundaries(T, toe.schedule)} if toe is not None else set()
    metrics = RunMetrics()

    def emit(record: dict) -> None:
        metrics.records.append(record)
        if on_record is not None:
            on_record(record)

    for t in range(1, T + 1):
        idx = next(batches)
        x, y = train_set.images[idx], train_set.labels[idx]
        model.params.zero_grad()
        logits = model.forward(x, mode="train", iteration=t, total=T)
        loss, grad = cross_entropy(logits, y)
        if toe is not None:
            st = current_stage(t, T, toe.schedule)
            stage, rate = st.stage, st.kept_rate
            overhead = selection_overhead_flops(n_tokens, mcfg.dim, toe.schedule, stage) * len(idx)
        else:
            stage, rate, overhead = 1, 1.0, 0
        fwd, bwd = theoretical_flops(mcfg, model.active_tokens)
        record = {
            "kind": "train",
            "iteration": t,
            "stage": stage,
            "kept_rate": rate,
            "active_tokens": int(model.active_tokens),
            "loss": loss,
            "lr": 0.0,
            "fwd_flops": fwd * len(idx),
            "bwd_flops": bwd * len(idx),
            "overhead_flops": overhead,
        }
        if not math.isfinite(loss):
            record.update(kind="abort", loss=repr(loss))
            emit(record)
            raise TrainingDiverged(record)
        model.backward(grad)
        lr = cosine_lr(t, T, config.lr, config.warmup_fraction, config.min_lr)
        optimizer.step(lr)
        record["lr"] = lr
        emit(record)

        if t % eval_every == 0 or t == T:
            emit({"kind": "eval", "iteration": t, "epoch": t / steps_per_epoch, "accuracy": evaluate(model, eval_set)})
        if checkpoint_dir is not None and (t in stage_ends or t == T):
            name = "final.ckpt" if t == T else f"stage{stage}.ckpt"
            model.save(Path(checkpoint_dir) / name)
    return model.params, metrics


def summarize(model: TinyViT, metrics: RunMetrics, batch_size: int) -> dict:
    """Final accuracy, total theoretical FLOPs and speedup versus full tokens."""
    cfg = model.config
    train_records = metrics.train
    total = sum(r["fwd_flops"] + r["bwd_flops"] for r in train_records)
    full = sum(theoretical_flops(cfg, cfg.num_tokens)) * batch_size * len(train_records)
    l = cfg.toe.apply_after_block if cfg.toe is not None else 1
    reduced_blocks = cfg.depth - l
    token_compute = sum(r["active_tokens"] for r in train_records) * reduced_blocks
    full_token_compute = cfg.num_tokens * len(train_records) * reduced_blocks
    evals = metrics.evals
    return {
        "final_accuracy": evals[-1]["accuracy"] if evals else None,
        "iterations": len(train_records),
        "total_flops": total,
        "full_token_flops": full,
        "speedup": full / total if total else None,
        "overhead_flops": sum(r["overhead_flops"] for r in train_records),
        "post_block_token_compute": token_compute,
        "full_post_block_token_compute": full_token_compute,
        "token_compute_reduction": 1.0 - token_compute / full_token_compute if full_token_compute else 0.0,
        "final_loss": train_records[-1]["loss"] if train_records else None,
    }
