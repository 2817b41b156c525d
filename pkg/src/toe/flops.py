"""Analytic FLOPs accounting for the host transformer.

Counts are multiply-accumulates per sample, the unit module profilers such
as thop report as "FLOPs".  Backward is charged at exactly twice forward.

Two conventions:

``analytic``
    parameterised layers plus the two token-by-token attention products
    (``QK^T`` and ``PV``), so attention has a quadratic term in tokens.
``module``
    parameterised layers only (patch embedding, qkv, proj, MLP, head), which
    is what a profiler hooked on ``nn.Linear``/``nn.Conv2d`` counts.
"""

from __future__ import annotations

from dataclasses import dataclass

from .pipeline import round_sizes
from .schedule import GrowthSchedule, seed_stride, stage_boundaries, stage_rates, stage_targets
from .vit import ModelConfig

CONVENTIONS = ("analytic", "module")
BACKWARD_FACTOR = 2


def _check_convention(convention: str) -> None:
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown FLOPs convention {convention!r} (expected one of {CONVENTIONS})")


def block_flops(num_tokens: int, dim: int, mlp_hidden: int, convention: str = "analytic") -> dict[str, int]:
    """Forward MACs of one block, split into the linear and quadratic parts."""
    _check_convention(convention)
    n, d = num_tokens, dim
    linear = n * (4 * d * d + 2 * d * mlp_hidden)
    quadratic = 2 * n * n * d if convention == "analytic" else 0
    return {"linear": linear, "attention_quadratic": quadratic, "total": linear + quadratic}


def _apply_after(config: ModelConfig, apply_after_block: int | None) -> int:
    if apply_after_block is not None:
        return apply_after_block
    return config.toe.apply_after_block if config.toe is not None else 1


def theoretical_flops(config: ModelConfig, kept_count: int, convention: str = "analytic", apply_after_block: int | None = None) -> tuple[int, int]:
    """(forward, backward) MACs per sample with ``kept_count`` tokens after block l."""
    _check_convention(convention)
    n = config.num_tokens
    if not (1 <= kept_count <= n):
        raise ValueError(f"kept_count must lie in [1, {n}], got {kept_count}")
    l = _apply_after(config, apply_after_block)
    fwd = config.num_patches * config.patch_dim * config.dim
    for block in range(1, config.depth + 1):
        tokens = n if block <= l else kept_count
        fwd += block_flops(tokens, config.dim, config.mlp_hidden, convention)["total"]
    fwd += config.dim * config.num_classes
    return fwd, BACKWARD_FACTOR * fwd


def selection_overhead_flops(num_tokens: int, dim: int, schedule: GrowthSchedule, stage: int, merge: bool = True) -> int:
    """Approximate MACs spent per sample on distances, top-k rounds and merging.

    Each round computes a |B| x |A| distance matrix (|B||A|d) plus row norms.
    """
    targets = stage_targets(schedule, num_tokens)
    a = len(range(1, num_tokens + 1, seed_stride(schedule.initial_rate)))
    total = 0
    for m in range(stage):
        count = max(0, targets[m] - a)
        for size in round_sizes(count, schedule.repetition_steps):
            if size == 0:
                continue
            b = num_tokens - a
            total += b * a * dim + (a + b) * dim
            a += size
    if merge:
        b = num_tokens - a
        total += b * a * dim + (a + b) * dim + b * dim
    return total


@dataclass(frozen=True)
class StageFlops:
    stage: int
    kept_rate: float
    kept_tokens: int
    iterations: int
    fwd: int
    bwd: int
    overhead: int

    @property
    def per_iteration(self) -> int:
        return self.fwd + self.bwd


def stage_kept_counts(schedule: GrowthSchedule, num_tokens: int) -> list[int]:
    """Active tokens after block l per stage; the seed set can exceed the stage-1 target."""
    seed = len(range(1, num_tokens + 1, seed_stride(schedule.initial_rate)))
    targets = stage_targets(schedule, num_tokens)
    return [max(t, seed) for t in targets]


def schedule_flops(config: ModelConfig, schedule: GrowthSchedule, total_iterations: int | None = None, convention: str = "analytic", apply_after_block: int | None = None) -> list[StageFlops]:
    """Per-stage per-sample costs.  Without ``total_iterations`` each stage counts as one
    iteration, which is the equal-split average over the schedule."""
    rates = stage_rates(schedule)
    kept = stage_kept_counts(schedule, config.num_tokens)
    if total_iterations is None:
        iters = [1] * schedule.num_stages
    else:
        iters = [last - first + 1 for first, last in stage_boundaries(total_iterations, schedule)]
    out = []
    for s in range(schedule.num_stages):
        fwd, bwd = theoretical_flops(config, kept[s], convention, apply_after_block)
        overhead = selection_overhead_flops(config.num_tokens, config.dim, schedule, s + 1)
        out.append(StageFlops(s + 1, rates[s][0], kept[s], iters[s], fwd, bwd, overhead))
    return out


def average_flops(stages: list[StageFlops]) -> float:
    """Iteration-weighted mean forward+backward MACs per sample."""
    total_iters = sum(s.iterations for s in stages)
    return sum(s.per_iteration * s.iterations for s in stages) / total_iters


def schedule_speedup(config: ModelConfig, schedule: GrowthSchedule, total_iterations: int | None = None, convention: str = "analytic", apply_after_block: int | None = None) -> float:
    """Full-token cost divided by the schedule-averaged cost."""
    fwd, bwd = theoretical_flops(config, config.num_tokens, convention, apply_after_block)
    stages = schedule_flops(config, schedule, total_iterations, convention, apply_after_block)
    return (fwd + bwd) / average_flops(stages)
