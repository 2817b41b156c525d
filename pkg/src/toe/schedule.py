"""Staged kept-rate schedule for token growth."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from fractions import Fraction


def _exact(x: float) -> Fraction:
    # the decimal the user wrote, so 0.4 + 0.3 is 0.7 and floor(0.7 * 10) is 7
    return Fraction(repr(float(x)))


@dataclass(frozen=True)
class GrowthSchedule:
    num_stages: int = 3
    first_stage_rate: float = 0.5
    repetition_steps: int = 2
    initial_rate: float = field(init=False)

    def __post_init__(self):
        if int(self.num_stages) != self.num_stages or self.num_stages < 1:
            raise ValueError(f"num_stages must be an integer >= 1, got {self.num_stages}")
        if not (0.0 < self.first_stage_rate <= 1.0):
            raise ValueError(f"first_stage_rate must lie in (0, 1], got {self.first_stage_rate}")
        if int(self.repetition_steps) != self.repetition_steps or self.repetition_steps < 1:
            raise ValueError(f"repetition_steps must be an integer >= 1, got {self.repetition_steps}")
        if self.num_stages == 1 and self.first_stage_rate < 1.0:
            raise ValueError("a single-stage schedule must start at first_stage_rate = 1 to reach full tokens")
        object.__setattr__(self, "initial_rate", self.first_stage_rate / 2)

    @property
    def stride(self) -> int:
        """Spacing of the uniformly-sampled seed tokens."""
        return seed_stride(self.initial_rate)


@functools.lru_cache(maxsize=64)
def seed_stride(initial_rate: float) -> int:
    """floor(1 / r_0), never below 1."""
    return max(1, math.floor(1 / _exact(initial_rate)))


@functools.lru_cache(maxsize=64)
def _exact_rates(schedule: GrowthSchedule) -> tuple[tuple[Fraction, Fraction], ...]:
    r1 = _exact(schedule.first_stage_rate)
    r = r1 / 2
    out = []
    for stage in range(1, schedule.num_stages + 1):
        mu = r1 - r1 / 2 if stage == 1 else (1 - r1) / (schedule.num_stages - 1)
        r = r + mu
        out.append((r, mu))
    assert out[-1][0] == 1
    return tuple(out)


def stage_rates(schedule: GrowthSchedule) -> list[tuple[float, float]]:
    """``(kept_rate, expansion_rate)`` for stages 1..N_g.

    The recurrence is evaluated in exact rational arithmetic and rounded once,
    so (N_g=3, r_1=0.4) gives exactly (0.4, 0.7, 1.0).
    """
    return [(float(r), float(mu)) for r, mu in _exact_rates(schedule)]


@dataclass(frozen=True)
class StageState:
    stage: int
    kept_rate: float
    target_count: int


def current_stage(iteration: int, total_iterations: int, schedule: GrowthSchedule, num_tokens: int | None = None) -> StageState:
    """Stage of ``iteration`` (1-based) out of ``total_iterations``: ceil(N_g * t / T)."""
    if total_iterations < 1:
        raise ValueError(f"total_iterations must be >= 1, got {total_iterations}")
    if not (1 <= iteration <= total_iterations):
        raise ValueError(f"iteration {iteration} outside [1, {total_iterations}]")
    g = schedule.num_stages
    stage = min(max(-(-g * iteration // total_iterations), 1), g)
    rate = stage_rates(schedule)[stage - 1][0]
    target = stage_targets(schedule, num_tokens)[stage - 1] if num_tokens is not None else None
    return StageState(stage, rate, target)


def stage_targets(schedule: GrowthSchedule, num_tokens: int) -> list[int]:
    """Cumulative kept-token counts floor(r_delta * N) per stage; the last is always N."""
    if num_tokens < 1:
        raise ValueError(f"num_tokens must be >= 1, got {num_tokens}")
    return [math.floor(rate * num_tokens) for rate, _ in _exact_rates(schedule)]


def stage_boundaries(total_iterations: int, schedule: GrowthSchedule) -> list[tuple[int, int]]:
    """Inclusive ``(first, last)`` iteration of each stage."""
    bounds = []
    first = 1
    for stage in range(1, schedule.num_stages + 1):
        # last t with ceil(g t / T) <= stage
        last = (stage * total_iterations) // schedule.num_stages
        bounds.append((first, last))
        first = last + 1
    return bounds
