"""Randomised cross-checks of the parallel expansion and merge against references."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pipeline import expand_parallel, expand_sequential, initialize, merge
from .tokens import Metric, SelectionState, TokenSet


def random_tokens(rng: np.random.Generator, n: int, d: int) -> TokenSet:
    """Small-integer tokens with duplicated rows, so distance ties are common.

    Rows are never all-zero, which keeps cosine distance defined.
    """
    data = rng.integers(-2, 3, size=(n, d)).astype(np.float64)
    if n > 2:
        dup = rng.choice(n, size=max(1, n // 4), replace=False)
        data[dup] = data[rng.integers(0, n, size=dup.size)]
    zero = ~data.any(axis=1)
    data[zero, rng.integers(0, d, size=int(zero.sum()))] = 1.0
    return TokenSet(data)


def merge_conservation_error(state: SelectionState, metric: Metric) -> float:
    """Largest absolute gap between the size-weighted merged rows and the input column sums."""
    merged, assignment = merge(state, metric)
    owned = sorted(assignment.owner)
    if owned != state.unselected.tolist():
        return float("inf")
    sizes = assignment.group_sizes(state.selected)
    weighted = (merged.data * sizes[:, None]).sum(axis=0)
    return float(np.max(np.abs(weighted - state.source.data.sum(axis=0))))


@dataclass
class TrialResult:
    trial: int
    metric: Metric
    equivalent: bool
    merge_error: float


@dataclass
class OracleReport:
    seed: int
    results: list[TrialResult] = field(default_factory=list)
    tolerance: float = 1e-9

    @property
    def failures(self) -> list[TrialResult]:
        return [r for r in self.results if not r.equivalent or not r.merge_error <= self.tolerance]

    @property
    def passed(self) -> int:
        return len(self.results) - len(self.failures)

    @property
    def ok(self) -> bool:
        return not self.failures


def run_oracle(trials: int, n: int, d: int, seed: int, metrics=tuple(Metric), tie_break: str = "lowest") -> OracleReport:
    """For each trial draw tokens, a seed set and a growth count, then check that
    one-token-per-round parallel expansion matches the sequential reference
    and that merging conserves the token sum."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if n < 1 or d < 1:
        raise ValueError("n and d must be >= 1")
    report = OracleReport(seed)
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        tokens = random_tokens(rng, n, d)
        r0 = float(rng.choice([0.2, 0.25, 0.3, 0.5]))
        state = initialize(tokens, r0)
        count = int(rng.integers(0, len(state.unselected) + 1))
        for metric in metrics:
            metric = Metric.parse(metric)
            seq = expand_sequential(state, count, metric)
            par = expand_parallel(state, count, max(count, 1), metric, tie_break=tie_break)
            report.results.append(TrialResult(trial, metric, seq.selected == par.selected, merge_conservation_error(seq, metric)))
    return report
