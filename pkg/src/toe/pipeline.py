"""Initialization, widest-distribution expansion and merging of tokens.

Ties are always broken towards the lowest token position: ``np.argmax`` /
``np.argmin`` return the first extremum and the top-k uses a stable sort.
Unselected positions are kept ascending, so "first" means "lowest index".
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .schedule import GrowthSchedule, current_stage, seed_stride, stage_targets
from .tokens import IndexSet, Metric, SelectionState, TokenSet, min_distance_to_selected, pairwise_distance


@dataclass(frozen=True)
class PipelineConfig:
    schedule: GrowthSchedule = field(default_factory=GrowthSchedule)
    metric: Metric = Metric.COSINE
    apply_after_block: int = 1
    restore_indices: bool = False
    # ablation switches; the defaults give the full initialization-expansion-merging pipeline
    init_mode: str = "spatial"
    expand: bool = True
    merge: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "metric", Metric.parse(self.metric))
        if self.apply_after_block < 0:
            raise ValueError(f"apply_after_block must be >= 0, got {self.apply_after_block}")
        if self.init_mode not in ("spatial", "random"):
            raise ValueError(f"init_mode must be 'spatial' or 'random', got {self.init_mode!r}")


@dataclass(frozen=True)
class MergeAssignment:
    """Owner (a selected position) of each unselected position, both 1-based."""

    owner: Mapping[int, int]

    def group_sizes(self, selected: IndexSet) -> np.ndarray:
        """Members per output row, counting the selected token itself."""
        pos = {a: j for j, a in enumerate(selected)}
        sizes = np.ones(len(selected), dtype=np.int64)
        for a in self.owner.values():
            sizes[pos[a]] += 1
        return sizes

    def lines(self) -> list[str]:
        return [f"{b} -> {a}" for b, a in sorted(self.owner.items())]


# -- operations ---------------------------------------------------------------

def initialize(tokens: TokenSet, initial_rate: float, *, mode: str = "spatial", rng: np.random.Generator | None = None) -> SelectionState:
    """Seed set: every position ``i`` with ``i mod floor(1/r_0) == 1`` (1-based).

    ``mode="random"`` keeps position 1 and draws the rest of the same-sized
    seed set uniformly; it exists only for the initialization ablation.
    """
    if not isinstance(tokens, TokenSet):
        tokens = TokenSet(tokens)
    if not (0.0 < initial_rate <= 1.0):
        raise ValueError(f"initial rate must lie in (0, 1], got {initial_rate}")
    n = tokens.N
    stride = seed_stride(initial_rate)
    positions = np.arange(1, n + 1)
    mask = (positions % stride == 1) if stride > 1 else np.ones(n, dtype=bool)
    if mode == "random":
        # the class token (position 1) is kept so the head always sees it
        count = int(mask.sum())
        rng = rng if rng is not None else np.random.default_rng(0)
        mask = np.zeros(n, dtype=bool)
        mask[0] = True
        mask[1 + rng.choice(n - 1, size=count - 1, replace=False)] = True
    elif mode != "spatial":
        raise ValueError(f"unknown initialization mode {mode!r}")
    return SelectionState.from_mask(tokens, mask)


def _check_count(state: SelectionState, count: int) -> None:
    if count < 0:
        raise ValueError(f"expansion count must be >= 0, got {count}")
    if count > len(state.unselected):
        raise ValueError(f"cannot expand by {count}: only {len(state.unselected)} unselected tokens remain")


def _importance(state: SelectionState, metric: Metric) -> np.ndarray:
    return min_distance_to_selected(pairwise_distance(state.B, state.A, metric))


def expand_sequential(state: SelectionState, count: int, metric=Metric.COSINE) -> SelectionState:
    """Move the single most distant unselected token into A, ``count`` times.

    This is the brute-force reference for :func:`expand_parallel`.
    """
    _check_count(state, count)
    metric = Metric.parse(metric)
    for _ in range(count):
        scores = _importance(state, metric)
        winner = state.unselected.zero_based()[int(np.argmax(scores))]
        mask = state.mask()
        mask[winner] = True
        state = SelectionState.from_mask(state.source, mask)
    return state


def round_sizes(count: int, k: int) -> list[int]:
    """Split ``count`` into ``k`` rounds; the remainder goes one each to the final rounds."""
    if k < 1:
        raise ValueError(f"repetition steps must be >= 1, got {k}")
    base, extra = divmod(count, k)
    return [base + (1 if r >= k - extra else 0) for r in range(k)]


def _top_positions(scores: np.ndarray, size: int, tie_break: str) -> np.ndarray:
    if tie_break == "lowest":
        order = np.argsort(-scores, kind="stable")
    elif tie_break == "highest":
        # deliberately wrong order, used to prove the oracle harness catches it
        order = (scores.size - 1 - np.argsort(-scores[::-1], kind="stable"))
    else:
        raise ValueError(f"unknown tie_break {tie_break!r}")
    return order[:size]


def expand_parallel(state: SelectionState, count: int, k: int, metric=Metric.COSINE, *, tie_break: str = "lowest") -> SelectionState:
    """Grow A by ``count`` tokens in ``k`` rounds of top-n selection.

    Distances are computed once per round; the round's top scorers move
    together.  With one token per round this reduces to the sequential rule.
    """
    _check_count(state, count)
    metric = Metric.parse(metric)
    for size in round_sizes(count, k):
        if size == 0:
            continue
        scores = _importance(state, metric)
        winners = state.unselected.zero_based()[_top_positions(scores, size, tie_break)]
        mask = state.mask()
        mask[winners] = True
        state = SelectionState.from_mask(state.source, mask)
    return state


def merge_groups(state: SelectionState, metric=Metric.COSINE) -> np.ndarray:
    """For each unselected token, the row (0-based, into A) of its nearest selected token."""
    if len(state.selected) < 1:
        raise ValueError("merging needs at least one selected token")
    if len(state.unselected) == 0:
        return np.zeros(0, dtype=np.int64)
    D = pairwise_distance(state.B, state.A, metric).values
    return np.argmin(D, axis=1)


def merge(state: SelectionState, metric=Metric.COSINE) -> tuple[TokenSet, MergeAssignment]:
    """Average every unselected token into its nearest selected token.

    Output row ``j`` is the plain mean of ``A_j`` and the B tokens assigned to
    it, in the order of the selected positions.
    """
    groups = merge_groups(state, metric)
    sums = state.A.copy()
    counts = np.ones(len(state.selected))
    if groups.size:
        np.add.at(sums, groups, state.B)
        np.add.at(counts, groups, 1.0)
    sel = state.selected.tolist()
    owner = {b: sel[j] for b, j in zip(state.unselected, groups.tolist())}
    return TokenSet(sums / counts[:, None]), MergeAssignment(owner)


def select(tokens: TokenSet, config: PipelineConfig, stage: int, *, rng: np.random.Generator | None = None, tie_break: str = "lowest") -> SelectionState:
    """Initialization plus ``stage`` rounds of expansion, without merging."""
    schedule = config.schedule
    if not (1 <= stage <= schedule.num_stages):
        raise ValueError(f"stage {stage} outside [1, {schedule.num_stages}]")
    if config.init_mode == "random" and rng is None:
        rng = np.random.default_rng(config.seed)
    state = initialize(tokens, schedule.initial_rate, mode=config.init_mode, rng=rng)
    targets = stage_targets(schedule, tokens.N)
    for m in range(stage):
        # the seed set may already exceed the stage-1 target; then nothing is added
        count = max(0, targets[m] - len(state.selected))
        if not count:
            continue
        if config.expand:
            state = expand_parallel(state, count, schedule.repetition_steps, config.metric, tie_break=tie_break)
        else:
            rng = rng if rng is not None else np.random.default_rng(config.seed)
            mask = state.mask()
            mask[rng.choice(state.unselected.zero_based(), size=count, replace=False)] = True
            state = SelectionState.from_mask(tokens, mask)
    return state


def run_pipeline(tokens: TokenSet, config: PipelineConfig, iteration: int, total: int, *, rng: np.random.Generator | None = None) -> tuple[TokenSet, SelectionState, MergeAssignment]:
    """Reduce ``tokens`` to the kept count of the training stage at ``iteration``."""
    if not isinstance(tokens, TokenSet):
        tokens = TokenSet(tokens)
    stage = current_stage(iteration, total, config.schedule).stage
    state = select(tokens, config, stage, rng=rng)
    if config.merge:
        merged, assignment = merge(state, config.metric)
    else:
        merged, assignment = TokenSet(state.A), MergeAssignment({})
    return merged, state, assignment


def restore_indices(reduced: TokenSet, selected: IndexSet, original_n: int) -> TokenSet:
    """Scatter reduced rows back to their original positions; other rows are zero."""
    data = reduced.data if isinstance(reduced, TokenSet) else np.asarray(reduced, dtype=np.float64)
    if len(selected) != data.shape[0]:
        raise ValueError(f"{len(selected)} positions given for {data.shape[0]} reduced tokens")
    selected.check_bounds(original_n)
    out = np.zeros((original_n, data.shape[1]))
    out[selected.zero_based()] = data
    return TokenSet(out)
