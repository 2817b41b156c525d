"""Acceptance criteria, one test each.

Every test records a single ``PASS``/``FAIL`` line that pytest prints in an
"acceptance criteria" section at the end of the run::

    pytest tests/test_acceptance.py -v

The desk-scale training criterion (7) trains two models and takes a few
minutes on one CPU core.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from toe.cli import main
from toe.config import load_config, parse_config
from toe.nn import cross_entropy
from toe.oracle import merge_conservation_error, run_oracle
from toe.pipeline import PipelineConfig, expand_sequential, initialize, merge, run_pipeline, select
from toe.schedule import GrowthSchedule, stage_rates
from toe.tokens import Metric, TokenSet, pairwise_distance
from toe.trainer import summarize, train
from toe.vit import ModelConfig, TinyViT

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def report(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
    assert ok, detail


def test_1_oracle_equivalence():
    start = time.perf_counter()
    rep = run_oracle(trials=100, n=64, d=16, seed=7)
    small = run_oracle(trials=100, n=9, d=2, seed=8)
    elapsed = time.perf_counter() - start
    results = rep.results + small.results
    matches = sum(r.equivalent for r in results)
    per_metric = {m: sum(r.metric is m for r in results) for m in Metric}
    ok = matches == len(results) and min(per_metric.values()) >= 100 and elapsed < 60
    report(1, ok, f"parallel(k=count) == sequential on {matches}/{len(results)} instances "
                  f"({len(results) // 3} per metric, N<=64, d<=16) in {elapsed:.1f}s (< 60s)")


def test_2_schedule_rates():
    half = stage_rates(GrowthSchedule(3, 0.5))
    four = stage_rates(GrowthSchedule(3, 0.4))
    ok = (
        [r for r, _ in half] == [0.5, 0.75, 1.0]
        and [m for _, m in half] == [0.25, 0.25, 0.25]
        and [r for r, _ in four] == [0.4, 0.7, 1.0]
    )
    report(2, ok, f"r1=0.5 -> rates {[r for r, _ in half]}, mu {[m for _, m in half]}; r1=0.4 -> rates {[r for r, _ in four]}")


def test_3_merge_conservation():
    worst, owned_once, trials = 0.0, True, 0
    for trial in range(200):
        rng = np.random.default_rng([3, trial])
        n, d = int(rng.integers(1, 65)), int(rng.integers(1, 17))
        ts = TokenSet(rng.standard_normal((n, d)) * rng.uniform(0.1, 10))
        metric = list(Metric)[trial % 3]
        state = initialize(ts, float(rng.choice([0.1, 0.2, 0.25, 0.5])))
        state = expand_sequential(state, int(rng.integers(0, len(state.unselected) + 1)), metric)
        worst = max(worst, merge_conservation_error(state, metric))
        _, assignment = merge(state, metric)
        owned_once &= sorted(assignment.owner) == state.unselected.tolist()
        trials += 1
    A = np.random.default_rng(0).standard_normal((5, 3))
    identity, _ = merge(initialize(TokenSet(A), 1.0))
    ok = worst <= 1e-9 and owned_once and np.array_equal(identity.data, A)
    report(3, ok, f"max |weighted merged sum - input sum| = {worst:.2e} (<= 1e-9) over {trials} instances; "
                  f"each unselected owned once: {owned_once}; empty B identity: {np.array_equal(identity.data, A)}")


def test_4_final_stage_identity():
    rng = np.random.default_rng(4)
    ts = TokenSet(rng.standard_normal((197, 16)))
    merged, _, _ = run_pipeline(ts, PipelineConfig(), 300, 300)
    cfg = dict(image_size=16, patch_size=4, in_channels=1, depth=2, dim=32, heads=2, num_classes=10)
    x = rng.standard_normal((8, 1, 16, 16))
    with_toe = TinyViT(ModelConfig(**cfg, toe=PipelineConfig()), seed=1).forward(x, "train", 300, 300)
    without = TinyViT(ModelConfig(**cfg), seed=1).forward(x, "train")
    gap = float(np.max(np.abs(with_toe - without)))
    ok = merged == ts and gap <= 1e-6
    report(4, ok, f"run_pipeline at final stage returns input exactly: {merged == ts}; max train-logit gap vs ToE off = {gap:.1e} (<= 1e-6)")


def test_5_gradient_check():
    cfg = ModelConfig(image_size=8, patch_size=2, in_channels=1, depth=2, dim=8, heads=2, mlp_ratio=2.0,
                      num_classes=3, toe=PipelineConfig(GrowthSchedule(3, 0.5)))
    model = TinyViT(cfg, seed=3)
    rng = np.random.default_rng(5)
    x, y = rng.standard_normal((3, 1, 8, 8)), rng.integers(0, 3, size=3)
    model.params.zero_grad()
    _, g = cross_entropy(model.forward(x, "train", 15, 30), y)
    tokens = (cfg.num_tokens, model.active_tokens)
    model.backward(g)
    analytic = {k: v.copy() for k, v in model.params.grads.items()}
    model.reduction.freeze()

    def loss():
        out = model.forward(x, "train", 15, 30)
        model._trace = None
        return cross_entropy(out, y)[0]

    h, worst, worst_name = 1e-6, 0.0, ""
    for name, p in model.params.items():
        flat = p.reshape(-1)
        numeric = np.zeros(flat.size)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp = loss()
            flat[i] = old - h
            lm = loss()
            flat[i] = old
            numeric[i] = (lp - lm) / (2 * h)
        a = analytic[name].reshape(-1)
        rel = np.linalg.norm(numeric - a) / max(np.linalg.norm(numeric), np.linalg.norm(a), 1e-12)
        if rel > worst:
            worst, worst_name = rel, name
    model.reduction.unfreeze()
    report(5, worst <= 1e-4, f"worst per-tensor relative error {worst:.1e} ({worst_name}) <= 1e-4; "
                             f"N={tokens[0]} -> {tokens[1]} tokens at stage 2, depth 2, d=8, float64")


def test_6_flops_reproduction():
    from toe.flops import schedule_speedup

    rows = []
    for preset, r1, target, tol in (("deit-tiny", 0.5, 1.27, 0.05), ("deit-base", 0.4, 1.37, 0.05), ("lvvit-s", 0.4, 1.36, 0.07)):
        model = parse_config(f"[model]\npreset = {preset}\n[schedule]\nfirst_stage_rate = {r1}\n").model
        s = model.toe.schedule
        value = schedule_speedup(model, s, convention="module")
        analytic = schedule_speedup(model, s, convention="analytic")
        rows.append((preset, r1, value, analytic, target, tol, abs(value - target) <= tol))
    detail = "; ".join(f"{p} r1={r}: {v:.3f}x vs {t}+-{tol} (analytic {a:.3f}x)" for p, r, v, a, t, tol, _ in rows)
    report(6, all(r[-1] for r in rows), detail)


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    out = {}
    for name in ("desk", "desk-full"):
        cfg = load_config(CONFIGS / f"{name}.ini")
        model = TinyViT(cfg.model, seed=cfg.train.seed)
        start = time.perf_counter()
        _, metrics = train(model, cfg.train)
        elapsed = time.perf_counter() - start
        out[name] = (summarize(model, metrics, cfg.train.batch_size), elapsed, cfg)
    return out


@pytest.mark.slow
def test_7_desk_training(desk_runs):
    toe, t_toe, cfg = desk_runs["desk"]
    full, t_full, _ = desk_runs["desk-full"]
    t = cfg.train
    gap = (full["final_accuracy"] - toe["final_accuracy"]) * 100
    reduction = toe["token_compute_reduction"]
    ok = (
        t.dataset.train_samples >= 5000 and t.total_iterations >= 2000 and cfg.model.depth == 2
        and gap <= 2.0 and reduction >= 0.20 and t_toe < 600
    )
    report(7, ok, f"ToE acc {toe['final_accuracy']:.4f} vs full {full['final_accuracy']:.4f} (gap {gap:+.2f} pp, <= 2); "
                  f"post-block-1 token compute -{reduction:.1%} (>= 20%); ToE run {t_toe:.0f}s (< 600s), "
                  f"full run {t_full:.0f}s; T={t.total_iterations}, {t.dataset.train_samples} train samples")


def test_8_spread():
    expanded, random = [], []
    config = PipelineConfig(GrowthSchedule(3, 0.5))
    for trial in range(200):
        rng = np.random.default_rng([8, trial])
        ts = TokenSet(rng.standard_normal((64, 16)))
        state = select(ts, config, 1)
        k = len(state.selected)
        pick = np.sort(rng.choice(64, size=k, replace=False))
        for data, sink in ((state.A, expanded), (ts.data[pick], random)):
            D = pairwise_distance(data, data).values
            sink.append(D[np.triu_indices(k, 1)].mean())
    a, b = float(np.mean(expanded)), float(np.mean(random))
    report(8, a >= b, f"mean pairwise cosine distance of selected tokens {a:.4f} >= random subsets {b:.4f} over {len(expanded)} instances (N=64, d=16, 32 kept)")


def test_9_determinism(tmp_path):
    config = tmp_path / "run.ini"
    config.write_text(
        "[model]\npreset = desk\n[train]\ntotal_iterations = 60\nbatch_size = 16\n"
        "[data]\ntrain_samples = 320\neval_samples = 200\n"
    )
    streams = []
    for run in ("a", "b"):
        assert main(["train", str(config), "--output", str(tmp_path / run), "--quiet"]) == 0
        streams.append((tmp_path / run / "metrics.jsonl").read_bytes())
    lines = streams[0].count(b"\n")
    report(9, streams[0] == streams[1] and lines > 0, f"two identical-seed runs wrote byte-identical metrics.jsonl ({lines} records, {len(streams[0])} bytes)")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
