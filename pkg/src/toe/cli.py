"""Command-line entry point: ``toe {train,oracle,flops,inspect}``.

Exit codes: 0 success, 1 validation error, 2 invariant or oracle failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import sys
import time
from pathlib import Path

from . import __version__

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


# -- train ---------------------------------------------------------------------

def cmd_train(args) -> int:
    from .config import ConfigError, dump_config, load_config, with_output_dir
    from .trainer import TrainingDiverged, summarize, train
    from .vit import TinyViT

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_INVALID)
    if args.output:
        cfg = with_output_dir(cfg, args.output)
    out = Path(cfg.output_dir)
    ckpt = out / "checkpoints"
    ckpt.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.ini").write_text(dump_config(cfg))

    model = TinyViT(cfg.model, seed=cfg.train.seed)
    started = time.perf_counter()
    failed = None
    with open(out / "metrics.jsonl", "w") as sink:
        def on_record(record):
            sink.write(json.dumps(record, sort_keys=True) + "\n")
            if not args.quiet and record["kind"] == "eval":
                print(f"iter {record['iteration']:>6}  eval accuracy {record['accuracy']:.4f}", flush=True)

        try:
            _, metrics = train(model, cfg.train, data=None, on_record=on_record, checkpoint_dir=ckpt)
        except TrainingDiverged as exc:
            failed = exc
        except (ValueError, OSError) as exc:
            return _fail(str(exc), EXIT_INVALID)
    elapsed = time.perf_counter() - started
    with open(out / "run.log", "a") as sidecar:
        stamp = _dt.datetime.now().isoformat(timespec="seconds")
        status = "diverged" if failed else "completed"
        sidecar.write(f"{stamp} {status} config={args.config} wall_seconds={elapsed:.2f}\n")
    if failed is not None:
        return _fail(f"{failed} (diagnostic record in {out / 'metrics.jsonl'})", EXIT_FAILED)

    (out / "metrics.csv").write_text(metrics.to_csv())
    summary = summarize(model, metrics, cfg.train.batch_size)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if not args.quiet:
        print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


# -- oracle ----------------------------------------------------------------------

def cmd_oracle(args) -> int:
    from .oracle import run_oracle

    if args.trials < 1:
        return _fail("--trials must be >= 1", EXIT_INVALID)
    if args.tokens < 1 or args.dim < 1:
        return _fail("--tokens and --dim must be >= 1", EXIT_INVALID)
    tie_break = "highest" if args.corrupt_tie_break else "lowest"
    report = run_oracle(args.trials, args.tokens, args.dim, args.seed, tie_break=tie_break)
    trials = args.trials
    failed_trials = sorted({r.trial for r in report.failures})
    print(f"oracle: {trials - len(failed_trials)}/{trials} trials passed (N={args.tokens}, d={args.dim}, seed={args.seed})")
    for r in report.failures:
        what = "expansion mismatch" if not r.equivalent else f"merge conservation error {r.merge_error:.3g}"
        print(f"FAIL seed={args.seed} trial={r.trial} metric={r.metric.value}: {what}")
    return EXIT_OK if report.ok else EXIT_FAILED


# -- flops -------------------------------------------------------------------------

def cmd_flops(args) -> int:
    from .config import ConfigError, load_config, parse_config
    from .flops import CONVENTIONS, average_flops, schedule_flops, schedule_speedup, theoretical_flops

    try:
        if args.config:
            cfg = load_config(args.config)
        else:
            cfg = parse_config(f"[model]\npreset = {args.preset}\n[schedule]\nfirst_stage_rate = {args.first_stage_rate}\nnum_stages = {args.num_stages}\n")
    except ConfigError as exc:
        return _fail(str(exc), EXIT_INVALID)
    model = cfg.model
    if model.toe is None:
        return _fail("flops report needs an enabled [schedule] section", EXIT_INVALID)
    schedule = model.toe.schedule
    conv = args.convention
    scale = args.batch_size
    sep = args.delimiter
    stages = schedule_flops(model, schedule, convention=conv)
    print(sep.join(["stage", "kept_rate", "kept_tokens", "fwd_flops", "bwd_flops", "fwd_bwd_flops", "toe_overhead_flops"]))
    for s in stages:
        print(sep.join(map(str, [s.stage, s.kept_rate, s.kept_tokens, s.fwd * scale, s.bwd * scale, s.per_iteration * scale, s.overhead * scale])))
    fwd, bwd = theoretical_flops(model, model.num_tokens, conv)
    print(sep.join(["full", "1.0", str(model.num_tokens), str(fwd * scale), str(bwd * scale), str((fwd + bwd) * scale), "0"]))
    print(f"# schedule-averaged fwd+bwd per iteration: {average_flops(stages) * scale:.6g} (full-token {(fwd + bwd) * scale:.6g})")
    for c in CONVENTIONS:
        marker = " *" if c == conv else ""
        print(f"# speedup[{c}]: {schedule_speedup(model, schedule, convention=c):.4f}{marker}")
    return EXIT_OK


# -- inspect -------------------------------------------------------------------------

def cmd_inspect(args) -> int:
    from .pipeline import PipelineConfig, restore_indices, run_pipeline
    from .schedule import GrowthSchedule
    from .tokens import TokenSet

    try:
        tokens = TokenSet.load(args.tokens)
        if args.config:
            from .config import ConfigError, load_config

            try:
                pipeline = load_config(args.config).pipeline
            except ConfigError as exc:
                return _fail(str(exc), EXIT_INVALID)
            if pipeline is None:
                return _fail("config has token expansion disabled", EXIT_INVALID)
        else:
            pipeline = PipelineConfig(
                schedule=GrowthSchedule(args.num_stages, args.first_stage_rate, args.repetition_steps),
                metric=args.metric,
                restore_indices=args.restore,
            )
        merged, state, assignment = run_pipeline(tokens, pipeline, args.iteration, args.total)
    except (ValueError, OSError) as exc:
        return _fail(str(exc), EXIT_INVALID)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "selected.txt").write_text("".join(f"{i}\n" for i in state.selected))
    (out / "assignment.txt").write_text("".join(line + "\n" for line in assignment.lines()))
    merged.save(out / "merged.bin")
    if pipeline.restore_indices:
        restore_indices(merged, state.selected, tokens.N).save(out / "restored.bin")
    print(f"{tokens.N} tokens -> {merged.N} (selected {len(state.selected)}, merged {len(state.unselected)})")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toe", description="Token expansion for accelerated transformer training.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the tiny ViT from an INI run config")
    p.add_argument("config", help="path to the run config")
    p.add_argument("--output", help="override [output] dir")
    p.add_argument("--quiet", action="store_true", help="print nothing on success")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("oracle", help="cross-check parallel expansion and merging on random token sets")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tokens", "-N", type=int, default=64, help="tokens per instance")
    p.add_argument("--dim", "-d", type=int, default=16, help="feature dimension")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--corrupt-tie-break", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("flops", help="per-stage theoretical FLOPs and speedup")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", help="run config providing [model] and [schedule]")
    src.add_argument("--preset", default="deit-tiny", help="model shape preset (default deit-tiny)")
    p.add_argument("--first-stage-rate", type=float, default=0.5)
    p.add_argument("--num-stages", type=int, default=3)
    p.add_argument("--convention", choices=("module", "analytic"), default="module",
                   help="module: parameterised layers only (profiler convention, default); analytic: adds attention products")
    p.add_argument("--batch-size", type=int, default=1, help="multiply per-sample counts by this batch size")
    p.add_argument("--delimiter", default="\t")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("inspect", help="run the pipeline on a serialized TokenSet")
    p.add_argument("tokens", help="TokenSet file")
    p.add_argument("--iteration", "-t", type=int, required=True)
    p.add_argument("--total", "-T", type=int, required=True)
    p.add_argument("--config", help="take the pipeline settings from a run config")
    p.add_argument("--num-stages", type=int, default=3)
    p.add_argument("--first-stage-rate", type=float, default=0.5)
    p.add_argument("--repetition-steps", type=int, default=2)
    p.add_argument("--metric", default="cosine", choices=("cosine", "euclidean", "manhattan"))
    p.add_argument("--restore", action="store_true", help="also write zero-padded tokens at original positions")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
