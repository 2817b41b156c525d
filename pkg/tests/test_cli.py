import json
import subprocess
import sys

import numpy as np
import pytest

from toe.cli import main
from toe.config import ConfigError, dump_config, load_config, parse_config
from toe.tokens import TokenSet

SMALL_RUN = """\
[model]
preset = desk

[schedule]
first_stage_rate = 0.5

[train]
total_iterations = 12
batch_size = 8

[data]
train_samples = 48
eval_samples = 40
"""


def write(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_defaults_applied_and_echoed():
    cfg = parse_config(SMALL_RUN, "run.ini")
    s = cfg.pipeline.schedule
    assert (s.num_stages, s.repetition_steps, s.initial_rate) == (3, 2, 0.25)
    assert cfg.pipeline.metric.value == "cosine" and cfg.pipeline.apply_after_block == 1
    echoed = dump_config(cfg)
    assert "num_stages = 3" in echoed and "repetition_steps = 2" in echoed
    again = parse_config(echoed)
    assert again.model == cfg.model and again.train == cfg.train


@pytest.mark.parametrize(
    "text, line, fragment",
    [
        ("[schedule]\nnum_stages = 3\nfirst_stage_rate = 0\n", 3, "first_stage_rate"),
        ("[train]\nbatch_size = 8\n\n[model]\ndepht = 2\n", 5, "unknown key 'depht'"),
        ("[plot]\nx = 1\n", 1, "unknown section"),
        ("[schedule]\ninitial_rate = 0.2\n", 2, "initial_rate"),
        ("[schedule]\nmetric = hamming\n", 2, "metric"),
        ("[model]\npreset = giant\n", 2, "unknown preset"),
        ("[train]\nbatch_size = eight\n", 2, "batch_size"),
        ("[schedule]\nexpand = maybe\n", 2, "boolean"),
        ("[train]\ntotal_iterations = 2\n", 2, "num_stages"),
    ],
)
def test_config_errors_are_line_precise(tmp_path, text, line, fragment):
    path = write(tmp_path, text)
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert info.value.line == line
    assert str(info.value).startswith(f"{path}:{line}: ")
    assert fragment in str(info.value)


def test_train_rejects_bad_config(tmp_path, capsys):
    path = write(tmp_path, "[schedule]\nfirst_stage_rate = 0\n")
    assert main(["train", str(path)]) == 1
    assert f"{path}:2:" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert main(["train", str(tmp_path / "nope.ini")]) == 1


def test_train_artifacts_and_idempotence(tmp_path):
    path = write(tmp_path, SMALL_RUN)
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["train", str(path), "--output", str(out), "--quiet"]) == 0
        names = {p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file()}
        assert names == {
            "effective_config.ini",
            "metrics.jsonl",
            "metrics.csv",
            "summary.json",
            "run.log",
            "checkpoints/stage1.ckpt",
            "checkpoints/stage2.ckpt",
            "checkpoints/final.ckpt",
        }
        outputs.append(out)
    a, b = outputs
    for name in ("metrics.jsonl", "metrics.csv", "summary.json", "checkpoints/final.ckpt"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    # effective configs differ only in the output directory line
    diff = [l for l in (a / "effective_config.ini").read_text().splitlines() if l.startswith("dir")]
    assert diff == [f"dir = {a}"]
    summary = json.loads((a / "summary.json").read_text())
    assert summary["speedup"] > 1.0 and 0.0 <= summary["final_accuracy"] <= 1.0
    lines = [json.loads(l) for l in (a / "metrics.jsonl").read_text().splitlines()]
    assert {r["kind"] for r in lines} == {"train", "eval"}
    assert "wall_seconds=" in (a / "run.log").read_text()
    assert (a / "metrics.csv").read_text().splitlines()[0].startswith("iteration,stage,kept_rate")


def test_oracle_passes(capsys):
    assert main(["oracle", "--trials", "100", "--tokens", "64", "--dim", "16", "--seed", "7"]) == 0
    assert "100/100 trials passed" in capsys.readouterr().out


def test_oracle_usage_error(capsys):
    assert main(["oracle", "--trials", "0"]) == 1


def test_oracle_detects_corrupt_tie_break(capsys):
    assert main(["oracle", "--trials", "20", "--seed", "7", "--corrupt-tie-break"]) == 2
    out = capsys.readouterr().out
    assert "FAIL seed=7 trial=" in out


def _speedups(out):
    return {line.split("[")[1].split("]")[0]: float(line.split(":")[1].split()[0]) for line in out.splitlines() if line.startswith("# speedup")}


@pytest.mark.parametrize("preset, r1, expected, tol", [("deit-tiny", "0.5", 1.27, 0.05), ("deit-base", "0.4", 1.37, 0.05)])
def test_flops_report(capsys, preset, r1, expected, tol):
    assert main(["flops", "--preset", preset, "--first-stage-rate", r1]) == 0
    out = capsys.readouterr().out
    rows = [l.split("\t") for l in out.splitlines() if not l.startswith("#")]
    assert rows[0][:3] == ["stage", "kept_rate", "kept_tokens"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3", "full"]
    for r in rows[1:]:
        assert int(r[4]) == 2 * int(r[3])
    assert abs(_speedups(out)["module"] - expected) <= tol


def test_flops_no_reduction(capsys):
    assert main(["flops", "--preset", "deit-tiny", "--first-stage-rate", "1", "--num-stages", "1"]) == 0
    assert set(_speedups(capsys.readouterr().out).values()) == {1.0}


def test_flops_from_config(tmp_path, capsys):
    path = write(tmp_path, "[model]\npreset = deit-small\n")
    assert main(["flops", "--config", str(path), "--convention", "analytic"]) == 0
    assert "speedup[analytic]" in capsys.readouterr().out
    disabled = write(tmp_path, "[schedule]\nenabled = false\n", "off.ini")
    assert main(["flops", "--config", str(disabled)]) == 1


def test_inspect_outputs(tmp_path):
    tokens = TokenSet(np.random.default_rng(0).standard_normal((10, 4)))
    tokens.save(tmp_path / "t.bin")
    out = tmp_path / "dump"
    assert main(["inspect", str(tmp_path / "t.bin"), "-t", "1", "-T", "30", "--restore", "--out", str(out)]) == 0
    selected = [int(l) for l in (out / "selected.txt").read_text().split()]
    assert len(selected) == 5 and selected[0] == 1
    pairs = [l.split(" -> ") for l in (out / "assignment.txt").read_text().splitlines()]
    assert sorted(int(b) for b, _ in pairs) == sorted(set(range(1, 11)) - set(selected))
    assert all(int(a) in selected for _, a in pairs)
    merged = TokenSet.load(out / "merged.bin")
    restored = TokenSet.load(out / "restored.bin")
    assert merged.N == 5 and restored.N == 10
    np.testing.assert_array_equal(restored.data[np.array(selected) - 1], merged.data)


def test_inspect_bad_inputs(tmp_path):
    (tmp_path / "junk.bin").write_bytes(b"not tokens")
    assert main(["inspect", str(tmp_path / "junk.bin"), "-t", "1", "-T", "3", "--out", str(tmp_path / "o")]) == 1
    TokenSet(np.ones((4, 2))).save(tmp_path / "t.bin")
    assert main(["inspect", str(tmp_path / "t.bin"), "-t", "9", "-T", "3", "--out", str(tmp_path / "o")]) == 1


def test_usage_errors_exit_one():
    assert main([]) == 1
    assert main(["oracle", "--trials", "x"]) == 1


def test_console_script_help():
    result = subprocess.run([sys.executable, "-m", "toe.cli", "--help"], capture_output=True, text=True)
    assert result.returncode == 0
    for command in ("train", "oracle", "flops", "inspect"):
        assert command in result.stdout
