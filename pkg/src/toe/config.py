"""INI run configuration: parsing, defaults, validation and echo.

Sections and keys (defaults in brackets)::

    [model]     preset, image_size [16], patch_size [4], in_channels [1], depth [2],
                dim [32], heads [2], mlp_ratio [2.0], num_classes [10]
    [schedule]  enabled [true], num_stages [3], first_stage_rate [0.5],
                repetition_steps [2], metric [cosine], apply_after_block [1],
                restore_indices [false], init_mode [spatial], expand [true], merge [true]
    [train]     total_iterations [3000], batch_size [32], optimizer [adamw], lr [1e-3],
                weight_decay [0.05], warmup_fraction [0.05], min_lr [1e-5], seed [0],
                eval_every [one epoch]
    [data]      kind [synthetic], path, train_samples [5000], eval_samples [2000],
                informative [0.6], noise [1.0], seed [0]
    [output]    dir [runs/default]

Unknown sections or keys are rejected.  The initial kept rate is always half
of ``first_stage_rate`` and cannot be set.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Optional

from .pipeline import PipelineConfig
from .schedule import GrowthSchedule
from .tokens import Metric
from .trainer import DatasetSpec, TrainConfig
from .vit import ModelConfig

PRESETS: dict[str, dict[str, Any]] = {
    "desk": dict(image_size=16, patch_size=4, in_channels=1, depth=2, dim=32, heads=2, mlp_ratio=2.0, num_classes=10),
    "deit-tiny": dict(image_size=224, patch_size=16, in_channels=3, depth=12, dim=192, heads=3, mlp_ratio=4.0, num_classes=1000),
    "deit-small": dict(image_size=224, patch_size=16, in_channels=3, depth=12, dim=384, heads=6, mlp_ratio=4.0, num_classes=1000),
    "deit-base": dict(image_size=224, patch_size=16, in_channels=3, depth=12, dim=768, heads=12, mlp_ratio=4.0, num_classes=1000),
    # token/dim/depth geometry only; the convolutional stem of LV-ViT is replaced by a plain patch embedding
    "lvvit-s": dict(image_size=224, patch_size=16, in_channels=3, depth=16, dim=384, heads=6, mlp_ratio=3.0, num_classes=1000),
    "lvvit-m": dict(image_size=224, patch_size=16, in_channels=3, depth=20, dim=512, heads=8, mlp_ratio=3.0, num_classes=1000),
}

_MODEL_KEYS = {"preset": str, **{k: type(v) for k, v in PRESETS["desk"].items()}}
_SCHEDULE_KEYS = {
    "enabled": bool,
    "num_stages": int,
    "first_stage_rate": float,
    "repetition_steps": int,
    "metric": str,
    "apply_after_block": int,
    "restore_indices": bool,
    "init_mode": str,
    "expand": bool,
    "merge": bool,
}
_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig) if f.name != "dataset"}
_DATA_KEYS = {f.name: f.type for f in fields(DatasetSpec)}
_SECTIONS = {"model": _MODEL_KEYS, "schedule": _SCHEDULE_KEYS, "train": _TRAIN_KEYS, "data": _DATA_KEYS, "output": {"dir": str}}
_FORBIDDEN = {("schedule", "initial_rate"): "initial_rate is derived as first_stage_rate / 2 and cannot be set"}


class ConfigError(ValueError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        where = f"{path}:{line}: " if path and line else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.line = line


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    output_dir: str = "runs/default"
    preset: Optional[str] = None

    @property
    def pipeline(self) -> Optional[PipelineConfig]:
        return self.model.toe


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    lines, section = {}, None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.fullmatch(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip().lower()
            lines.setdefault((section, ""), no)
            continue
        key = re.split(r"[=:]", line, maxsplit=1)[0].strip().lower()
        if section is not None:
            lines.setdefault((section, key), no)
    return lines


def _convert(raw: str, kind, parser: configparser.ConfigParser):
    text = raw.strip()
    if kind in (bool, "bool"):
        if text.lower() not in parser.BOOLEAN_STATES:
            raise ValueError(f"expected a boolean, got {raw!r}")
        return parser.BOOLEAN_STATES[text.lower()]
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    if isinstance(kind, str) and "Optional[int]" in kind:
        return None if text.lower() in ("", "none") else int(text)
    if isinstance(kind, str) and "Optional[str]" in kind:
        return None if text.lower() in ("", "none") else text
    return text


def parse_config(text: str, path: str | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=path or "<config>")
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(str(exc).splitlines()[0], path, line) from None
    lines = _key_lines(text)

    values: dict[str, dict[str, Any]] = {name: {} for name in _SECTIONS}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]", path, lines.get((section, "")))
        spec = _SECTIONS[section]
        for key, raw in parser.items(section):
            line = lines.get((section, key))
            if (section, key) in _FORBIDDEN:
                raise ConfigError(_FORBIDDEN[(section, key)], path, line)
            if key not in spec:
                raise ConfigError(f"unknown key {key!r} in [{section}]", path, line)
            try:
                values[section][key] = _convert(raw, spec[key], parser)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}", path, line) from None

    def build(section: str, fn):
        try:
            return fn()
        except (ValueError, TypeError) as exc:
            key = next((k for k in values[section] if k in str(exc)), "")
            raise ConfigError(f"[{section}] {exc}", path, lines.get((section, key)) or lines.get((section, ""))) from None

    model_values = dict(values["model"])
    preset = model_values.pop("preset", None)
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r} (expected one of {sorted(PRESETS)})", path, lines.get(("model", "preset")))
    model_kwargs = {**PRESETS[preset or "desk"], **model_values}

    sched = dict(values["schedule"])
    enabled = sched.pop("enabled", True)
    pipeline = None
    if enabled:
        schedule = build("schedule", lambda: GrowthSchedule(
            num_stages=sched.pop("num_stages", 3),
            first_stage_rate=sched.pop("first_stage_rate", 0.5),
            repetition_steps=sched.pop("repetition_steps", 2),
        ))
        if "metric" in sched:
            build("schedule", lambda: Metric.parse(sched["metric"]))
        pipeline = build("schedule", lambda: PipelineConfig(schedule=schedule, **sched))
    model = build("model", lambda: ModelConfig(toe=pipeline, **model_kwargs))

    dataset = build("data", lambda: DatasetSpec(**values["data"]))
    train_cfg = build("train", lambda: TrainConfig(dataset=dataset, **values["train"]))
    if pipeline is not None and train_cfg.total_iterations < pipeline.schedule.num_stages:
        raise ConfigError("total_iterations must be >= num_stages so every stage is trained", path, lines.get(("train", "total_iterations")))
    output_dir = values["output"].get("dir", "runs/default")
    return RunConfig(model=model, train=train_cfg, output_dir=output_dir, preset=preset)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    return parse_config(text, str(path))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, Metric):
        return value.value
    return str(value)


def dump_config(config: RunConfig) -> str:
    """Effective configuration with every default filled in, as INI text."""
    m = config.model
    out = ["[model]"]
    if config.preset:
        out.append(f"preset = {config.preset}")
    for key in PRESETS["desk"]:
        out.append(f"{key} = {_fmt(getattr(m, key))}")
    out += ["", "[schedule]"]
    toe = m.toe
    out.append(f"enabled = {_fmt(toe is not None)}")
    if toe is not None:
        s = toe.schedule
        out += [
            f"num_stages = {s.num_stages}",
            f"first_stage_rate = {s.first_stage_rate}",
            f"repetition_steps = {s.repetition_steps}",
            f"# initial_rate = {s.initial_rate} (derived)",
        ]
        for key in ("metric", "apply_after_block", "restore_indices", "init_mode", "expand", "merge"):
            out.append(f"{key} = {_fmt(getattr(toe, key))}")
    out += ["", "[train]"]
    for key in _TRAIN_KEYS:
        out.append(f"{key} = {_fmt(getattr(config.train, key))}")
    out += ["", "[data]"]
    for key in _DATA_KEYS:
        out.append(f"{key} = {_fmt(getattr(config.train.dataset, key))}")
    out += ["", "[output]", f"dir = {config.output_dir}", ""]
    return "\n".join(out)


def with_output_dir(config: RunConfig, output_dir: str) -> RunConfig:
    return replace(config, output_dir=output_dir)
