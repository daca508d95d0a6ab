"""Experiment configuration: a strict key=value section format.

Unknown sections or keys are hard errors so typos in sweep scripts fail
loudly. Values are typed per a fixed schema; command-line overrides use
``--set section.key=value``. Sweep grids use the same file format with a
single [sweep] section whose keys are config paths and whose values are
comma-separated lists.
"""

from __future__ import annotations

import configparser
import json
import os
from dataclasses import dataclass, field
from itertools import product

from .errors import ConfigError
from .merge import MergeConfig, Technique, Weighting
from .pipeline import DeployProtocol, InitProtocol, PipelineConfig

OUT_ENV = "CHRONOMERGE_OUT"


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_int_list(raw: str) -> tuple[int, ...]:
    return tuple(int(part) for part in raw.split(",") if part.strip())


# section -> key -> (parser, default)
SCHEMA = {
    "run": {
        "seed": (int, 0),
        "out_dir": (str, ""),
    },
    "bench": {
        "input_dim": (int, 16),
        "class_count": (int, 8),
        "tasks": (int, 20),
        "holdout_tasks": (int, 5),
        "samples_per_task": (int, 256),
        "stream_seed": (int, 7),
        "hidden": (_parse_int_list, (32, 32)),
        "center_scale": (float, 2.0),
        "rotation": (float, 0.5),
        "noise": (float, 0.35),
    },
    "pipeline": {
        "init": (str, "ema"),
        "deploy": (str, "ema"),
        "steps": (int, 200),
        "batch_size": (int, 32),
        "peak_lr": (float, 0.05),
        "replay": (_parse_bool, False),
        "replay_fraction": (float, 0.5),
    },
    "merge": {
        "technique": (str, "wa"),
        "lambda_scale": (float, 1.0),
        "slerp_weight": (float, 0.5),
        "prune_fraction": (float, 0.2),
        "dare_p": (float, 0.5),
        "bread_beta": (float, 0.1),
        "bread_gamma": (float, 0.1),
        "lines_alpha": (float, 0.5),
        "lines_beta": (float, 0.5),
        "ema_weight": (float, 0.5),
        "weighting": (str, "uniform"),
        "reversed": (_parse_bool, False),
        "rng_seed": (int, 0),
    },
}


@dataclass
class ExperimentConfig:
    """Fully resolved experiment settings, one nested dict per section."""

    values: dict = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def get(self, section: str, key: str):
        return self.values[section][key]

    def flat(self) -> dict[str, str]:
        """section.key -> string form, for emission into summaries."""
        out = {}
        for section in sorted(self.values):
            for key in sorted(self.values[section]):
                value = self.values[section][key]
                if isinstance(value, tuple):
                    value = ",".join(str(v) for v in value)
                elif isinstance(value, bool):
                    value = "true" if value else "false"
                out[f"{section}.{key}"] = str(value)
        return out

    def to_json(self) -> dict:
        return {section: dict(body) for section, body in self.values.items()}


def default_config() -> ExperimentConfig:
    values = {
        section: {key: default for key, (_, default) in body.items()}
        for section, body in SCHEMA.items()
    }
    return ExperimentConfig(values)


def _apply(cfg: ExperimentConfig, section: str, key: str, raw: str, where: str) -> None:
    if section not in SCHEMA:
        raise ConfigError(f"{where}: unknown section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"{where}: unknown key {section}.{key}")
    parser, _ = SCHEMA[section][key]
    try:
        cfg.values[section][key] = parser(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: bad value for {section}.{key}: {exc}") from exc


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Defaults, then the file (if any), then --set overrides, validated."""
    cfg = default_config()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(cfg, section, key, raw, where=str(path))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not section.key=value")
        dotted, raw = item.split("=", 1)
        if "." not in dotted:
            raise ConfigError(f"override key {dotted!r} is not section.key")
        section, key = dotted.split(".", 1)
        _apply(cfg, section.strip(), key.strip(), raw.strip(), where="--set")
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    # constructing the typed configs performs the range checks
    merge_config(cfg)
    pipeline_config(cfg)
    bench = cfg["bench"]
    if bench["samples_per_task"] % bench["class_count"]:
        raise ConfigError("bench.samples_per_task must be a multiple of bench.class_count")


def merge_config(cfg: ExperimentConfig) -> MergeConfig:
    m = cfg["merge"]
    try:
        return MergeConfig(
            technique=Technique(m["technique"]),
            lambda_scale=m["lambda_scale"],
            slerp_weight=m["slerp_weight"],
            prune_fraction=m["prune_fraction"],
            dare_p=m["dare_p"],
            bread_beta=m["bread_beta"],
            bread_gamma=m["bread_gamma"],
            lines_alpha=m["lines_alpha"],
            lines_beta=m["lines_beta"],
            ema_weight=m["ema_weight"],
            weighting=Weighting(m["weighting"]),
            reversed_weights=m["reversed"],
            rng_seed=m["rng_seed"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def pipeline_config(cfg: ExperimentConfig) -> PipelineConfig:
    p = cfg["pipeline"]
    try:
        return PipelineConfig(
            init_protocol=InitProtocol(p["init"]),
            deploy_protocol=DeployProtocol(p["deploy"]),
            merge_config=merge_config(cfg),
            task_count=cfg["bench"]["tasks"],
            steps_per_task=p["steps"],
            batch_size=p["batch_size"],
            peak_lr=p["peak_lr"],
            replay=p["replay"],
            replay_fraction=p["replay_fraction"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def bench_kwargs(cfg: ExperimentConfig) -> dict:
    b = cfg["bench"]
    return dict(
        input_dim=b["input_dim"],
        class_count=b["class_count"],
        tasks=b["tasks"],
        holdouts=b["holdout_tasks"],
        samples_per_task=b["samples_per_task"],
        stream_seed=b["stream_seed"],
        center_scale=b["center_scale"],
        rotation=b["rotation"],
        noise=b["noise"],
    )


def out_root(cfg: ExperimentConfig) -> str:
    configured = cfg["run"]["out_dir"]
    if configured:
        return configured
    return os.environ.get(OUT_ENV, ".")


# ---------------------------------------------------------------------------
# sweep grids
# ---------------------------------------------------------------------------

_TENTHS = tuple(round(0.1 * i, 1) for i in range(1, 11))
_TENTHS_OPEN = tuple(round(0.1 * i, 1) for i in range(1, 10))

#: default per-technique hyperparameter grids. Pruning stops at 0.9:
#: pruning every entry leaves nothing to merge.
DEFAULT_GRIDS: dict[Technique, dict[str, tuple]] = {
    Technique.WA: {},
    Technique.SLERP: {"merge.slerp_weight": (0.1, 0.3, 0.5, 0.7, 0.9)},
    Technique.TA: {"merge.lambda_scale": _TENTHS},
    Technique.TIES: {
        "merge.lambda_scale": _TENTHS,
        "merge.prune_fraction": _TENTHS_OPEN,
    },
    Technique.DARE_TIES: {
        "merge.lambda_scale": _TENTHS,
        "merge.prune_fraction": _TENTHS_OPEN,
    },
    Technique.BREADCRUMBS_TIES: {
        "merge.lambda_scale": _TENTHS,
        "merge.prune_fraction": _TENTHS_OPEN,
    },
    Technique.MAGMAX: {"merge.lambda_scale": (0.2, 0.4, 0.8, 1.0)},
    Technique.LINES_TIES: {
        "merge.lines_beta": (0.2, 0.5, 0.8),
        "merge.prune_fraction": (0.2, 0.5, 0.8),
    },
    Technique.MODEL_STOCK: {},
}


def default_grid(technique: Technique) -> dict[str, tuple]:
    return dict(DEFAULT_GRIDS[Technique(technique)])


def load_grid(path) -> dict[str, tuple]:
    """Parse a [sweep] section of comma-separated value lists, keyed by
    config paths; keys are validated against the schema."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    read = parser.read(path)
    if not read:
        raise ConfigError(f"grid file not found: {path}")
    sections = parser.sections()
    if sections != ["sweep"]:
        raise ConfigError(f"{path}: grid files hold exactly one [sweep] section, got {sections}")
    grid: dict[str, tuple] = {}
    for dotted, raw in parser.items("sweep"):
        if "." not in dotted:
            raise ConfigError(f"{path}: grid key {dotted!r} is not section.key")
        section, key = dotted.split(".", 1)
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"{path}: unknown grid key {dotted}")
        value_parser, _ = SCHEMA[section][key]
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if not parts:
            raise ConfigError(f"{path}: grid key {dotted} has no values")
        try:
            grid[dotted] = tuple(value_parser(p) for p in parts)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{path}: bad value for {dotted}: {exc}") from exc
    if not grid:
        raise ConfigError(f"{path}: empty sweep grid")
    return grid


def expand_grid(grid: dict[str, tuple]) -> list[dict[str, object]]:
    """Cartesian product as a list of {dotted key: value} cells, ordered
    by sorted key then value order."""
    keys = sorted(grid)
    cells = []
    for combo in product(*(grid[k] for k in keys)):
        cells.append(dict(zip(keys, combo)))
    return cells


def apply_cell(cfg: ExperimentConfig, cell: dict[str, object]) -> ExperimentConfig:
    """A copy of cfg with the cell's values substituted."""
    out = ExperimentConfig(json.loads(json.dumps(cfg.to_json())))
    # round-trip turned tuples into lists; restore
    out.values["bench"]["hidden"] = tuple(out.values["bench"]["hidden"])
    for dotted, value in cell.items():
        section, key = dotted.split(".", 1)
        out.values[section][key] = value
    _validate(out)
    return out
