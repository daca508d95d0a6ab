"""Command-line surface: run experiments, merge checkpoint files, sweep
hyperparameter grids, evaluate checkpoints, and inspect the file format.

Exit codes: 0 success, 1 runtime/data error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import kernels
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ChronomergeError, ConfigError
from .merge import NEEDS_BASE, Technique, merge
from .metrics import MetricsRow
from .pipeline import multitask_reference, run_stream
from .toybench import generate_stream

CSV_HEADER = "t,A_KA,A_ZS,geo_mean,wall_time"


def _csv_line(row: MetricsRow, timing: bool) -> str:
    wall = row.wall_time if timing else 0.0
    return f"{row.t},{row.a_ka:.6f},{row.a_zs:.6f},{row.geo_mean:.6f},{wall:.6f}"


def _row_json(row: MetricsRow) -> dict:
    return {
        "t": row.t,
        "a_ka": round(row.a_ka, 6),
        "a_zs": round(row.a_zs, 6),
        "geo_mean": round(row.geo_mean, 6),
    }


def _write_config_ini(cfg: cfgmod.ExperimentConfig, path: Path) -> None:
    lines = []
    previous_section = None
    for dotted, value in cfg.flat().items():
        section, key = dotted.split(".", 1)
        if section != previous_section:
            if previous_section is not None:
                lines.append("")
            lines.append(f"[{section}]")
            previous_section = section
        lines.append(f"{key} = {value}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _execute_run(cfg: cfgmod.ExperimentConfig, out_dir: Path, timing: bool) -> dict:
    """Run one experiment into out_dir; returns the summary dict."""
    out_dir.mkdir(parents=True, exist_ok=True)
    bench = generate_stream(**cfgmod.bench_kwargs(cfg))
    pipe = cfgmod.pipeline_config(cfg)
    hidden = cfg["bench"]["hidden"]
    seed = cfg["run"]["seed"]
    started = time.perf_counter()
    result = run_stream(pipe, bench, hidden=hidden, seed=seed, out_dir=out_dir)
    multitask = multitask_reference(bench, pipe, hidden=hidden, seed=seed)
    elapsed = time.perf_counter() - started
    lines = [CSV_HEADER] + [_csv_line(row, timing) for row in result.rows]
    (out_dir / "trajectory.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    summary = {
        "final": _row_json(result.rows[-1]),
        "zero_shot": _row_json(result.zero_shot_row),
        "multitask": _row_json(multitask),
        "config": cfg.to_json(),
        "backend": kernels.backend_name(),
        "elapsed_seconds": round(elapsed, 3),
    }
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    _write_config_ini(cfg, out_dir / "config.ini")
    return summary


def cmd_run(args) -> int:
    cfg = cfgmod.load_config(args.config, args.set or ())
    out_dir = Path(args.out) if args.out else Path(cfgmod.out_root(cfg))
    summary = _execute_run(cfg, out_dir, args.timing)
    print(f"wrote {out_dir / 'trajectory.csv'}")
    print(json.dumps(summary["final"]))
    return 0


def _cell_slug(cell: dict) -> str:
    parts = [f"{key.split('.', 1)[1]}={cell[key]}" for key in sorted(cell)]
    return "_".join(parts).replace("/", "-") if parts else "single"


def _sweep_cell(payload) -> dict:
    """Worker: run one grid cell in its own output directory."""
    cfg_json, cell, cell_dir, timing = payload
    row = {"params": cell, "status": "ok", "error": ""}
    try:
        base = cfgmod.ExperimentConfig(cfg_json)
        base.values["bench"]["hidden"] = tuple(base.values["bench"]["hidden"])
        cfg = cfgmod.apply_cell(base, cell)
        summary = _execute_run(cfg, Path(cell_dir), timing)
        row.update(summary["final"])
    except (ChronomergeError, OSError) as exc:
        row["status"] = "error"
        row["error"] = str(exc)
    return row


def cmd_sweep(args) -> int:
    cfg = cfgmod.load_config(args.config, args.set or ())
    if args.grid:
        grid = cfgmod.load_grid(args.grid)
    else:
        technique = Technique(cfg["merge"]["technique"])
        grid = cfgmod.default_grid(technique)
        if not grid:
            raise ConfigError(
                f"technique {technique.value} has no default grid; pass --grid"
            )
    cells = cfgmod.expand_grid(grid)
    out_dir = Path(args.out) if args.out else Path(cfgmod.out_root(cfg))
    out_dir.mkdir(parents=True, exist_ok=True)
    payloads = [
        (cfg.to_json(), cell, str(out_dir / "cells" / f"{i:04d}_{_cell_slug(cell)}"), args.timing)
        for i, cell in enumerate(cells)
    ]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            rows = list(pool.map(_sweep_cell, payloads))
    else:
        rows = [_sweep_cell(p) for p in payloads]

    keys = sorted(grid)
    header = [k.split(".", 1)[1] for k in keys] + ["a_ka", "a_zs", "geo_mean", "status", "error"]
    lines = [",".join(header)]
    for row in rows:
        cells_part = [str(row["params"][k]) for k in keys]
        if row["status"] == "ok":
            metric_part = [f"{row['a_ka']:.6f}", f"{row['a_zs']:.6f}", f"{row['geo_mean']:.6f}"]
        else:
            metric_part = ["", "", ""]
        lines.append(",".join(cells_part + metric_part + [row["status"], row["error"]]))
    (out_dir / "sweep.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    ok_rows = [row for row in rows if row["status"] == "ok"]
    if ok_rows:
        top = max(r["geo_mean"] for r in ok_rows)
        tied = [r for r in ok_rows if r["geo_mean"] == top]
        best = min(tied, key=lambda r: sorted(r["params"].items()))
        best_payload = {
            "geo_mean": best["geo_mean"],
            "a_ka": best["a_ka"],
            "a_zs": best["a_zs"],
            "params": best["params"],
        }
        (out_dir / "best.json").write_text(
            json.dumps(best_payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    print(f"wrote {out_dir / 'sweep.csv'} ({len(rows)} cells, {len(ok_rows)} ok)")
    return 0 if ok_rows else 1


def cmd_merge(args) -> int:
    cfg = cfgmod.load_config(args.config, args.set or ())
    mc = cfgmod.merge_config(cfg)
    if mc.technique in NEEDS_BASE and not args.base:
        raise ConfigError(
            f"technique {mc.technique.value} needs --base (the checkpoint task "
            f"vectors are taken against)"
        )
    base = load_checkpoint(args.base) if args.base else None
    candidates = [load_checkpoint(p) for p in args.checkpoints]
    merged = merge(mc, base, candidates)
    save_checkpoint(merged, args.out)
    print(f"merged {len(candidates)} checkpoints with {mc.technique.value} -> {args.out}")
    for name in merged.names():
        tensor = merged.tensor(name)
        norm = float(np.linalg.norm(tensor.astype(np.float64)))
        print(f"  {name}  shape={list(tensor.shape)}  l2={norm:.6f}")
    return 0


def cmd_eval(args) -> int:
    cfg = cfgmod.load_config(args.config, args.set or ())
    bench = generate_stream(**cfgmod.bench_kwargs(cfg))
    model = load_checkpoint(args.checkpoint)
    from .metrics import geometric_mean, knowledge_accumulation, zero_shot_retention

    a_ka = knowledge_accumulation(model, bench)
    a_zs = zero_shot_retention(model, bench)
    print(
        json.dumps(
            {
                "a_ka": round(a_ka, 6),
                "a_zs": round(a_zs, 6),
                "geo_mean": round(geometric_mean(a_ka, a_zs), 6),
            }
        )
    )
    return 0


def cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    print(f"{args.checkpoint}: format CMRG v1, checksum ok")
    if ckpt.meta:
        print(f"meta: {json.dumps(ckpt.meta, sort_keys=True)}")
    for name in ckpt.names():
        tensor = ckpt.tensor(name)
        print(f"  {name}  shape={list(tensor.shape)}  dtype=f32  nbytes={tensor.nbytes}")
    print(f"total: {len(ckpt)} tensors, {ckpt.num_params()} parameters")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chronomerge",
        description="Temporal model merging: run task streams, merge checkpoints, sweep grids.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_opts(p):
        p.add_argument("--config", help="experiment config file (strict key=value sections)")
        p.add_argument(
            "--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value"
        )

    p_run = sub.add_parser("run", help="run one experiment, writing trajectory.csv")
    add_config_opts(p_run)
    p_run.add_argument("--out", help="output directory (default: run.out_dir or $CHRONOMERGE_OUT)")
    p_run.add_argument(
        "--timing",
        action="store_true",
        help="record measured wall time per task in the CSV (off by default so reruns are byte-identical)",
    )
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a hyperparameter grid of experiments")
    add_config_opts(p_sweep)
    p_sweep.add_argument("--grid", help="grid file ([sweep] section); default: per-technique grid")
    p_sweep.add_argument("--out", help="output directory")
    p_sweep.add_argument("--workers", type=int, default=1, help="concurrent cell processes")
    p_sweep.add_argument("--timing", action="store_true", help=argparse.SUPPRESS)
    p_sweep.set_defaults(func=cmd_sweep)

    p_merge = sub.add_parser("merge", help="merge saved checkpoints into one file")
    add_config_opts(p_merge)
    p_merge.add_argument("checkpoints", nargs="+", help="input .cmrg files")
    p_merge.add_argument("--base", help="base checkpoint for task-vector techniques")
    p_merge.add_argument("--out", required=True, help="output .cmrg path")
    p_merge.set_defaults(func=cmd_merge)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a seeded bench")
    add_config_opts(p_eval)
    p_eval.add_argument("--checkpoint", required=True, help=".cmrg file to evaluate")
    p_eval.set_defaults(func=cmd_eval)

    p_inspect = sub.add_parser("inspect", help="print a checkpoint file's header")
    p_inspect.add_argument("checkpoint", help=".cmrg file")
    p_inspect.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ChronomergeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
