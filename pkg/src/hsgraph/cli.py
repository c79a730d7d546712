"""Command-line entry point: simulate, run, eval, bench and export.

Exit codes: 0 success, 1 usage error, 2 data error. Errors are also written
to stderr as one JSON object ``{"error": <type>, "message": <text>}``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, lie
from .evaluation import GroundTruth, evaluate, evaluate_run, loop_pairs
from .graph import GraphError
from .graph_io import FormatError, export_g2o
from .metrics import BinOverlap, EmptyCloud, StampMismatch
from .pipeline import ConfigError, PipelineConfig, run
from .simulator import NoiseSpec, SchemaError, SpecInvalid, UnreachableRoute, WorldSpec, simulate, write_dataset

DATA_ERRORS = (
    OSError,
    json.JSONDecodeError,
    SchemaError,
    ConfigError,
    FormatError,
    SpecInvalid,
    UnreachableRoute,
    StampMismatch,
    EmptyCloud,
    BinOverlap,
    GraphError,
)
LEVELS = ("LOCAL", "FLOOR_GLOBAL", "ROOM_LOCAL", "BATCH")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def _f(x) -> str:
    return format(float(x), ".9g")


# -- file formats ---------------------------------------------------------------


def write_xyz(points: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in np.asarray(points, float).reshape(-1, 3):
            fh.write(f"{_f(p[0])} {_f(p[1])} {_f(p[2])}\n")


def read_xyz(path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3:
                raise SchemaError(f"{path} line {lineno}: expected 3 floats")
            try:
                rows.append([float(v) for v in parts])
            except ValueError as exc:
                raise SchemaError(f"{path} line {lineno}: {exc}") from exc
    return np.array(rows, float).reshape(-1, 3)


def write_trajectory(traj: dict, path) -> None:
    """One pose per line: ``stamp x y z qx qy qz qw``."""
    with open(path, "w", encoding="utf-8") as fh:
        for stamp, T in traj.items():
            fh.write(" ".join(_f(v) for v in [stamp, *lie.pose_to_vec7(T)]) + "\n")


def read_trajectory(path) -> dict[float, np.ndarray]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            try:
                v = [float(x) for x in line.split()]
            except ValueError as exc:
                raise SchemaError(f"{path} line {lineno}: {exc}") from exc
            if len(v) != 8:
                raise SchemaError(f"{path} line {lineno}: expected stamp x y z qx qy qz qw")
            out[v[0]] = lie.vec7_to_pose(v[1:])
    return out


# -- commands -------------------------------------------------------------------


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_toml(args.config) if args.config else PipelineConfig()
    changes = {}
    if args.mode:
        changes["mode"] = args.mode
    if args.loop_gate:
        changes["loop_gate"] = args.loop_gate
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _world_spec(args) -> WorldSpec:
    return WorldSpec(floors=args.floors, rows=args.rows, cols=args.cols, aliased=args.aliased, seed=args.seed)


def _noise(args) -> NoiseSpec:
    base = NoiseSpec()
    k = args.noise_scale
    return NoiseSpec(*(getattr(base, f.name) * (k if f.name != "dropout" else 1.0) for f in dataclasses.fields(NoiseSpec)))


def cmd_simulate(args) -> dict:
    world, frames = simulate(_world_spec(args), _noise(args))
    fpath, wpath = write_dataset(args.out, world, frames, _noise(args))
    return {"frames": str(fpath), "world": str(wpath), "count": len(frames)}


def cmd_run(args) -> dict:
    res = run(args.dataset, _config(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "graph.g2o").write_text(export_g2o(res.graph), encoding="utf-8")
    write_trajectory(res.trajectory(), out / "trajectory.txt")
    write_xyz(res.pipeline.map_cloud(), out / "map.xyz")
    with open(out / "events.jsonl", "w", encoding="utf-8") as fh:
        for e in res.events:
            fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")
    with open(out / "reports.jsonl", "w", encoding="utf-8") as fh:
        for r in res.reports:
            fh.write(r.to_json() + "\n")
    ms, counts = res.pipeline.timing()
    timing = {"ms": ms, "counts": counts, "total_ms": res.pipeline.total_ms()}
    (out / "timing.json").write_text(json.dumps(timing, sort_keys=True, indent=2), encoding="utf-8")
    return {"out": str(out), "keyframes": len(res.trajectory()), "reports": len(res.reports), "total_ms": timing["total_ms"]}


def cmd_eval(args) -> str:
    run_dir = Path(args.run)
    traj = read_trajectory(run_dir / "trajectory.txt")
    cloud = read_xyz(run_dir / "map.xyz") if (run_dir / "map.xyz").exists() else None
    loops = []
    if (run_dir / "events.jsonl").exists():
        with open(run_dir / "events.jsonl", encoding="utf-8") as fh:
            for line in fh:
                e = json.loads(line)
                if e["kind"] == "LOOP_CLOSURE":
                    loops.append((e["stamp"], e["match_stamp"]))
    timing = {}
    if (run_dir / "timing.json").exists():
        timing = json.loads((run_dir / "timing.json").read_text(encoding="utf-8"))
    bundle = evaluate(traj, GroundTruth.load(args.truth), cloud, loops, timing.get("ms"), timing.get("counts"))
    text = bundle.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return text


def bench_rows(seeds, spec_kw: dict, config: PipelineConfig | None = None) -> list[dict]:
    """Per-mode totals over seeds on simulated worlds."""
    config = config or PipelineConfig()
    rows = []
    for mode in ("hier", "batch"):
        row = {"mode": mode, "seeds": len(seeds), "keyframes": 0, "total_ms": 0.0, "ate_rmse": 0.0, **{lv: 0.0 for lv in LEVELS}}
        for s in seeds:
            world, frames = simulate(WorldSpec(seed=s, **spec_kw), NoiseSpec())
            res = run(frames, dataclasses.replace(config, mode=mode))
            ms, _ = res.pipeline.timing()
            for lv, v in ms.items():
                row[lv] += v
            row["keyframes"] += len(res.trajectory())
            row["total_ms"] += res.pipeline.total_ms()
            row["ate_rmse"] += evaluate_run(res, GroundTruth.from_frames(world, frames), with_map=False).ate_rmse / len(seeds)
        rows.append(row)
    return rows


def format_table(rows: list[dict]) -> str:
    cols = ["mode", "seeds", "keyframes", *LEVELS, "total_ms", "ate_rmse"]
    cells = [cols] + [
        [str(r[c]) if isinstance(r[c], (str, int)) else (f"{r[c]:.4f}" if c == "ate_rmse" else f"{r[c]:.1f}") for c in cols]
        for r in rows
    ]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))) for row in cells]
    return "\n".join(lines)


def cmd_bench(args) -> str:
    seeds = args.seed if isinstance(args.seed, list) else [args.seed]
    cfg = _config(args)
    rows = bench_rows(seeds, dict(floors=args.floors, rows=args.rows, cols=args.cols, aliased=args.aliased), cfg)
    table = format_table(rows)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.txt").write_text(table + "\n", encoding="utf-8")
        (out / "bench.json").write_text(json.dumps(rows, indent=2, sort_keys=True), encoding="utf-8")
    return table


def cmd_export(args) -> str | None:
    text = export_g2o(run(args.dataset, _config(args)).graph)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
        return None
    return text.rstrip("\n")


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hsgraph", description="Hierarchical situational-graph SLAM back end.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log skipped sub-steps")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def world_args(q, seed_nargs=None):
        q.add_argument("--seed", type=int, default=[0] if seed_nargs else 0, nargs=seed_nargs)
        q.add_argument("--floors", type=int, default=3)
        q.add_argument("--rows", type=int, default=1)
        q.add_argument("--cols", type=int, default=3)
        q.add_argument("--aliased", action="store_true")

    def run_args(q):
        q.add_argument("--config", help="TOML file mirroring PipelineConfig fields")
        q.add_argument("--mode", choices=("hier", "batch"))
        q.add_argument("--loop-gate", choices=("floor", "off"))

    q = sub.add_parser("simulate", help="generate a dataset directory")
    world_args(q)
    q.add_argument("--noise-scale", type=float, default=1.0, help="multiplier on the default noise sigmas")
    q.add_argument("--out", default="dataset")

    q = sub.add_parser("run", help="run the pipeline over a dataset")
    q.add_argument("dataset")
    run_args(q)
    q.add_argument("--out", default="run")

    q = sub.add_parser("eval", help="score run outputs against ground truth")
    q.add_argument("run", help="directory written by 'run'")
    q.add_argument("truth", help="dataset directory or world.json")
    q.add_argument("--out", help="also write the metrics JSON here")

    q = sub.add_parser("bench", help="hierarchical vs batch optimization time")
    world_args(q, seed_nargs="+")
    run_args(q)
    q.add_argument("--out")

    q = sub.add_parser("export", help="run a dataset and print the graph as g2o-style text")
    q.add_argument("dataset")
    run_args(q)
    q.add_argument("--out")
    return p


COMMANDS = {"simulate": cmd_simulate, "run": cmd_run, "eval": cmd_eval, "bench": cmd_bench, "export": cmd_export}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(parser.format_usage())
        return _fail("usage", str(exc), 1)
    except SystemExit as exc:
        # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        out = COMMANDS[args.command](args)
    except DATA_ERRORS as exc:
        return _fail(type(exc).__name__, str(exc), 2)
    if isinstance(out, dict):
        print(json.dumps(out, sort_keys=True))
    elif out is not None:
        print(out)
    return 0


__all__ = ["main", "build_parser", "bench_rows", "format_table", "read_trajectory", "write_trajectory", "read_xyz", "write_xyz", "loop_pairs"]
