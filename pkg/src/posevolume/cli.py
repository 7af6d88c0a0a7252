"""Command-line driver: generate synthetic benchmarks, evaluate methods, report.

Subcommands:
  generate  write scene manifests and feature dumps from a JSON config
  evaluate  run a method over a scene directory, emit CSV + summary JSON
  report    aggregate result CSVs into a comparison table and plot-ready bins

All randomness is seeded from the config, so identical configs reproduce
byte-identical scene files and result CSVs. The POSEVOLUME_THREADS variable
caps the evaluation worker pool.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigParseError, IoError, PoseVolumeError
from .metrics import (
    ModelPoints,
    add_metric,
    adds_metric,
    format_result_row,
    occlusion_curve,
    read_results_csv,
    success,
    write_results_csv,
)
from .pipeline import PipelineConfig, run_coarse_to_fine, run_late_fusion
from .solver import SolverParams, kabsch_align
from .synth import (
    SynthConfig,
    builtin_model,
    generate_scene,
    load_ply,
    load_scene,
    save_scene,
    select_keypoints,
)

METHODS = ("volume", "late_fusion", "kabsch_all")
DEFAULT_OCCLUSION_SWEEP = (0.0, 0.2, 0.4, 0.6, 0.8)
OCCLUSION_BIN_EDGES = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)

_SYNTH_KEYS = ("seed", "n_keypoints", "baseline_m", "noise_px", "outlier_rate",
               "occlusion_fraction", "prior_depth_m", "depth_jitter_m",
               "image_width", "image_height", "focal_px", "response_sigma_px")
_PIPE_KEYS = ("coarse_half_range_m", "coarse_cell_m", "fine_cell_m",
              "fine_range_factor", "field_gain", "heatmap_sigma_cells",
              "alpha", "betas")
_SOLVER_KEYS = ("gamma1", "gamma2_m", "temperature")
_RUN_KEYS = ("model", "scenes", "occlusion_sweep")


@dataclass(frozen=True)
class RunManifest:
    """Record of one evaluation invocation."""

    config_path: str
    out_dir: str
    method: str
    scenes: int
    seed: int

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.scenes < 1:
            raise ValueError("scene count must be >= 1")

    def to_dict(self) -> dict:
        return {"config_path": self.config_path, "out_dir": self.out_dir,
                "method": self.method, "scenes": self.scenes, "seed": self.seed}


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig
    pipeline: PipelineConfig
    model_name: str
    model_ply: str | None
    scenes: int
    occlusion_sweep: tuple | None

    def model(self) -> ModelPoints:
        if self.model_ply:
            return load_ply(self.model_ply)
        return builtin_model(self.model_name)


def parse_config(path) -> RunConfig:
    """Read and validate a run config; unknown fields are errors."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise IoError(f"cannot read config {path}: {e.strerror}")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigParseError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}")
    if not isinstance(raw, dict):
        raise ConfigParseError(f"{path}: top level must be a JSON object")

    known = set(_SYNTH_KEYS) | set(_PIPE_KEYS) | set(_SOLVER_KEYS) | set(_RUN_KEYS)
    for key in raw:
        if key not in known:
            raise ConfigParseError(f"{path}: unknown field '{key}'")

    def build(cls, keys, extra=None, rename=None):
        kwargs = dict(extra or {})
        for key in keys:
            if key in raw:
                kwargs[(rename or {}).get(key, key)] = raw[key]
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as e:
            raise ConfigParseError(f"{path}: {e}")

    solver = build(SolverParams, _SOLVER_KEYS, rename={"gamma2_m": "gamma2"})
    synth = build(SynthConfig, _SYNTH_KEYS)
    pipe_kwargs = {k: tuple(raw[k]) if isinstance(raw.get(k), list) else raw[k]
                   for k in _PIPE_KEYS if k in raw}
    try:
        pipeline = PipelineConfig(solver=solver, **pipe_kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigParseError(f"{path}: {e}")

    model = raw.get("model", "blob")
    if isinstance(model, dict):
        if "ply" not in model:
            raise ConfigParseError(f"{path}: model object must carry a 'ply' path")
        model_name, model_ply = "ply", model["ply"]
    elif model in ("cube", "cylinder", "blob"):
        model_name, model_ply = model, None
    else:
        raise ConfigParseError(f"{path}: unknown model '{model}'")

    sweep = raw.get("occlusion_sweep")
    if sweep is not None:
        sweep = tuple(float(v) for v in sweep)
        if not sweep or any(not 0 <= v <= 1 for v in sweep):
            raise ConfigParseError(f"{path}: occlusion_sweep values must be in [0, 1]")

    scenes = int(raw.get("scenes", 10))
    if scenes < 1:
        raise ConfigParseError(f"{path}: scenes must be >= 1")
    return RunConfig(synth, pipeline, model_name, model_ply, scenes, sweep)


def _scene_id(i: int) -> str:
    return f"scene_{i:06d}"


def _scene_configs(cfg: RunConfig, scenes: int, seed: int, sweep):
    out = []
    for i in range(scenes):
        synth = replace(cfg.synth, seed=seed + i)
        if sweep:
            synth = replace(synth, occlusion_fraction=sweep[i % len(sweep)])
        out.append(synth)
    return out


def _require_dir(path, flag: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise IoError(f"{flag} directory does not exist: {p}")
    return p


def _worker_count() -> int:
    env = os.environ.get("POSEVOLUME_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigParseError(f"POSEVOLUME_THREADS is not an integer: {env!r}")
    return min(8, os.cpu_count() or 1)


def cmd_generate(args) -> int:
    cfg = parse_config(args.config)
    out = _require_dir(args.out, "--out")
    scenes = args.scenes if args.scenes is not None else cfg.scenes
    seed = args.seed if args.seed is not None else cfg.synth.seed
    sweep = cfg.occlusion_sweep
    if args.occlusion_sweep and sweep is None:
        sweep = DEFAULT_OCCLUSION_SWEEP

    model = cfg.model()
    keypoints = select_keypoints(model, cfg.synth.n_keypoints)
    for i, synth in enumerate(_scene_configs(cfg, scenes, seed, sweep)):
        scene = generate_scene(synth, model)
        save_scene(out, _scene_id(i), scene, keypoints)
    levels = f", occlusion levels {sorted(set(s.occlusion_fraction for s in _scene_configs(cfg, scenes, seed, sweep)))}" if sweep else ""
    print(f"generated {scenes} scenes (seed {seed}, model {model.name}) in {out}{levels}")
    return 0


def _evaluate_scene(scene_dir, scene_id, method, pipeline_cfg):
    scene, keypoints, (ref_maps, query_maps) = load_scene(scene_dir, scene_id)
    model = scene.model
    record = {"scene_id": scene_id, "method": method}
    if method == "late_fusion":
        pose, info = run_late_fusion(ref_maps[0], query_maps[0], scene.pair,
                                     keypoints, pipeline_cfg.solver)
        record["kept_keypoints"] = len(info["kept"])
        record["pose"] = pose.to_dict()
    else:
        result = run_coarse_to_fine(pipeline_cfg, scene.pair, ref_maps, query_maps,
                                    model, keypoints, scene.config.prior_depth_m,
                                    gt_pose=scene.pose)
        if method == "kabsch_all":
            pose = kabsch_align(keypoints, result.fine.keypoints)
            record["pose"] = pose.to_dict()
        else:
            pose = result.pose
            record.update(result.to_record())

    add = add_metric(pose, scene.pose, model)
    adds = adds_metric(pose, scene.pose, model)
    ok = success(pose, scene.pose, model)
    row = format_result_row(scene_id, method, add, adds, ok, scene.invisible_fraction)
    record.update({"add_m": add, "adds_m": adds, "success": bool(ok),
                   "invisible_fraction": scene.invisible_fraction})
    return row, record, (ok, scene.invisible_fraction), add


def cmd_evaluate(args) -> int:
    scene_dir = _require_dir(args.scene_dir, "scene")
    out = _require_dir(args.out, "--out")
    pipeline_cfg = parse_config(args.config).pipeline if args.config else PipelineConfig()

    scene_ids = sorted(p.stem for p in scene_dir.glob("scene_*.json"))
    if not scene_ids:
        raise IoError(f"no scene manifests found in {scene_dir}")

    with ThreadPoolExecutor(max_workers=_worker_count()) as pool:
        results = list(pool.map(
            lambda sid: _evaluate_scene(scene_dir, sid, args.method, pipeline_cfg),
            scene_ids))

    rows = [r[0] for r in results]
    records = [r[1] for r in results]
    outcomes = [r[2] for r in results]
    adds = [r[3] for r in results]

    csv_path = out / f"results_{args.method}.csv"
    write_results_csv(csv_path, rows)
    with open(out / f"records_{args.method}.jsonl", "w", encoding="utf-8", newline="\n") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")

    bins = occlusion_curve(outcomes, OCCLUSION_BIN_EDGES)
    summary = {
        "method": args.method,
        "n_scenes": len(scene_ids),
        "success_rate": sum(ok for ok, _ in outcomes) / len(outcomes),
        "median_add_m": float(np.median(adds)),
        "occlusion_bins": [{"lo": b.lo, "hi": b.hi, "accuracy": b.accuracy,
                            "count": b.count} for b in bins],
    }
    with open(out / f"summary_{args.method}.json", "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(summary, sort_keys=True, indent=1) + "\n")

    manifest = RunManifest(str(args.config or ""), str(out), args.method,
                           len(scene_ids), args.seed if args.seed is not None else -1)
    with open(out / f"run_{args.method}.json", "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(manifest.to_dict(), sort_keys=True, indent=1) + "\n")

    print(f"evaluated {len(scene_ids)} scenes with {args.method}: "
          f"success {summary['success_rate']:.3f}, median ADD {summary['median_add_m']:.4f} m "
          f"-> {csv_path}")
    return 0


def cmd_report(args) -> int:
    paths = []
    for inp in args.results:
        p = Path(inp)
        if p.is_dir():
            paths.extend(sorted(p.glob("results_*.csv")))
        elif p.is_file():
            paths.append(p)
        else:
            raise IoError(f"results path does not exist: {p}")
    if not paths:
        raise IoError("no results CSVs found")

    bin_rows = []
    print(f"{'method':<12} {'scenes':>6} {'success':>8} {'med ADD':>9} {'med ADD-S':>10}")
    for path in paths:
        rows = read_results_csv(path)
        if not rows:
            continue
        method = rows[0]["method"]
        rate = sum(r["success"] for r in rows) / len(rows)
        med_add = float(np.median([r["add"] for r in rows]))
        med_adds = float(np.median([r["adds"] for r in rows]))
        print(f"{method:<12} {len(rows):>6} {rate:>8.3f} {med_add:>9.4f} {med_adds:>10.4f}")
        outcomes = [(r["success"], r["invisible_fraction"]) for r in rows]
        for b in occlusion_curve(outcomes, OCCLUSION_BIN_EDGES):
            bin_rows.append(f"{method},{b.lo!r},{b.hi!r},{b.accuracy!r},{b.count}")

    if args.out:
        out = _require_dir(args.out, "--out")
        with open(out / "occlusion_bins.csv", "w", encoding="utf-8", newline="\n") as f:
            f.write("# posevolume-occlusion-bins v1\n")
            f.write("method,bin_lo,bin_hi,accuracy,count\n")
            for row in bin_rows:
                f.write(row + "\n")
        print(f"wrote {out / 'occlusion_bins.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="posevolume",
        description="Two-view pose estimation benchmark: generate, evaluate, report.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write synthetic scenes to a directory")
    gen.add_argument("--config", required=True, help="run config JSON")
    gen.add_argument("--out", required=True, help="existing output directory")
    gen.add_argument("--scenes", type=int, default=None, help="override scene count")
    gen.add_argument("--seed", type=int, default=None, help="override base seed")
    gen.add_argument("--occlusion-sweep", action="store_true",
                     help="cycle scenes through the default occlusion levels")
    gen.set_defaults(func=cmd_generate)

    ev = sub.add_parser("evaluate", help="run a method over generated scenes")
    ev.add_argument("scene_dir", help="directory produced by generate")
    ev.add_argument("--method", required=True, choices=METHODS)
    ev.add_argument("--out", required=True, help="existing output directory")
    ev.add_argument("--config", default=None, help="run config JSON (pipeline params)")
    ev.add_argument("--scenes", type=int, default=None, help=argparse.SUPPRESS)
    ev.add_argument("--seed", type=int, default=None, help=argparse.SUPPRESS)
    ev.set_defaults(func=cmd_evaluate)

    rep = sub.add_parser("report", help="summarize result CSVs")
    rep.add_argument("results", nargs="+", help="results CSVs or directories holding them")
    rep.add_argument("--out", default=None, help="directory for plot-ready bin CSV")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PoseVolumeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
