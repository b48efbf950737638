"""Command line entry point: ``radalign generate|align|map|eval|pipeline``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from .config import ConfigError, PipelineConfig, dump_config, load_config
from .dataset_io import DatasetFormatError, read_dataset, write_dataset
from .evaluation import (
    UndefinedMetricError,
    build_lane_map,
    lateral_errors,
    mean_map_entropy_report,
    pose_rmse,
)
from .mapping import (
    EmptyCloudError,
    MapInputError,
    aggregate,
    cloud_extent,
    local_maxima,
    observed_posts,
    post_assignment_fraction,
    render_occupancy,
    write_cloud_csv,
    write_pgm,
    write_world_file,
)
from .pairs import read_pairs_csv, sample_pairs, write_pairs_csv
from .pipeline import (
    poses_of,
    read_edges_csv,
    read_poses_csv,
    run_registration,
    write_edges_csv,
    write_poses_csv,
)
from .posegraph import GraphConstructionError, OptimizationInputError, build_graph, optimize, split_by_drive
from .synthetic import generate_fleet

log = logging.getLogger("radalign")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_INTERNAL = 4

METRICS_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "mme_aligned", "mme_unaligned", "pose_rmse", "lateral"],
    "properties": {
        "schema_version": {"const": 1},
        "mme_aligned": {"type": "number"},
        "mme_unaligned": {"type": "number"},
        "pose_rmse": {"$ref": "#/$defs/rmse"},
        "pose_rmse_unaligned": {"$ref": "#/$defs/rmse"},
        "post_assignment": {
            "type": "object",
            "required": ["aligned", "unaligned", "tolerance", "posts"],
        },
        "lateral": {
            "type": "object",
            "required": ["per_class", "overall", "series"],
            "properties": {
                "overall": {"$ref": "#/$defs/lateral_summary"},
                "per_class": {
                    "type": "object",
                    "additionalProperties": {"$ref": "#/$defs/lateral_summary"},
                },
                "series": {
                    "type": "object",
                    "required": ["s", "offset", "non_offset"],
                },
            },
        },
    },
    "$defs": {
        "rmse": {
            "type": "object",
            "required": ["trans", "rot"],
            "properties": {"trans": {"type": "number", "minimum": 0}, "rot": {"type": "number", "minimum": 0}},
        },
        "lateral_summary": {
            "type": "object",
            "required": ["offset_error", "non_offset_error", "steps"],
            "properties": {
                "offset_error": {"type": ["number", "null"]},
                "non_offset_error": {"type": ["number", "null"], "minimum": 0},
                "steps": {"type": "integer", "minimum": 0},
            },
        },
    },
}


class InputMissing(Exception):
    """A stage's required input artifact does not exist."""


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _clean(v):
    if isinstance(v, float):
        return v if math.isfinite(v) else None
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.generic):
        return _clean(v.item())
    return v


def _load_dataset(cfg: PipelineConfig):
    if not (cfg.dataset_dir / "scene.json").exists():
        raise InputMissing(f"dataset not found at {cfg.dataset_dir} (run 'generate' first)")
    return read_dataset(cfg.dataset_dir)


def _load_aligned(cfg: PipelineConfig):
    path = cfg.align_dir / "aligned_poses.csv"
    if not path.exists():
        raise InputMissing(f"aligned poses not found at {path} (run 'align' first)")
    return read_poses_csv(path)


def cmd_generate(cfg: PipelineConfig) -> None:
    ds = generate_fleet(cfg.scene, cfg.drives, seed=cfg.seed)
    write_dataset(ds, cfg.dataset_dir)
    log.info("wrote %d drives, %d poses to %s", len(ds.drives), ds.pose_count, cfg.dataset_dir)


def cmd_align(cfg: PipelineConfig, resume: bool = False) -> dict:
    ds = _load_dataset(cfg)
    out = cfg.align_dir
    out.mkdir(parents=True, exist_ok=True)
    edges_path = out / "edges.csv"
    pairs_path = out / "pairs.csv"
    if resume and edges_path.exists():
        log.info("reusing %s", edges_path)
        edges = read_edges_csv(edges_path, method=cfg.method)
        pairs = read_pairs_csv(pairs_path) if pairs_path.exists() else [e.pair for e in edges]
    else:
        pairs = sample_pairs(ds, cfg.max_distance, cfg.rate, cfg.sampling_seed)
        write_pairs_csv(pairs, pairs_path)
        log.info("registering %d pairs with %s on %d worker(s)", len(pairs), cfg.method, cfg.workers)
        edges = run_registration(
            ds,
            pairs,
            method=cfg.method,
            window=cfg.window,
            cell_size=cfg.cell_size,
            point_covariance=cfg.point_covariance,
            workers=cfg.workers,
            icp_max_corr_dist=cfg.icp_max_corr_dist,
        )
        write_edges_csv(edges, edges_path)
    problem = build_graph(ds, edges, cfg.solver)
    x, rep = optimize(problem, cfg.solver)
    aligned = split_by_drive(problem, x)
    for d in ds.drives:
        aligned.setdefault(d.drive_id, np.zeros((0, 3)))
    write_poses_csv(ds, aligned, out / "aligned_poses.csv")
    report = rep.to_dict()
    report.update(
        {
            "method": cfg.method,
            "pair_count": len(pairs),
            "edge_flags": dict(sorted(Counter(e.flag for e in edges).items())),
            "accepted_edge_count": len(problem.relatives),
            "pose_count": ds.pose_count,
        }
    )
    _write_json(_clean(report), out / "report.json")
    log.info("aligned %d poses, %d edges accepted, converged=%s", ds.pose_count, len(problem.relatives), rep.converged)
    return report


def cmd_map(cfg: PipelineConfig) -> None:
    ds = _load_dataset(cfg)
    aligned = _load_aligned(cfg)
    if ds.pose_count == 0:
        raise EmptyCloudError("dataset has no poses")
    clouds = {"aligned": aggregate(ds, aligned), "unaligned": aggregate(ds, poses_of(ds, "noisy"))}
    extent = cloud_extent(*clouds.values(), cell_size=cfg.occ_cell_size)
    out = cfg.map_dir
    out.mkdir(parents=True, exist_ok=True)
    for name, cloud in clouds.items():
        grid = render_occupancy(cloud, cfg.occ_cell_size, cfg.occ_shift, cfg.occ_scale, extent)
        write_pgm(grid, out / f"occupancy_{name}.pgm")
        write_world_file(grid, out / f"occupancy_{name}.pgw")
        if cfg.write_cloud:
            write_cloud_csv(cloud, out / f"cloud_{name}.csv")
    log.info("wrote occupancy rasters to %s", out)


def evaluate(cfg: PipelineConfig, ds, aligned: dict[str, np.ndarray]) -> tuple[dict, list[list]]:
    """Metrics report and the per-step lateral series rows."""
    noisy = poses_of(ds, "noisy")
    truth = poses_of(ds, "truth")
    ca, cn = aggregate(ds, aligned), aggregate(ds, noisy)
    mme_a = mean_map_entropy_report(ca.points, cfg.mme)
    mme_u = mean_map_entropy_report(cn.points, cfg.mme)
    tr_a, rot_a = pose_rmse(aligned, truth)
    tr_u, rot_u = pose_rmse(noisy, truth)

    extent = cloud_extent(ca, cn, cell_size=cfg.occ_cell_size)
    posts = observed_posts(ds, radar_range=max((d.radar_range for d in cfg.drives), default=50.0))
    assign = {}
    for name, cloud in (("aligned", ca), ("unaligned", cn)):
        grid = render_occupancy(cloud, cfg.occ_cell_size, cfg.occ_shift, cfg.occ_scale, extent)
        assign[name] = post_assignment_fraction(local_maxima(grid), posts, cfg.post_tolerance)

    L = ds.scene.spec.corridor_length
    m = min(cfg.roi_margin, 0.5 * L)
    roi = (m, L - m)
    ref = ds.scene.reference_line()
    truth_lines = ds.scene.gt_polylines
    lat_a = lateral_errors(build_lane_map(ds, aligned), truth_lines, ref, cfg.eval_step, roi, cfg.eval_offset)
    lateral_u = None
    try:
        lat_u = lateral_errors(build_lane_map(ds, noisy), truth_lines, ref, cfg.eval_step, roi, cfg.eval_offset)
        lateral_u = lat_u.to_dict(include_series=False)
    except UndefinedMetricError:
        pass

    report = {
        "schema_version": 1,
        "mme_aligned": mme_a.value,
        "mme_unaligned": mme_u.value,
        "mme_points": {
            "aligned": {"valid": mme_a.valid_points, "skipped": mme_a.skipped_points},
            "unaligned": {"valid": mme_u.valid_points, "skipped": mme_u.skipped_points},
        },
        "pose_rmse": {"trans": tr_a, "rot": rot_a},
        "pose_rmse_unaligned": {"trans": tr_u, "rot": rot_u},
        "post_assignment": {
            "aligned": assign["aligned"],
            "unaligned": assign["unaligned"],
            "tolerance": cfg.post_tolerance,
            "posts": int(len(posts)),
        },
        "lateral": lat_a.to_dict(include_series=True),
        "lateral_unaligned": lateral_u,
    }
    rows = []
    classes = list(lat_a.class_series)
    for k, s in enumerate(lat_a.stations):
        row = [s, lat_a.offset_series[k], lat_a.non_offset_series[k]]
        for c in classes:
            row += [lat_a.class_series[c]["offset"][k], lat_a.class_series[c]["non_offset"][k]]
        rows.append(row)
    header = ["s", "offset", "non_offset"] + [f"{c}_{w}" for c in classes for w in ("offset", "non_offset")]
    return _clean(report), [header] + rows


def cmd_eval(cfg: PipelineConfig) -> dict:
    ds = _load_dataset(cfg)
    aligned = _load_aligned(cfg)
    report, rows = evaluate(cfg, ds, aligned)
    out = cfg.eval_dir
    out.mkdir(parents=True, exist_ok=True)
    _write_json(report, out / "metrics.json")
    with open(out / "lateral_series.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(rows[0])
        for r in rows[1:]:
            w.writerow([repr(float(v)) if math.isfinite(v) else "" for v in r])
    log.info(
        "pose RMSE %.3f m (unaligned %.3f m), MME %.4f (unaligned %.4f)",
        report["pose_rmse"]["trans"],
        report["pose_rmse_unaligned"]["trans"],
        report["mme_aligned"],
        report["mme_unaligned"],
    )
    return report


def cmd_pipeline(cfg: PipelineConfig, resume: bool = False) -> None:
    cmd_generate(cfg)
    cmd_align(cfg, resume=resume)
    cmd_map(cfg)
    cmd_eval(cfg)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML configuration file")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config value, e.g. --set sampling.rate=0.2 (repeatable)",
    )
    common.add_argument("--method", choices=["grid", "icp"], help="registration method")
    common.add_argument("--workers", type=int, help="registration worker processes")
    common.add_argument("--resume", action="store_true", help="reuse an existing edges.csv")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="radalign", description="Multi-drive radar pose alignment.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic fleet dataset")
    sub.add_parser("align", parents=[common], help="sample pairs, register them, optimise poses")
    sub.add_parser("map", parents=[common], help="render aligned and unaligned occupancy rasters")
    sub.add_parser("eval", parents=[common], help="compute the metrics report")
    sub.add_parser("pipeline", parents=[common], help="run every stage")
    sub.add_parser("show-config", parents=[common], help="print the effective configuration")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s"
    )
    overrides = list(args.overrides)
    if args.method:
        overrides.append(f"method={args.method}")
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "align":
            cmd_align(cfg, resume=args.resume)
        elif args.command == "map":
            cmd_map(cfg)
        elif args.command == "eval":
            cmd_eval(cfg)
        elif args.command == "pipeline":
            cmd_pipeline(cfg, resume=args.resume)
        elif args.command == "show-config":
            sys.stdout.write(dump_config(cfg.raw))
    except (ConfigError, InputMissing, DatasetFormatError, EmptyCloudError, MapInputError) as exc:
        print(f"radalign: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GraphConstructionError, OptimizationInputError, UndefinedMetricError) as exc:
        print(f"radalign: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"radalign: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"radalign: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # invariant violations and bugs
        print(f"radalign: internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
