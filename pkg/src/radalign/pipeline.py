"""Stage glue: pair registration over a worker pool and the CSV artifacts
that connect stages."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from .correlation import (
    CorrelationError,
    CorrelationResult,
    DegenerateCorrelationError,
    EmptyScanError,
    SearchWindow,
    correlate,
    icp_baseline,
)
from .geometry import Transform2, relative_xyt
from .pairs import CONSECUTIVE, CROSS, PairCandidate
from .synthetic import FleetDataset

EDGE_COLUMNS = ["drive_a", "idx_a", "drive_b", "idx_b", "dx", "dy", "dtheta", "peak", "z", "flag"]
POSE_COLUMNS = ["drive_id", "pose_index", "t", "x", "y", "theta"]


def initial_guess(dataset: FleetDataset, pair: PairCandidate, poses: dict[str, np.ndarray] | None = None):
    """Relative transform between the two poses of ``pair`` from ``poses``
    (default: the noisy GNSS poses)."""
    if poses is None:
        a = dataset.drive(pair.a[0]).noisy.xyt[pair.a[1]]
        b = dataset.drive(pair.b[0]).noisy.xyt[pair.b[1]]
    else:
        a = poses[pair.a[0]][pair.a[1]]
        b = poses[pair.b[0]][pair.b[1]]
    return Transform2.from_array(relative_xyt(a, b))


def register_pair(
    scan_a: np.ndarray,
    scan_b: np.ndarray,
    guess: Transform2,
    pair: PairCandidate,
    method: str = "grid",
    window: SearchWindow = SearchWindow(),
    cell_size: float = 0.1,
    point_covariance: float = 0.05,
    icp_max_corr_dist: float = 2.0,
) -> CorrelationResult:
    if method == "grid":
        try:
            res, _ = correlate(scan_a, scan_b, guess, window, cell_size, point_covariance, pair)
        except EmptyScanError:
            return CorrelationResult.failed(pair, "empty", "grid")
        except DegenerateCorrelationError:
            return CorrelationResult.failed(pair, "degenerate", "grid")
        return res
    if method == "icp":
        try:
            out = icp_baseline(scan_a, scan_b, guess, max_corr_dist=icp_max_corr_dist)
        except CorrelationError:
            return CorrelationResult.failed(pair, "empty", "icp")
        flag = "ok" if out.converged else "noconv"
        return CorrelationResult(pair, out.transform, out.rmse, float("nan"), flag, "icp")
    raise ValueError(f"unknown registration method {method!r}")


def _task(args):
    return register_pair(*args)


def run_registration(
    dataset: FleetDataset,
    pairs: Sequence[PairCandidate],
    method: str = "grid",
    window: SearchWindow = SearchWindow(),
    cell_size: float = 0.1,
    point_covariance: float = 0.05,
    workers: int = 1,
    icp_max_corr_dist: float = 2.0,
) -> list[CorrelationResult]:
    """Register every pair; output order follows ``pairs`` regardless of ``workers``."""
    tasks = []
    for p in pairs:
        sa = dataset.drive(p.a[0]).scans[p.a[1]]
        sb = dataset.drive(p.b[0]).scans[p.b[1]]
        tasks.append(
            (sa, sb, initial_guess(dataset, p), p, method, window, cell_size, point_covariance, icp_max_corr_dist)
        )
    if workers <= 1 or len(tasks) < 2:
        return [_task(t) for t in tasks]
    chunk = max(1, len(tasks) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_task, tasks, chunksize=chunk))


def _fmt(v: float) -> str:
    return repr(float(v))


def write_edges_csv(edges: Sequence[CorrelationResult], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EDGE_COLUMNS)
        for e in edges:
            t = e.transform
            w.writerow(
                [e.pair.a[0], e.pair.a[1], e.pair.b[0], e.pair.b[1],
                 _fmt(t.dx), _fmt(t.dy), _fmt(t.dtheta), _fmt(e.peak), _fmt(e.z_score), e.flag]
            )


def read_edges_csv(path, method: str = "grid") -> list[CorrelationResult]:
    out = []
    with open(Path(path), newline="") as fh:
        for row in csv.DictReader(fh):
            a = (row["drive_a"], int(row["idx_a"]))
            b = (row["drive_b"], int(row["idx_b"]))
            kind = CONSECUTIVE if a[0] == b[0] else CROSS
            t = Transform2(float(row["dx"]), float(row["dy"]), float(row["dtheta"]))
            out.append(
                CorrelationResult(
                    PairCandidate(a, b, kind), t, float(row["peak"]), float(row["z"]), row["flag"], method
                )
            )
    return out


def write_poses_csv(dataset: FleetDataset, poses: dict[str, np.ndarray], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POSE_COLUMNS)
        for d in dataset.drives:
            arr = poses[d.drive_id]
            for i in range(len(d)):
                w.writerow([d.drive_id, i, _fmt(d.truth.t[i]), *(_fmt(v) for v in arr[i])])


def read_poses_csv(path) -> dict[str, np.ndarray]:
    rows: dict[str, list] = {}
    with open(Path(path), newline="") as fh:
        for r in csv.DictReader(fh):
            rows.setdefault(r["drive_id"], []).append(
                (int(r["pose_index"]), float(r["x"]), float(r["y"]), float(r["theta"]))
            )
    out = {}
    for k, v in rows.items():
        v.sort()
        if [i for i, *_ in v] != list(range(len(v))):
            raise ValueError(f"{path}: pose indices of drive {k} are not contiguous")
        out[k] = np.array([row[1:] for row in v], dtype=float)
    return out


def poses_of(dataset: FleetDataset, which: str = "noisy") -> dict[str, np.ndarray]:
    return {d.drive_id: np.array(getattr(d, which).xyt) for d in dataset.drives}


def finite(x) -> bool:
    return math.isfinite(x)
