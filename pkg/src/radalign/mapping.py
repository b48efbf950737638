"""Global radar cloud aggregation and the sigmoid-contrast occupancy raster."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .geometry import transform_points
from .synthetic import FleetDataset

DEFAULT_SHIFT = 0.05
DEFAULT_SCALE = 60.0


class MapInputError(ValueError):
    pass


class EmptyCloudError(MapInputError):
    pass


@dataclass
class GlobalCloud:
    points: np.ndarray  # (M, 2) world frame
    drive_index: np.ndarray  # (M,) index into drive_ids
    pose_index: np.ndarray  # (M,)
    drive_ids: list[str]

    def __len__(self) -> int:
        return len(self.points)

    def provenance(self, k: int) -> tuple[str, int]:
        return self.drive_ids[int(self.drive_index[k])], int(self.pose_index[k])


@dataclass
class OccupancyGrid:
    cell_size: float
    origin: tuple[float, float]  # world (x, y) of the lower-left corner of the raster
    values: np.ndarray  # (rows, cols) in [0, 1], row 0 = northmost
    counts: np.ndarray  # raw histogram, same layout
    sigmoid_shift: float = DEFAULT_SHIFT
    sigmoid_scale: float = DEFAULT_SCALE

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def cell_centers(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """World coordinates of the given (row, col) cell centres."""
        n_rows = self.values.shape[0]
        x = self.origin[0] + (np.asarray(cols) + 0.5) * self.cell_size
        y = self.origin[1] + (n_rows - np.asarray(rows) - 0.5) * self.cell_size
        return np.column_stack([x, y])


def aggregate(dataset: FleetDataset, poses: dict[str, np.ndarray]) -> GlobalCloud:
    """Transform every scan into the world frame with the given per-drive poses."""
    pts, di, pi = [], [], []
    for k, d in enumerate(dataset.drives):
        if d.drive_id not in poses:
            raise MapInputError(f"no poses for drive {d.drive_id}")
        P = np.asarray(poses[d.drive_id], dtype=float)
        if P.shape != (len(d.scans), 3):
            raise MapInputError(
                f"drive {d.drive_id}: {len(P)} poses for {len(d.scans)} scans"
            )
        for i, scan in enumerate(d.scans):
            if len(scan) == 0:
                continue
            pts.append(transform_points(P[i], scan))
            di.append(np.full(len(scan), k, dtype=np.int64))
            pi.append(np.full(len(scan), i, dtype=np.int64))
    if not pts:
        return GlobalCloud(np.zeros((0, 2)), np.zeros(0, np.int64), np.zeros(0, np.int64), dataset.drive_ids)
    return GlobalCloud(np.concatenate(pts), np.concatenate(di), np.concatenate(pi), dataset.drive_ids)


def cloud_extent(*clouds: GlobalCloud, cell_size: float = 0.1, margin: float = 1.0):
    """Lattice-aligned (xmin, ymin, xmax, ymax) covering all clouds."""
    pts = [c.points for c in clouds if len(c)]
    if not pts:
        raise EmptyCloudError("cannot compute the extent of an empty cloud")
    allp = np.concatenate(pts)
    lo = np.floor((allp.min(axis=0) - margin) / cell_size) * cell_size
    hi = np.ceil((allp.max(axis=0) + margin) / cell_size) * cell_size
    return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])


def sigmoid(v, shift: float = DEFAULT_SHIFT, scale: float = DEFAULT_SCALE):
    return 1.0 / (1.0 + np.exp(-scale * (np.asarray(v, dtype=float) - shift)))


def render_occupancy(
    cloud: GlobalCloud,
    cell_size: float = 0.1,
    shift: float = DEFAULT_SHIFT,
    scale: float = DEFAULT_SCALE,
    extent: tuple[float, float, float, float] | None = None,
) -> OccupancyGrid:
    """Max-normalised point histogram followed by a sigmoid contrast curve.

    ``extent`` fixes the raster bounds (use :func:`cloud_extent` over several
    clouds to get pixel-compatible rasters); points outside are ignored.
    """
    if len(cloud) == 0:
        raise EmptyCloudError("cannot render an empty cloud")
    if not cell_size > 0:
        raise MapInputError("cell_size must be > 0")
    if extent is None:
        extent = cloud_extent(cloud, cell_size=cell_size)
    x0, y0, x1, y1 = extent
    nx = max(1, int(round((x1 - x0) / cell_size)))
    ny = max(1, int(round((y1 - y0) / cell_size)))
    col = np.floor((cloud.points[:, 0] - x0) / cell_size).astype(np.int64)
    row_up = np.floor((cloud.points[:, 1] - y0) / cell_size).astype(np.int64)
    ok = (col >= 0) & (col < nx) & (row_up >= 0) & (row_up < ny)
    flat = (ny - 1 - row_up[ok]) * nx + col[ok]
    counts = np.bincount(flat, minlength=nx * ny).reshape(ny, nx).astype(float)
    peak = counts.max()
    norm = counts / peak if peak > 0 else counts
    values = sigmoid(norm, shift, scale)
    return OccupancyGrid(float(cell_size), (float(x0), float(y0)), values, counts, float(shift), float(scale))


def local_maxima(
    grid: OccupancyGrid,
    smooth_sigma: float = 0.1,
    nms_radius: float = 0.5,
    min_fraction: float = 0.2,
) -> np.ndarray:
    """World positions of peaks in the point histogram.

    The counts are smoothed with a Gaussian of ``smooth_sigma`` metres, then a
    cell is a peak when it is the maximum of its ``nms_radius`` neighbourhood
    and reaches ``min_fraction`` of the smoothed maximum.
    """
    sm = ndimage.gaussian_filter(grid.counts, smooth_sigma / grid.cell_size, mode="constant")
    size = 2 * int(math.ceil(nms_radius / grid.cell_size)) + 1
    mx = ndimage.maximum_filter(sm, size=size, mode="constant")
    peak = (sm == mx) & (sm >= min_fraction * sm.max()) & (sm > 0)
    rows, cols = np.nonzero(peak)
    return grid.cell_centers(rows, cols)


def post_assignment_fraction(peaks: np.ndarray, posts: np.ndarray, tolerance: float = 0.2) -> float:
    """Fraction of ``posts`` that have a peak within ``tolerance`` metres."""
    if len(posts) == 0:
        raise MapInputError("no posts to assign")
    if len(peaks) == 0:
        return 0.0
    d, _ = cKDTree(peaks).query(posts, k=1)
    return float(np.mean(d <= tolerance))


def observed_posts(dataset: FleetDataset, radar_range: float = 50.0, min_hits: int = 1) -> np.ndarray:
    """True posts in radar range of at least ``min_hits`` truth poses."""
    posts = dataset.scene.posts
    hits = np.zeros(len(posts), dtype=np.int64)
    tree = cKDTree(posts)
    for d in dataset.drives:
        for xyt in d.truth.xyt:
            hits[tree.query_ball_point(xyt[:2], r=radar_range)] += 1
    return posts[hits >= min_hits]


def write_pgm(grid: OccupancyGrid, path) -> None:
    """16-bit binary PGM, value = round(v * 65535), big-endian samples."""
    data = np.round(np.clip(grid.values, 0.0, 1.0) * 65535.0).astype(">u2")
    rows, cols = data.shape
    with open(Path(path), "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    # exactly one whitespace byte ends the header; pixel bytes may look like whitespace
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    cols, rows, maxval = (int(g) for g in m.groups())
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(raw, dtype=dtype, count=rows * cols, offset=m.end()).reshape(rows, cols)


def world_file_lines(grid: OccupancyGrid) -> list[str]:
    cs = grid.cell_size
    rows = grid.values.shape[0]
    x_c = grid.origin[0] + 0.5 * cs
    y_c = grid.origin[1] + (rows - 0.5) * cs
    return [repr(float(v)) for v in (cs, 0.0, 0.0, -cs, x_c, y_c)]


def write_world_file(grid: OccupancyGrid, path) -> None:
    Path(path).write_text("\n".join(world_file_lines(grid)) + "\n")


def write_cloud_csv(cloud: GlobalCloud, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "drive_id", "pose_index"])
        for (x, y), k, i in zip(cloud.points, cloud.drive_index, cloud.pose_index):
            w.writerow([repr(float(x)), repr(float(y)), cloud.drive_ids[int(k)], int(i)])
