"""Grid-based scan correlation and a point-to-point ICP comparator.

Scan 1 is splatted into a grid of isotropic Gaussian densities.  Scan 2 is
placed in scan 1's frame via the initial guess, rotated about its own ego
origin over the angular search range and splatted again for every
rotation.  The translation sweep shifts the second grid by whole cells and
takes the cell-wise product sum, which yields a 3D correlation volume over
(rotation, x-shift, y-shift).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import fft as sfft
from scipy.spatial import cKDTree

from .geometry import Transform2, compose
from .pairs import PairCandidate

DEFAULT_CELL = 0.1
DEFAULT_VARIANCE = 0.05
TRUNCATE_SIGMAS = 3.0


class CorrelationError(ValueError):
    pass


class EmptyScanError(CorrelationError):
    pass


class DegenerateCorrelationError(CorrelationError):
    pass


@dataclass(frozen=True)
class SearchWindow:
    eps_r: float = math.radians(1.0)
    eps_l: float = 2.0
    step_r: float = math.radians(0.1)
    step_l: float = DEFAULT_CELL

    def validate(self, cell_size: float = DEFAULT_CELL) -> None:
        if not (self.eps_r >= 0 and self.eps_l >= 0 and self.step_r > 0 and self.step_l > 0):
            raise ValueError("search window extents must be >= 0 and steps > 0")
        if abs(self.step_l - cell_size) > 1e-12:
            raise ValueError(f"step_l ({self.step_l}) must equal the cell size ({cell_size})")
        for eps, step, name in ((self.eps_r, self.step_r, "eps_r/step_r"), (self.eps_l, self.step_l, "eps_l/step_l")):
            q = eps / step
            if abs(q - round(q)) > 1e-9:
                raise ValueError(f"{name} = {q} is not an integer")

    @property
    def n_rot(self) -> int:
        return int(round(self.eps_r / self.step_r))

    @property
    def n_shift(self) -> int:
        return int(round(self.eps_l / self.step_l))

    def rotations(self) -> np.ndarray:
        return np.arange(-self.n_rot, self.n_rot + 1) * self.step_r

    def offsets(self) -> np.ndarray:
        return np.arange(-self.n_shift, self.n_shift + 1) * self.step_l

    @property
    def shape(self) -> tuple[int, int, int]:
        return (2 * self.n_rot + 1, 2 * self.n_shift + 1, 2 * self.n_shift + 1)


@dataclass
class SplatGrid:
    """Gaussian-splatted raster; ``values[ix, iy]`` is sampled at the cell centre
    ``origin + (ix + 0.5, iy + 0.5) * cell_size``."""

    cell_size: float
    origin: np.ndarray
    values: np.ndarray

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        nx, ny = self.values.shape
        cx = self.origin[0] + (np.arange(nx) + 0.5) * self.cell_size
        cy = self.origin[1] + (np.arange(ny) + 0.5) * self.cell_size
        return cx, cy


@dataclass
class CorrelationVolume:
    values: np.ndarray  # (n_rot, n_x, n_y)
    rotations: np.ndarray
    offsets_x: np.ndarray
    offsets_y: np.ndarray


@dataclass
class CorrelationResult:
    pair: PairCandidate | None
    transform: Transform2
    peak: float
    z_score: float
    flag: str = "ok"  # ok | boundary | degenerate | empty | noconv
    method: str = "grid"
    index: tuple[int, int, int] | None = field(default=None, compare=False)

    @property
    def on_boundary(self) -> bool:
        return self.flag == "boundary"

    @classmethod
    def failed(cls, pair, flag: str, method: str = "grid") -> "CorrelationResult":
        nan = float("nan")
        return cls(pair, Transform2(nan, nan, 0.0), nan, nan, flag, method)


def _sigma(variance: float) -> float:
    return math.sqrt(variance)


def splat_into(
    points: np.ndarray,
    origin: np.ndarray,
    shape: tuple[int, int],
    cell_size: float = DEFAULT_CELL,
    variance: float = DEFAULT_VARIANCE,
) -> np.ndarray:
    """Accumulate truncated isotropic normal densities of ``points`` on a grid."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    nx, ny = shape
    sigma = _sigma(variance)
    cutoff2 = (TRUNCATE_SIGMAS * sigma) ** 2
    R = int(math.ceil(TRUNCATE_SIGMAS * sigma / cell_size)) + 1
    off = np.arange(-R, R + 1)

    base = np.floor((pts - origin) / cell_size).astype(np.int64)
    ix = base[:, 0, None, None] + off[None, :, None]
    iy = base[:, 1, None, None] + off[None, None, :]
    cx = origin[0] + (ix + 0.5) * cell_size
    cy = origin[1] + (iy + 0.5) * cell_size
    d2 = (cx - pts[:, 0, None, None]) ** 2 + (cy - pts[:, 1, None, None]) ** 2
    ix, iy, d2 = np.broadcast_arrays(ix, iy, d2)
    keep = (d2 <= cutoff2) & (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
    dens = np.exp(-0.5 * d2[keep] / variance) / (2.0 * math.pi * variance)
    flat = ix[keep] * ny + iy[keep]
    return np.bincount(flat, weights=dens, minlength=nx * ny).reshape(nx, ny)


def splat(
    scan: np.ndarray, cell_size: float = DEFAULT_CELL, point_covariance: float = DEFAULT_VARIANCE
) -> SplatGrid:
    pts = np.asarray(scan, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        raise EmptyScanError("cannot splat an empty scan")
    pad = TRUNCATE_SIGMAS * _sigma(point_covariance) + cell_size
    origin, shape = _lattice_extent(pts.min(axis=0) - pad, pts.max(axis=0) + pad, cell_size)
    return SplatGrid(cell_size, origin, splat_into(pts, origin, shape, cell_size, point_covariance))


def _lattice_extent(lo, hi, cell_size):
    """Grid snapped to the lattice of multiples of ``cell_size`` covering [lo, hi]."""
    i0 = np.floor(np.asarray(lo) / cell_size).astype(np.int64)
    i1 = np.ceil(np.asarray(hi) / cell_size).astype(np.int64)
    origin = i0 * cell_size
    shape = tuple(int(v) for v in (i1 - i0))
    return origin, shape


def _rotate_about(points: np.ndarray, center: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    d = points - center
    return np.column_stack([c * d[:, 0] - s * d[:, 1], s * d[:, 0] + c * d[:, 1]]) + center


def _check_scan(scan) -> np.ndarray:
    pts = np.asarray(scan, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        raise EmptyScanError("empty scan")
    return pts


def _prepare(scan1, scan2, initial_guess: Transform2, window: SearchWindow, cell_size, variance):
    window.validate(cell_size)
    p1 = _check_scan(scan1)
    p2 = initial_guess.apply(_check_scan(scan2))
    center = np.array([initial_guess.dx, initial_guess.dy])
    rotated = [_rotate_about(p2, center, th) for th in window.rotations()]
    allpts = np.concatenate([p1, *rotated])
    pad = window.n_shift * cell_size + TRUNCATE_SIGMAS * _sigma(variance) + 2 * cell_size
    origin, shape = _lattice_extent(allpts.min(axis=0) - pad, allpts.max(axis=0) + pad, cell_size)
    return p1, rotated, center, origin, shape


def _zero_floor(scale: float) -> float:
    # FFT round-off sits ~1e-16 * scale; true nonzero overlaps of 3-sigma
    # truncated splats are many orders of magnitude above this
    return 1e-12 * scale


def correlation_volume(
    scan1,
    scan2,
    initial_guess: Transform2 = Transform2(),
    window: SearchWindow = SearchWindow(),
    cell_size: float = DEFAULT_CELL,
    point_covariance: float = DEFAULT_VARIANCE,
) -> CorrelationVolume:
    p1, rotated, _, origin, shape = _prepare(scan1, scan2, initial_guess, window, cell_size, point_covariance)
    n = window.n_shift
    g1 = splat_into(p1, origin, shape, cell_size, point_covariance)
    fshape = (sfft.next_fast_len(shape[0] + n, real=True), sfft.next_fast_len(shape[1] + n, real=True))
    f1 = np.conj(sfft.rfft2(g1, s=fshape))
    ix = np.arange(-n, n + 1) % fshape[0]
    iy = np.arange(-n, n + 1) % fshape[1]
    norm1 = float(np.sqrt(np.sum(g1 * g1)))
    vol = np.empty(window.shape)
    for k, p2r in enumerate(rotated):
        g2 = splat_into(p2r, origin, shape, cell_size, point_covariance)
        corr = sfft.irfft2(f1 * sfft.rfft2(g2, s=fshape), s=fshape)
        sl = corr[np.ix_(ix, iy)]
        floor = _zero_floor(norm1 * float(np.sqrt(np.sum(g2 * g2))))
        sl[sl <= floor] = 0.0
        vol[k] = sl
    return CorrelationVolume(vol, window.rotations(), window.offsets(), window.offsets())


def select_peak(values: np.ndarray) -> tuple[int, int, int]:
    """Argmax with deterministic tie-breaking.

    Ties prefer the smallest rotation magnitude, then the smallest shift,
    then the lexicographically smallest index.
    """
    peak = values.max()
    cands = np.argwhere(values == peak)
    if len(cands) == 1:
        return tuple(int(v) for v in cands[0])
    cr, cx, cy = (np.array(values.shape) - 1) // 2
    keys = [(abs(r - cr), (x - cx) ** 2 + (y - cy) ** 2, r, x, y) for r, x, y in cands.tolist()]
    best = min(keys)
    return best[2], best[3], best[4]


def _on_boundary(idx, shape) -> bool:
    return any(n > 1 and (i == 0 or i == n - 1) for i, n in zip(idx, shape))


def correlate(
    scan1,
    scan2,
    initial_guess: Transform2 = Transform2(),
    window: SearchWindow = SearchWindow(),
    cell_size: float = DEFAULT_CELL,
    point_covariance: float = DEFAULT_VARIANCE,
    pair: PairCandidate | None = None,
) -> tuple[CorrelationResult, CorrelationVolume]:
    """Register ``scan2`` against ``scan1``.

    ``initial_guess`` is pose 2 expressed in the frame of pose 1.  The returned
    transform is the refined estimate of the same quantity.
    """
    vol = correlation_volume(scan1, scan2, initial_guess, window, cell_size, point_covariance)
    C = vol.values
    sd = float(C.std())
    if not (sd > 0.0 and math.isfinite(sd)):
        raise DegenerateCorrelationError("flat correlation volume (no overlap between scans)")
    r, x, y = select_peak(C)
    peak = float(C[r, x, y])
    z = (peak - float(C.mean())) / sd
    # a grid shift by +s means scan 2 sits at +s relative to scan 1, so the
    # correction moves it back by -s
    corr = Transform2(-vol.offsets_x[x], -vol.offsets_y[y], 0.0)
    rot = Transform2(0.0, 0.0, float(vol.rotations[r]))
    transform = compose(corr, compose(initial_guess, rot))
    flag = "boundary" if _on_boundary((r, x, y), C.shape) else "ok"
    return CorrelationResult(pair, transform, peak, z, flag, "grid", (r, x, y)), vol


def correlation_volume_reference(
    scan1,
    scan2,
    initial_guess: Transform2 = Transform2(),
    window: SearchWindow = SearchWindow(),
    cell_size: float = DEFAULT_CELL,
    point_covariance: float = DEFAULT_VARIANCE,
) -> np.ndarray:
    """Deliberately naive volume: every (r, x, y) entry evaluates both grids from
    scratch at the cell centres and sums their product.  Slow; for testing."""
    window.validate(cell_size)
    p1 = _check_scan(scan1)
    p2 = initial_guess.apply(_check_scan(scan2))
    center = np.array([initial_guess.dx, initial_guess.dy])
    sigma = _sigma(point_covariance)
    cut2 = (TRUNCATE_SIGMAS * sigma) ** 2

    def density(cells, pts):
        d2 = (cells[:, 0, None] - pts[None, :, 0]) ** 2 + (cells[:, 1, None] - pts[None, :, 1]) ** 2
        inside = d2 <= cut2
        row = np.nonzero(inside)[0]
        k = np.exp(d2[inside] * (-0.5 / point_covariance))
        return np.bincount(row, weights=k, minlength=len(cells)) / (2.0 * math.pi * point_covariance)

    # cells where scan 1's grid can be nonzero; every other cell adds 0
    lo = np.floor((p1.min(axis=0) - TRUNCATE_SIGMAS * sigma) / cell_size).astype(int) - 1
    hi = np.ceil((p1.max(axis=0) + TRUNCATE_SIGMAS * sigma) / cell_size).astype(int) + 1
    gx, gy = np.meshgrid(np.arange(lo[0], hi[0]), np.arange(lo[1], hi[1]), indexing="ij")
    idx = np.column_stack([gx.ravel(), gy.ravel()])
    near = np.zeros(len(idx), dtype=bool)
    for p in p1:
        near |= np.sum(((idx + 0.5) * cell_size - p) ** 2, axis=1) <= cut2
    idx = idx[near]

    n = window.n_shift
    out = np.zeros(window.shape)
    for ir, th in enumerate(window.rotations()):
        p2r = _rotate_about(p2, center, th)
        for ixo in range(-n, n + 1):
            # one batch per x offset; each y offset still gets its own cell
            # coordinates and fresh density evaluations of both scans
            shifts = np.arange(-n, n + 1)
            c1 = np.tile((idx + 0.5) * cell_size, (len(shifts), 1))
            c2 = np.concatenate([(idx + [ixo, iyo] + 0.5) * cell_size for iyo in shifts])
            prod = (density(c1, p1) * density(c2, p2r)).reshape(len(shifts), len(idx))
            out[ir, ixo + n, :] = prod.sum(axis=1)
    return out


class IcpResult(NamedTuple):
    transform: Transform2
    converged: bool
    iterations: int
    rmse: float


def _procrustes_2d(src: np.ndarray, dst: np.ndarray) -> Transform2:
    """Least-squares rigid transform mapping ``src`` onto ``dst``."""
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - ms, dst - md
    sxx = np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1])
    sxy = np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
    th = math.atan2(sxy, sxx)
    c, s = math.cos(th), math.sin(th)
    t = md - np.array([c * ms[0] - s * ms[1], s * ms[0] + c * ms[1]])
    return Transform2(float(t[0]), float(t[1]), th)


def icp_baseline(
    scan1,
    scan2,
    initial_guess: Transform2 = Transform2(),
    max_iter: int = 50,
    tol: float = 1e-6,
    max_corr_dist: float = 2.0,
) -> IcpResult:
    """Point-to-point ICP of ``scan2`` onto ``scan1`` starting from ``initial_guess``."""
    p1 = np.asarray(scan1, dtype=float).reshape(-1, 2)
    p2 = np.asarray(scan2, dtype=float).reshape(-1, 2)
    if len(p1) < 3 or len(p2) < 3:
        raise CorrelationError("ICP needs at least 3 points per scan")
    tree = cKDTree(p1)
    T = initial_guess
    rmse = float("nan")
    for it in range(1, max_iter + 1):
        moved = T.apply(p2)
        dist, nn = tree.query(moved, distance_upper_bound=max_corr_dist)
        ok = np.isfinite(dist)
        if ok.sum() < 3:
            return IcpResult(T, False, it, rmse)
        rmse = float(np.sqrt(np.mean(dist[ok] ** 2)))
        step = _procrustes_2d(moved[ok], p1[nn[ok]])
        T = compose(step, T)
        if max(abs(step.dx), abs(step.dy), abs(step.dtheta)) < tol:
            return IcpResult(T, True, it, rmse)
    return IcpResult(T, False, max_iter, rmse)
