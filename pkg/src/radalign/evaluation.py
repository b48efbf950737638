"""Map and trajectory quality metrics.

Mean Map Entropy (planar form), pose RMSE against ground truth, and the
lateral offset / non-offset errors between two sets of classified
polylines sampled along a reference line.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import wrap_angle
from .synthetic import LINE_CLASSES, Polyline

MME_EPS = 1e-9


class MetricInputError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class MmeConfig:
    radius: float = 1.0
    min_neighbors: int = 5

    def validate(self) -> None:
        if not self.radius > 0:
            raise ValueError("mme.radius must be > 0")
        if int(self.min_neighbors) != self.min_neighbors or self.min_neighbors < 1:
            raise ValueError("mme.min_neighbors must be an integer >= 1")


@dataclass
class MmeResult:
    value: float
    valid_points: int
    skipped_points: int


def mean_map_entropy_report(points: np.ndarray, cfg: MmeConfig = MmeConfig()) -> MmeResult:
    """Mean over points of the entropy of their neighbourhood's 2D covariance.

    Neighbourhoods include the query point itself; points with fewer than
    ``cfg.min_neighbors`` neighbours are skipped.
    """
    cfg.validate()
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < cfg.min_neighbors + 1:
        raise UndefinedMetricError(f"need at least {cfg.min_neighbors + 1} points, got {len(pts)}")
    tree = cKDTree(pts)
    nbrs = tree.query_ball_point(pts, r=cfg.radius)
    counts = np.fromiter((len(n) for n in nbrs), dtype=np.int64, count=len(pts))
    valid = np.flatnonzero(counts - 1 >= cfg.min_neighbors)
    if len(valid) == 0:
        raise UndefinedMetricError("no point has enough neighbours within the MME radius")

    # neighbourhood moments via flattened index lists
    idx = np.concatenate([np.asarray(nbrs[i], dtype=np.int64) for i in valid])
    owner = np.repeat(np.arange(len(valid)), counts[valid])
    n = counts[valid].astype(float)
    q = pts[idx]
    mean = np.column_stack([np.bincount(owner, q[:, 0]), np.bincount(owner, q[:, 1])]) / n[:, None]
    d = q - mean[owner]
    sxx = np.bincount(owner, d[:, 0] * d[:, 0]) / (n - 1)
    syy = np.bincount(owner, d[:, 1] * d[:, 1]) / (n - 1)
    sxy = np.bincount(owner, d[:, 0] * d[:, 1]) / (n - 1)
    det = (sxx + MME_EPS) * (syy + MME_EPS) - sxy * sxy
    h = 0.5 * np.log((2.0 * math.pi * math.e) ** 2 * det)
    return MmeResult(float(np.mean(h)), int(len(valid)), int(len(pts) - len(valid)))


def mean_map_entropy(points: np.ndarray, cfg: MmeConfig = MmeConfig()) -> float:
    return mean_map_entropy_report(points, cfg).value


def pose_rmse(aligned: dict[str, np.ndarray], truth: dict[str, np.ndarray]) -> tuple[float, float]:
    """(translational RMSE in metres, angular RMSE in radians) over all poses."""
    if set(aligned) != set(truth):
        raise MetricInputError(f"drive sets differ: {sorted(aligned)} vs {sorted(truth)}")
    d2, a2 = [], []
    for k in sorted(truth):
        A = np.asarray(aligned[k], dtype=float).reshape(-1, 3)
        T = np.asarray(truth[k], dtype=float).reshape(-1, 3)
        if A.shape != T.shape:
            raise MetricInputError(f"drive {k}: {len(A)} aligned poses vs {len(T)} truth poses")
        d2.append(np.sum((A[:, :2] - T[:, :2]) ** 2, axis=1))
        a2.append(wrap_angle(A[:, 2] - T[:, 2]) ** 2)
    if not d2 or sum(len(v) for v in d2) == 0:
        raise MetricInputError("no poses to compare")
    return float(math.sqrt(np.mean(np.concatenate(d2)))), float(math.sqrt(np.mean(np.concatenate(a2))))


# --- lateral offset / non-offset errors -------------------------------------


@dataclass
class _Station:
    s: float
    origin: np.ndarray
    normal: np.ndarray


def _stations(reference: np.ndarray, step: float, roi: tuple[float, float] | None) -> list[_Station]:
    ref = np.asarray(reference, dtype=float).reshape(-1, 2)
    if len(ref) < 2:
        raise MetricInputError("reference line needs at least two vertices")
    seg = np.diff(ref, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    s0, s1 = (0.0, cum[-1]) if roi is None else roi
    if s0 < -1e-9 or s1 > cum[-1] + 1e-9 or s1 < s0:
        raise MetricInputError(f"ROI {roi} is not covered by the reference line (length {cum[-1]:.3f})")
    n = int(math.floor((s1 - s0) / step + 1e-9)) + 1
    out = []
    for s in s0 + step * np.arange(n):
        k = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg) - 1)
        k = max(k, 0)
        u = seg[k] / seg_len[k]
        out.append(_Station(float(s), ref[k] + u * (s - cum[k]), np.array([-u[1], u[0]])))
    return out


def _lateral_hits(st: _Station, line: np.ndarray) -> list[float]:
    """Signed lateral positions where the station's normal crosses ``line``."""
    tangent = np.array([st.normal[1], -st.normal[0]])
    rel = line - st.origin
    a = rel @ tangent  # along-reference coordinate; crossing where it is 0
    b = rel @ st.normal
    hits = []
    for i in range(len(line) - 1):
        a0, a1 = a[i], a[i + 1]
        if a0 == 0.0 and a1 == 0.0:
            continue
        if (a0 <= 0.0 <= a1) or (a1 <= 0.0 <= a0):
            f = a0 / (a0 - a1)
            # a vertex shared by two segments is reported once
            if f == 1.0 and i + 1 < len(line) - 1:
                continue
            hits.append(float(b[i] + f * (b[i + 1] - b[i])))
    return hits


def associate(gen: Sequence[float], tru: Sequence[float]) -> list[tuple[int, int]]:
    """Greedy one-to-one nearest association of two sets of lateral positions."""
    pairs = sorted(
        ((abs(g - t), i, j) for i, g in enumerate(gen) for j, t in enumerate(tru)),
    )
    used_g, used_t, out = set(), set(), []
    for _, i, j in pairs:
        if i in used_g or j in used_t:
            continue
        used_g.add(i)
        used_t.add(j)
        out.append((i, j))
    return sorted(out)


@dataclass
class LateralErrorReport:
    per_class: dict[str, dict[str, float]]
    overall: dict[str, float]
    stations: np.ndarray  # arclength of every step
    offset_series: np.ndarray  # per-step offset, nan where nothing associated
    non_offset_series: np.ndarray
    empty_steps: int
    class_series: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def to_dict(self, include_series: bool = True) -> dict:
        out = {
            "per_class": self.per_class,
            "overall": self.overall,
            "empty_steps": self.empty_steps,
        }
        if include_series:
            out["series"] = {
                "s": [float(v) for v in self.stations],
                "offset": [_json_float(v) for v in self.offset_series],
                "non_offset": [_json_float(v) for v in self.non_offset_series],
            }
        return out


def _json_float(v: float):
    return None if not math.isfinite(v) else float(v)


def _step_errors(diffs: np.ndarray, offset_mode: str) -> tuple[float, float]:
    off = float(np.median(diffs) if offset_mode == "median" else np.mean(diffs))
    return off, float(np.mean(np.abs(diffs - off)))


def lateral_errors(
    generated: Sequence[Polyline],
    truth: Sequence[Polyline],
    reference_line: np.ndarray,
    step: float = 1.0,
    roi: tuple[float, float] | None = None,
    offset: str = "mean",
) -> LateralErrorReport:
    """Offset and non-offset lateral errors sampled every ``step`` metres.

    At every station the normal of the reference line is intersected with all
    polylines; intersections are associated per class (greedy nearest,
    one-to-one).  The per-step offset is the mean (or median) signed
    generated-minus-truth difference, the non-offset error the mean absolute
    deviation from it.  Per-class figures use each class's own differences.
    """
    if not step > 0:
        raise MetricInputError("step must be > 0")
    if offset not in ("mean", "median"):
        raise MetricInputError("offset must be 'mean' or 'median'")
    for pl in list(generated) + list(truth):
        if pl.cls not in LINE_CLASSES:
            raise MetricInputError(f"unknown polyline class {pl.cls!r}")
    stations = _stations(reference_line, step, roi)
    S = len(stations)
    off_s = np.full(S, np.nan)
    non_s = np.full(S, np.nan)
    cls_off = {c: np.full(S, np.nan) for c in LINE_CLASSES}
    cls_non = {c: np.full(S, np.nan) for c in LINE_CLASSES}
    empty = 0
    for k, st in enumerate(stations):
        diffs_all = []
        for c in LINE_CLASSES:
            g = [h for pl in generated if pl.cls == c for h in _lateral_hits(st, pl.pts)]
            t = [h for pl in truth if pl.cls == c for h in _lateral_hits(st, pl.pts)]
            d = np.array([g[i] - t[j] for i, j in associate(g, t)])
            if len(d):
                cls_off[c][k], cls_non[c][k] = _step_errors(d, offset)
                diffs_all.append(d)
        if not diffs_all:
            empty += 1
            continue
        off_s[k], non_s[k] = _step_errors(np.concatenate(diffs_all), offset)
    if np.all(np.isnan(off_s)):
        raise UndefinedMetricError("generated and truth polylines never overlap along the reference line")

    def summary(o, n):
        ok = ~np.isnan(o)
        if not ok.any():
            return {"offset_error": None, "non_offset_error": None, "steps": 0}
        return {
            "offset_error": float(np.mean(o[ok])),
            "non_offset_error": float(np.mean(n[ok])),
            "steps": int(ok.sum()),
        }

    return LateralErrorReport(
        per_class={c: summary(cls_off[c], cls_non[c]) for c in LINE_CLASSES},
        overall=summary(off_s, non_s),
        stations=np.array([st.s for st in stations]),
        offset_series=off_s,
        non_offset_series=non_s,
        empty_steps=empty,
        class_series={c: {"offset": cls_off[c], "non_offset": cls_non[c]} for c in LINE_CLASSES},
    )


def build_lane_map(
    dataset,
    poses: dict[str, np.ndarray],
    bin_length: float = 10.0,
    cluster_gap: float = 0.5,
    min_support: int = 2,
) -> list[Polyline]:
    """Crude lane-line map from detections placed with the given poses.

    Detections are moved to the world frame, binned along x, and clustered
    laterally per class inside each bin; clusters with at least
    ``min_support`` points become vertices, chained into polylines across
    bins by nearest lateral position.  This is a stand-in so the lateral
    metrics have a generated map to score, not a map-generation method.
    """
    pts: dict[str, list[np.ndarray]] = {c: [] for c in LINE_CLASSES}
    for d in dataset.drives:
        P = np.asarray(poses[d.drive_id], dtype=float)
        for i, dets in enumerate(d.detections):
            c, s = math.cos(P[i, 2]), math.sin(P[i, 2])
            R = np.array([[c, -s], [s, c]])
            for pl in dets:
                pts[pl.cls].append(pl.pts @ R.T + P[i, :2])
    lines: list[Polyline] = []
    for cls, chunks in pts.items():
        if not chunks:
            continue
        allp = np.concatenate(chunks)
        b = np.floor(allp[:, 0] / bin_length).astype(np.int64)
        tracks: list[list[tuple[int, float]]] = []  # (bin, lateral) vertices
        for key in np.unique(b):
            ys = np.sort(allp[b == key, 1])
            breaks = np.flatnonzero(np.diff(ys) > cluster_gap) + 1
            for grp in np.split(ys, breaks):
                if len(grp) < min_support:
                    continue
                y = float(np.median(grp))
                cands = [tr for tr in tracks if tr[-1][0] == key - 1 and abs(tr[-1][1] - y) < cluster_gap]
                if cands:
                    min(cands, key=lambda tr: abs(tr[-1][1] - y)).append((int(key), y))
                else:
                    tracks.append([(int(key), y)])
        lines.extend(
            Polyline(cls, np.array([((k + 0.5) * bin_length, y) for k, y in tr]))
            for tr in tracks
            if len(tr) >= 2
        )
    return lines
