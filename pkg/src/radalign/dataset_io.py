"""JSONL/JSON persistence of :class:`FleetDataset`.

Layout of a dataset directory::

    scene.json            SceneSpec fields, seed, posts, gt_polylines, drive order
    drive_<id>.jsonl      one pose record per line

Floats go through ``repr`` so every value round-trips bit-exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .geometry import Trajectory
from .synthetic import (
    LINE_CLASSES,
    DriveData,
    FleetDataset,
    Polyline,
    Scene,
    SceneSpec,
    SpecError,
    spec_from_dict,
)

SCHEMA_VERSION = 1


class DatasetFormatError(ValueError):
    def __init__(self, path, line: int | None, field: str, msg: str):
        self.path = str(path)
        self.line = line
        self.field = field
        where = self.path if line is None else f"{self.path}:{line}"
        super().__init__(f"{where}: field '{field}': {msg}")


def _dumps(obj) -> str:
    return json.dumps(obj, allow_nan=False, separators=(",", ":"))


def _pts(a: np.ndarray) -> list:
    return [[float(x), float(y)] for x, y in np.asarray(a, dtype=float).reshape(-1, 2)]


def write_dataset(dataset: FleetDataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    scene = dataset.scene
    doc = {
        "schema_version": SCHEMA_VERSION,
        **asdict(scene.spec),
        "seed": scene.seed,
        "posts": _pts(scene.posts),
        "post_line": [int(v) for v in scene.post_line],
        "gt_polylines": [{"class": p.cls, "pts": _pts(p.pts)} for p in scene.gt_polylines],
        "drives": dataset.drive_ids,
    }
    (path / "scene.json").write_text(_dumps(doc) + "\n")
    for d in dataset.drives:
        with open(path / f"drive_{d.drive_id}.jsonl", "w") as fh:
            for i in range(len(d)):
                rec = {
                    "t": float(d.truth.t[i]),
                    "truth": [float(v) for v in d.truth.xyt[i]],
                    "noisy": [float(v) for v in d.noisy.xyt[i]],
                    "sigma": [float(v) for v in d.noisy.sigma[i]],
                    "scan": _pts(d.scans[i]),
                    "detections": [{"class": p.cls, "pts": _pts(p.pts)} for p in d.detections[i]],
                }
                fh.write(_dumps(rec) + "\n")
    return path


def _num_list(val, n, path, line, field):
    if not isinstance(val, list) or len(val) != n:
        raise DatasetFormatError(path, line, field, f"expected a list of {n} numbers")
    out = []
    for v in val:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise DatasetFormatError(path, line, field, "expected finite numbers")
        out.append(float(v))
    return out


def _point_array(val, path, line, field) -> np.ndarray:
    if not isinstance(val, list):
        raise DatasetFormatError(path, line, field, "expected a list of [x, y] pairs")
    pts = [_num_list(p, 2, path, line, field) for p in val]
    return np.array(pts, dtype=float).reshape(-1, 2)


def _polylines(val, path, line, field) -> list[Polyline]:
    if not isinstance(val, list):
        raise DatasetFormatError(path, line, field, "expected a list")
    out = []
    for item in val:
        if not isinstance(item, dict) or item.get("class") not in LINE_CLASSES:
            raise DatasetFormatError(path, line, f"{field}.class", f"must be one of {LINE_CLASSES}")
        out.append(Polyline(item["class"], _point_array(item.get("pts"), path, line, f"{field}.pts")))
    return out


def _read_drive(path: Path, drive_id: str) -> DriveData:
    ts, truth, noisy, sigma, scans, dets = [], [], [], [], [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(path, lineno, "<json>", str(exc)) from None
            if not isinstance(rec, dict):
                raise DatasetFormatError(path, lineno, "<record>", "expected an object")
            for key in ("t", "truth", "noisy", "sigma", "scan", "detections"):
                if key not in rec:
                    raise DatasetFormatError(path, lineno, key, "missing")
            t = _num_list([rec["t"]], 1, path, lineno, "t")[0]
            if ts and t <= ts[-1]:
                raise DatasetFormatError(path, lineno, "t", f"timestamp {t!r} not strictly increasing")
            ts.append(t)
            truth.append(_num_list(rec["truth"], 3, path, lineno, "truth"))
            noisy.append(_num_list(rec["noisy"], 3, path, lineno, "noisy"))
            sig = _num_list(rec["sigma"], 2, path, lineno, "sigma")
            if sig[0] <= 0 or sig[1] <= 0:
                raise DatasetFormatError(path, lineno, "sigma", "std devs must be > 0")
            sigma.append(sig)
            scans.append(_point_array(rec["scan"], path, lineno, "scan"))
            dets.append(_polylines(rec["detections"], path, lineno, "detections"))
    n = len(ts)
    return DriveData(
        drive_id,
        Trajectory(drive_id, np.array(ts), np.array(truth).reshape(n, 3), np.array(sigma).reshape(n, 2)),
        Trajectory(drive_id, np.array(ts), np.array(noisy).reshape(n, 3), np.array(sigma).reshape(n, 2)),
        scans,
        dets,
    )


def read_dataset(path) -> FleetDataset:
    path = Path(path)
    scene_path = path / "scene.json"
    try:
        doc = json.loads(scene_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(scene_path, exc.lineno, "<json>", exc.msg) from None
    if not isinstance(doc, dict):
        raise DatasetFormatError(scene_path, None, "<root>", "expected an object")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise DatasetFormatError(scene_path, None, "schema_version", f"expected {SCHEMA_VERSION}")
    spec_fields = {k: v for k, v in doc.items() if k in SceneSpec.__dataclass_fields__}
    try:
        spec = spec_from_dict(SceneSpec, spec_fields)
        spec.validate()
    except (SpecError, TypeError) as exc:
        raise DatasetFormatError(scene_path, None, "<scene>", str(exc)) from None
    posts = _point_array(doc.get("posts"), scene_path, None, "posts")
    post_line = np.array(doc.get("post_line", [0] * len(posts)), dtype=int)
    if len(post_line) != len(posts):
        raise DatasetFormatError(scene_path, None, "post_line", "length differs from posts")
    gt = _polylines(doc.get("gt_polylines"), scene_path, None, "gt_polylines")
    seed = doc.get("seed", 0)
    scene = Scene(spec, int(seed), posts, post_line, gt)

    ids = doc.get("drives")
    if ids is None:
        ids = sorted(p.stem[len("drive_"):] for p in path.glob("drive_*.jsonl"))
    drives = []
    for drive_id in ids:
        fp = path / f"drive_{drive_id}.jsonl"
        if not fp.exists():
            raise DatasetFormatError(fp, None, "drives", "listed drive file is missing")
        drives.append(_read_drive(fp, drive_id))
    return FleetDataset(scene, drives)
