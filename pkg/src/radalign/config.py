"""Pipeline configuration: one YAML document with dotted ``--set`` overrides.

Angles are given in degrees in the file (keys ending in ``_deg``) and
converted to radians when the typed specs are built.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import yaml

from .correlation import SearchWindow
from .evaluation import MmeConfig
from .posegraph import SolverConfig
from .synthetic import DriveSpec, SceneSpec, SpecError, default_drive_specs

SCHEMA_VERSION = 1

DEFAULTS: dict[str, Any] = {
    "schema_version": SCHEMA_VERSION,
    "seed": 1,
    "method": "grid",
    "workers": 1,
    "paths": {
        "dataset": "out/dataset",
        "align": "out/align",
        "map": "out/map",
        "eval": "out/eval",
    },
    "scene": {
        "corridor_length": 1000.0,
        "lane_count": 2,
        "lane_width": 3.75,
        "guardrail_post_spacing": 4.0,
        "reflector_jitter": 0.05,
        "ghost_reflection_enabled": False,
        "median_gap": 1.0,
        "shoulder_width": 2.5,
        "ghost_offset": 6.0,
    },
    "fleet": {
        "drive_count": 5,
        # applied to every drive, then overridden per entry of ``drives``
        "defaults": {},
        "drives": [],
    },
    "sampling": {"max_distance": 20.0, "rate": 0.10, "seed": None},
    "correlation": {
        "eps_r_deg": 1.0,
        "eps_l": 2.0,
        "step_r_deg": 0.1,
        "step_l": 0.1,
        "cell_size": 0.1,
        "point_covariance": 0.05,
        "icp_max_corr_dist": 2.0,
    },
    "solver": {
        "max_iterations": 100,
        "lambda_init": 1e-4,
        "lambda_factor": 10.0,
        "rel_error_tol": 1e-6,
        "abs_error_tol": 1e-8,
        "huber_k": 1.345,
        "z_weight_constant": 1.0,
        "z_min": 3.0,
        "robust": "huber",
        "linear_solver": "sparse",
        "icp_sigma_xy": 0.2,
        "icp_sigma_theta_deg": 0.2,
    },
    "occupancy": {"cell_size": 0.1, "shift": 0.05, "scale": 60.0, "write_cloud": False},
    "evaluation": {
        "mme_radius": 1.0,
        "mme_min_neighbors": 5,
        "step": 1.0,
        "offset": "mean",
        "roi_margin": 20.0,
        "post_tolerance": 0.2,
    },
}

# DriveSpec fields given in degrees in the config file
_DRIVE_DEG = {"gnss_sigma_theta_deg": "gnss_sigma_theta", "radar_bearing_sigma_deg": "radar_bearing_sigma"}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"{where}: unknown configuration key")
        if isinstance(base[k], dict) and base[k] and not isinstance(v, dict):
            raise ConfigError(f"{where}: expected a mapping")
        if isinstance(base[k], dict) and base[k]:
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {text!r}: {exc}") from None


def apply_override(doc: dict, assignment: str) -> None:
    """Apply one ``dotted.key=value`` override in place (list indices allowed)."""
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"--set: malformed key {key!r}")
    node: Any = doc
    for i, p in enumerate(parts[:-1]):
        node = _child(node, p, ".".join(parts[: i + 1]), create=True)
    last = parts[-1]
    value = _parse_value(text)
    if isinstance(node, list):
        idx = _index(last, key)
        while len(node) <= idx:
            node.append({})
        node[idx] = value
    elif isinstance(node, dict):
        node[last] = value
    else:
        raise ConfigError(f"--set {key}: parent is not a mapping or list")


def _index(p: str, where: str) -> int:
    try:
        i = int(p)
    except ValueError:
        raise ConfigError(f"{where}: expected a list index, got {p!r}") from None
    if i < 0:
        raise ConfigError(f"{where}: negative list index")
    return i


def _child(node, p: str, where: str, create: bool):
    if isinstance(node, list):
        i = _index(p, where)
        while create and len(node) <= i:
            node.append({})
        return node[i]
    if isinstance(node, dict):
        if p not in node:
            if not create:
                raise ConfigError(f"{where}: unknown key")
            node[p] = {}
        return node[p]
    raise ConfigError(f"{where}: cannot descend into a scalar")


@dataclass
class PipelineConfig:
    raw: dict
    seed: int
    method: str
    workers: int
    dataset_dir: Path
    align_dir: Path
    map_dir: Path
    eval_dir: Path
    scene: SceneSpec
    drives: list[DriveSpec]
    max_distance: float
    rate: float
    sampling_seed: int
    window: SearchWindow
    cell_size: float
    point_covariance: float
    icp_max_corr_dist: float
    solver: SolverConfig
    occ_cell_size: float
    occ_shift: float
    occ_scale: float
    write_cloud: bool
    mme: MmeConfig
    eval_step: float
    eval_offset: str
    roi_margin: float
    post_tolerance: float


def _typed(cls, data: dict, where: str, rename: dict[str, str] | None = None):
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for k, v in data.items():
        target = k
        if rename and k in rename:
            target, v = rename[k], math.radians(_num(v, f"{where}.{k}"))
        if target not in names:
            raise ConfigError(f"{where}.{k}: unknown field")
        if target == "speed_profile":
            if not isinstance(v, (list, tuple)) or len(v) != 2:
                raise ConfigError(f"{where}.{k}: expected [low, high]")
            v = (_num(v[0], f"{where}.{k}[0]"), _num(v[1], f"{where}.{k}[1]"))
        kwargs[target] = v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _num(v, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {v!r}")
    if not math.isfinite(v):
        raise ConfigError(f"{where}: must be finite")
    return float(v)


def _int(v, where: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{where}: expected an integer, got {v!r}")
    return v


def _check_numbers(section: dict, where: str, skip=()) -> None:
    for k, v in section.items():
        if k in skip or isinstance(v, (str, bool, dict, list)) or v is None:
            continue
        _num(v, f"{where}.{k}")


def build_config(doc: dict) -> PipelineConfig:
    """Validate a merged config document and build the typed configuration."""
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {doc.get('schema_version')!r}")
    seed = _int(doc["seed"], "seed")
    method = doc["method"]
    if method not in ("grid", "icp"):
        raise ConfigError(f"method: expected 'grid' or 'icp', got {method!r}")
    workers = _int(doc["workers"], "workers")
    if workers < 1:
        raise ConfigError("workers: must be >= 1")

    for name in ("scene", "sampling", "correlation", "solver", "occupancy", "evaluation"):
        _check_numbers(doc[name], name)
    scene = _typed(SceneSpec, doc["scene"], "scene")
    fleet = doc["fleet"]
    count = _int(fleet["drive_count"], "fleet.drive_count")
    if count < 0:
        raise ConfigError("fleet.drive_count: must be >= 0")
    if not isinstance(fleet["defaults"], dict):
        raise ConfigError("fleet.defaults: expected a mapping")
    if not isinstance(fleet["drives"], list):
        raise ConfigError("fleet.drives: expected a list")
    base = default_drive_specs(max(count, len(fleet["drives"])))
    drives = []
    for i, spec in enumerate(base):
        entry = {f.name: getattr(spec, f.name) for f in fields(DriveSpec)}
        entry.update(fleet["defaults"])
        if i < len(fleet["drives"]):
            if not isinstance(fleet["drives"][i], dict):
                raise ConfigError(f"fleet.drives.{i}: expected a mapping")
            entry.update(fleet["drives"][i])
        where = f"fleet.drives.{i}"
        for k, v in entry.items():
            if k not in ("drive_id", "direction", "speed_profile", "rng_seed") and k not in _DRIVE_DEG:
                _num(v, f"{where}.{k}")
        for deg, rad in _DRIVE_DEG.items():
            if deg in entry:
                entry.pop(rad, None)
        ds = _typed(DriveSpec, entry, where, _DRIVE_DEG)
        try:
            ds.validate(scene)
        except SpecError as exc:
            raise ConfigError(f"{where}: {exc}") from None
        drives.append(ds)
    ids = [d.drive_id for d in drives]
    if len(set(ids)) != len(ids):
        raise ConfigError("fleet.drives: drive ids must be unique")
    try:
        scene.validate()
    except SpecError as exc:
        raise ConfigError(str(exc)) from None

    s = doc["sampling"]
    rate, max_distance = float(s["rate"]), float(s["max_distance"])
    if not 0.0 < rate <= 1.0:
        raise ConfigError(f"sampling.rate: must be in (0, 1], got {rate}")
    if not max_distance > 0:
        raise ConfigError("sampling.max_distance: must be > 0")
    sampling_seed = seed if s["seed"] is None else _int(s["seed"], "sampling.seed")

    c = doc["correlation"]
    window = SearchWindow(
        math.radians(c["eps_r_deg"]), float(c["eps_l"]), math.radians(c["step_r_deg"]), float(c["step_l"])
    )
    try:
        window.validate(float(c["cell_size"]))
    except ValueError as exc:
        raise ConfigError(f"correlation: {exc}") from None
    if not c["point_covariance"] > 0:
        raise ConfigError("correlation.point_covariance: must be > 0")

    sv = dict(doc["solver"])
    sv["icp_sigma_theta"] = math.radians(sv.pop("icp_sigma_theta_deg"))
    solver = _typed(SolverConfig, sv, "solver")
    try:
        solver.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    o = doc["occupancy"]
    if not o["cell_size"] > 0:
        raise ConfigError("occupancy.cell_size: must be > 0")
    e = doc["evaluation"]
    mme = MmeConfig(float(e["mme_radius"]), _int(e["mme_min_neighbors"], "evaluation.mme_min_neighbors"))
    try:
        mme.validate()
    except ValueError as exc:
        raise ConfigError(f"evaluation: {exc}") from None
    if not e["step"] > 0:
        raise ConfigError("evaluation.step: must be > 0")
    if e["offset"] not in ("mean", "median"):
        raise ConfigError("evaluation.offset: expected 'mean' or 'median'")

    p = doc["paths"]
    return PipelineConfig(
        raw=doc,
        seed=seed,
        method=method,
        workers=workers,
        dataset_dir=Path(p["dataset"]),
        align_dir=Path(p["align"]),
        map_dir=Path(p["map"]),
        eval_dir=Path(p["eval"]),
        scene=scene,
        drives=drives,
        max_distance=max_distance,
        rate=rate,
        sampling_seed=sampling_seed,
        window=window,
        cell_size=float(c["cell_size"]),
        point_covariance=float(c["point_covariance"]),
        icp_max_corr_dist=float(c["icp_max_corr_dist"]),
        solver=solver,
        occ_cell_size=float(o["cell_size"]),
        occ_shift=float(o["shift"]),
        occ_scale=float(o["scale"]),
        write_cloud=bool(o["write_cloud"]),
        mme=mme,
        eval_step=float(e["step"]),
        eval_offset=e["offset"],
        roi_margin=float(e["roi_margin"]),
        post_tolerance=float(e["post_tolerance"]),
    )


def load_config(path=None, overrides=(), base: dict | None = None) -> PipelineConfig:
    """Defaults, then the YAML file at ``path``, then ``--set`` overrides."""
    doc = copy.deepcopy(DEFAULTS if base is None else base)
    if path is not None:
        try:
            text = Path(path).read_text()
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        try:
            user = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        doc = _merge(doc, user)
    for item in overrides:
        apply_override(doc, item)
        # re-merge so unknown keys from --set are caught too
        doc = _merge(DEFAULTS, doc)
    return build_config(doc)


def dump_config(doc: dict) -> str:
    return yaml.safe_dump(doc, sort_keys=False)
