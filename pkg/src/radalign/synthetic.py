"""Seeded generator for a synthetic highway fleet dataset.

The world is a straight corridor running along +x.  The median guardrail
sits on y = 0; forward traffic uses the carriageway at y < 0 and reverse
traffic the one at y > 0.  Guardrail posts line the median and both outer
road edges.  Every drive records its true pose, a GNSS-like noisy pose, a
2D radar scan of nearby posts and lane-marking detections.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from .geometry import Trajectory, wrap_angle

# never report a zero GNSS std dev; downstream priors need sigma > 0
SIGMA_FLOOR = 1e-6

LINE_CLASSES = ("solid", "dashed", "boundary")


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    corridor_length: float = 1000.0
    lane_count: int = 2
    lane_width: float = 3.75
    guardrail_post_spacing: float = 4.0
    reflector_jitter: float = 0.05
    ghost_reflection_enabled: bool = False
    median_gap: float = 1.0
    shoulder_width: float = 2.5
    ghost_offset: float = 6.0

    def validate(self) -> None:
        if not self.corridor_length > 0:
            raise SpecError("scene.corridor_length must be > 0")
        if not self.guardrail_post_spacing > 0:
            raise SpecError("scene.guardrail_post_spacing must be > 0")
        if int(self.lane_count) != self.lane_count or self.lane_count < 1:
            raise SpecError("scene.lane_count must be an integer >= 1")
        for name in ("lane_width", "median_gap", "shoulder_width"):
            if not getattr(self, name) > 0:
                raise SpecError(f"scene.{name} must be > 0")
        if self.reflector_jitter < 0:
            raise SpecError("scene.reflector_jitter must be >= 0")

    @property
    def edge_offset(self) -> float:
        """Lateral distance from the median to each outer guardrail."""
        return self.median_gap + self.lane_count * self.lane_width + self.shoulder_width

    def lane_center(self, direction: str, lane: int) -> float:
        side = -1.0 if direction == "forward" else 1.0
        return side * (self.median_gap + (lane + 0.5) * self.lane_width)


@dataclass(frozen=True)
class DriveSpec:
    drive_id: str
    direction: str = "forward"
    speed_profile: tuple[float, float] = (25.0, 33.0)
    pose_rate: float = 2.0
    gnss_sigma_xy: float = 0.7
    gnss_sigma_theta: float = math.radians(0.3)
    gnss_bias_walk_sigma: float = 0.02
    rng_seed: int | None = None
    lane: int = 0
    bias_limit: float = 1.5
    radar_range: float = 50.0
    radar_range_sigma: float = 0.05
    radar_bearing_sigma: float = math.radians(0.2)
    detection_sigma: float = 0.05

    def validate(self, scene: SceneSpec | None = None) -> None:
        p = f"drive {self.drive_id}"
        if self.direction not in ("forward", "reverse"):
            raise SpecError(f"{p}: direction must be 'forward' or 'reverse'")
        lo, hi = self.speed_profile
        if not (0.0 <= lo <= hi <= 36.0) or hi <= 0:
            raise SpecError(f"{p}: speed_profile must satisfy 0 <= lo <= hi <= 36 m/s, hi > 0")
        if not self.pose_rate > 0:
            raise SpecError(f"{p}: pose_rate must be > 0")
        for name in (
            "gnss_sigma_xy",
            "gnss_sigma_theta",
            "gnss_bias_walk_sigma",
            "bias_limit",
            "radar_range_sigma",
            "radar_bearing_sigma",
            "detection_sigma",
        ):
            if getattr(self, name) < 0:
                raise SpecError(f"{p}: {name} must be >= 0")
        if not self.radar_range > 0:
            raise SpecError(f"{p}: radar_range must be > 0")
        if scene is not None and not (0 <= self.lane < scene.lane_count):
            raise SpecError(f"{p}: lane must be in [0, {scene.lane_count})")


@dataclass(frozen=True)
class Polyline:
    cls: str
    pts: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pts", np.asarray(self.pts, dtype=float).reshape(-1, 2))


@dataclass
class Scene:
    spec: SceneSpec
    seed: int
    posts: np.ndarray  # (M, 2) world positions, jitter included
    post_line: np.ndarray  # (M,) -1 south rail, 0 median, +1 north rail
    gt_polylines: list[Polyline]

    @property
    def median_posts(self) -> np.ndarray:
        return self.posts[self.post_line == 0]

    def reference_line(self) -> np.ndarray:
        return np.array([[0.0, 0.0], [self.spec.corridor_length, 0.0]])


@dataclass
class DriveData:
    drive_id: str
    truth: Trajectory
    noisy: Trajectory
    scans: list[np.ndarray]
    detections: list[list[Polyline]]

    def __len__(self) -> int:
        return len(self.truth)


@dataclass
class FleetDataset:
    scene: Scene
    drives: list[DriveData] = field(default_factory=list)

    def drive(self, drive_id: str) -> DriveData:
        for d in self.drives:
            if d.drive_id == drive_id:
                return d
        raise KeyError(drive_id)

    @property
    def drive_ids(self) -> list[str]:
        return [d.drive_id for d in self.drives]

    @property
    def pose_count(self) -> int:
        return sum(len(d) for d in self.drives)


def drive_rng(root_seed: int, drive_id: str, rng_seed: int | None = None) -> np.random.Generator:
    """RNG for one drive, a pure function of (seed, drive_id)."""
    base = root_seed if rng_seed is None else rng_seed
    key = zlib.crc32(drive_id.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(base) & (2**64 - 1), key]))


def generate_scene(spec: SceneSpec, seed: int) -> Scene:
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), 0x5CE4E]))
    n = int(math.floor(spec.corridor_length / spec.guardrail_post_spacing + 1e-9)) + 1
    xs = np.arange(n) * spec.guardrail_post_spacing
    edge = spec.edge_offset
    posts, labels = [], []
    for line, y0 in ((-1, -edge), (0, 0.0), (1, edge)):
        nominal = np.column_stack([xs, np.full(n, y0)])
        jitter = rng.normal(0.0, 1.0, size=(n, 2)) * spec.reflector_jitter
        posts.append(nominal + jitter)
        labels.append(np.full(n, line))
    posts = np.concatenate(posts)
    labels = np.concatenate(labels)

    L = spec.corridor_length
    lines: list[Polyline] = [Polyline("boundary", [[0.0, 0.0], [L, 0.0]])]
    for side in (-1.0, 1.0):
        lines.append(Polyline("boundary", [[0.0, side * edge], [L, side * edge]]))
        inner = spec.median_gap
        lines.append(Polyline("solid", [[0.0, side * inner], [L, side * inner]]))
        for k in range(1, spec.lane_count):
            y = side * (inner + k * spec.lane_width)
            lines.append(Polyline("dashed", [[0.0, y], [L, y]]))
        y = side * (inner + spec.lane_count * spec.lane_width)
        lines.append(Polyline("solid", [[0.0, y], [L, y]]))
    return Scene(spec, int(seed), posts, labels, lines)


def _truncated_normal(rng: np.random.Generator, size, limit: float = 3.0) -> np.ndarray:
    z = rng.standard_normal(size)
    bad = np.abs(z) > limit
    while np.any(bad):
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > limit
    return z


def _truth_path(scene: SceneSpec, spec: DriveSpec, rng: np.random.Generator):
    lo, hi = spec.speed_profile
    mid, amp = 0.5 * (lo + hi), 0.5 * (hi - lo)
    period = 40.0
    omega = 2.0 * math.pi / period
    phase = rng.uniform(0.0, 2.0 * math.pi)
    wobble_phase = rng.uniform(0.0, 2.0 * math.pi)
    wobble_amp, wobble_len = 0.2, 150.0

    def arclength(t):
        return mid * t - (amp / omega) * (np.cos(omega * t + phase) - math.cos(phase))

    L = scene.corridor_length
    # generous upper bound on drive duration; trimmed below
    t_end = L / max(mid - amp, 1e-3 * hi) + 1.0
    if mid - amp <= 0:
        t_end = 4.0 * L / max(mid, 1e-3)
    t = np.arange(0.0, t_end, 1.0 / spec.pose_rate)
    s = arclength(t)
    keep = s <= L
    t, s = t[keep], s[keep]
    # a speed profile that touches zero can produce repeated positions but never reversed ones
    ds = np.diff(s)
    ok = np.concatenate([[True], ds > 1e-9])
    t, s = t[ok], s[ok]

    k = 2.0 * math.pi / wobble_len
    direction = 1.0 if spec.direction == "forward" else -1.0
    x = s if direction > 0 else L - s
    y = scene.lane_center(spec.direction, spec.lane) + wobble_amp * np.sin(k * s + wobble_phase)
    dyds = wobble_amp * k * np.cos(k * s + wobble_phase)
    theta = np.arctan2(dyds, direction)
    return t, np.column_stack([x, y, wrap_angle(theta)])


def _radar_scan(scene: Scene, pose: np.ndarray, spec: DriveSpec, rng: np.random.Generator) -> np.ndarray:
    x, y, th = pose
    targets = scene.posts
    if scene.spec.ghost_reflection_enabled:
        med = scene.median_posts
        side = -1.0 if y < 0 else 1.0
        ghosts = np.column_stack([med[:, 0], np.full(len(med), -side * scene.spec.ghost_offset)])
        targets = np.concatenate([targets, ghosts])
    d = targets - [x, y]
    rng_true = np.hypot(d[:, 0], d[:, 1])
    vis = (rng_true <= spec.radar_range) & (rng_true > 0.5)
    d, rng_true = d[vis], rng_true[vis]
    bearing = np.arctan2(d[:, 1], d[:, 0]) - th
    n = len(d)
    r = rng_true + _truncated_normal(rng, n) * spec.radar_range_sigma
    b = bearing + _truncated_normal(rng, n) * spec.radar_bearing_sigma
    return np.column_stack([r * np.cos(b), r * np.sin(b)])


def _detections(
    scene: Scene, pose: np.ndarray, spec: DriveSpec, rng: np.random.Generator
) -> list[Polyline]:
    x, y, th = pose
    direction = 1.0 if spec.direction == "forward" else -1.0
    side = -1.0 if spec.direction == "forward" else 1.0
    L = scene.spec.corridor_length
    c, s = math.cos(th), math.sin(th)
    out = []
    for line in scene.gt_polylines:
        ly = line.pts[0, 1]
        # own carriageway plus the shared median
        if ly != 0.0 and np.sign(ly) != side:
            continue
        wx = x + direction * np.array([5.0, 15.0, 25.0, 35.0])
        wx = wx[(wx >= 0.0) & (wx <= L)]
        if len(wx) < 2:
            continue
        dx, dy = wx - x, ly - y
        ex = c * dx + s * dy
        ey = -s * dx + c * dy
        pts = np.column_stack([ex, ey])
        pts = pts + rng.normal(0.0, 1.0, size=pts.shape) * spec.detection_sigma
        out.append(Polyline(line.cls, pts))
    return out


def simulate_drive(scene: Scene, spec: DriveSpec, seed: int = 0) -> DriveData:
    """Simulate one drive through ``scene``; output depends only on (seed, spec)."""
    spec.validate(scene.spec)
    rng = drive_rng(seed, spec.drive_id, spec.rng_seed)
    t, truth = _truth_path(scene.spec, spec, rng)
    n = len(t)
    if n < 2:
        raise SpecError(f"drive {spec.drive_id}: fewer than 2 poses, raise pose_rate")

    # gnss_sigma_xy is the per-axis translational std dev, as used by the prior
    white = rng.standard_normal((n, 2)) * spec.gnss_sigma_xy
    white_th = rng.standard_normal(n) * spec.gnss_sigma_theta
    steps = rng.standard_normal((n, 2)) * spec.gnss_bias_walk_sigma
    bias = np.zeros((n, 2))
    b = np.zeros(2)
    for i in range(n):
        b = np.clip(b + steps[i], -spec.bias_limit, spec.bias_limit)
        bias[i] = b
    noisy = truth.copy()
    noisy[:, :2] += white + bias
    noisy[:, 2] = wrap_angle(noisy[:, 2] + white_th)

    sigma = np.tile([max(spec.gnss_sigma_xy, SIGMA_FLOOR), max(spec.gnss_sigma_theta, SIGMA_FLOOR)], (n, 1))
    scans = [_radar_scan(scene, truth[i], spec, rng) for i in range(n)]
    dets = [_detections(scene, truth[i], spec, rng) for i in range(n)]
    return DriveData(
        spec.drive_id,
        Trajectory(spec.drive_id, t, truth, sigma),
        Trajectory(spec.drive_id, t, noisy, sigma),
        scans,
        dets,
    )


def default_drive_specs(n: int = 5, **overrides) -> list[DriveSpec]:
    """Alternating forward/reverse drives spread over the lanes."""
    specs = []
    for i in range(n):
        direction = "forward" if i % 2 == 0 else "reverse"
        specs.append(DriveSpec(drive_id=f"d{i:02d}", direction=direction, lane=(i // 2) % 2, **overrides))
    return specs


def generate_fleet(
    scene_spec: SceneSpec, drive_specs: Sequence[DriveSpec], seed: int = 0
) -> FleetDataset:
    ids = [d.drive_id for d in drive_specs]
    if len(set(ids)) != len(ids):
        raise SpecError("drive ids must be unique")
    scene = generate_scene(scene_spec, seed)
    drives = [simulate_drive(scene, spec, seed) for spec in drive_specs]
    return FleetDataset(scene, drives)


def spec_from_dict(cls, data: dict):
    """Build a SceneSpec/DriveSpec from a plain dict, rejecting unknown keys."""
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise SpecError(f"unknown {cls.__name__} field(s): {', '.join(sorted(unknown))}")
    kw = dict(data)
    if "speed_profile" in kw:
        kw["speed_profile"] = tuple(float(v) for v in kw["speed_profile"])
    return cls(**kw)
