"""Planar rigid-body helpers and trajectory interpolation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


class TrajectoryError(ValueError):
    pass


class DegenerateTrajectoryError(TrajectoryError):
    pass


class TimeRangeError(TrajectoryError):
    pass


def wrap_angle(angle):
    """Wrap an angle (scalar or array) to (-pi, pi]."""
    if np.ndim(angle) == 0:
        return math.pi - (math.pi - float(angle)) % TWO_PI
    a = np.asarray(angle, dtype=float)
    return math.pi - np.mod(math.pi - a, TWO_PI)


@dataclass(frozen=True)
class Transform2:
    dx: float = 0.0
    dy: float = 0.0
    dtheta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "dtheta", wrap_angle(self.dtheta))

    @classmethod
    def identity(cls) -> "Transform2":
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, v: Iterable[float]) -> "Transform2":
        dx, dy, dth = v
        return cls(float(dx), float(dy), float(dth))

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dtheta])

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.dtheta), math.sin(self.dtheta)
        return np.array([[c, -s, self.dx], [s, c, self.dy], [0.0, 0.0, 1.0]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map (N, 2) points from the child frame into the parent frame."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        c, s = math.cos(self.dtheta), math.sin(self.dtheta)
        out = np.empty_like(pts)
        out[:, 0] = c * pts[:, 0] - s * pts[:, 1] + self.dx
        out[:, 1] = s * pts[:, 0] + c * pts[:, 1] + self.dy
        return out

    def __matmul__(self, other: "Transform2") -> "Transform2":
        return compose(self, other)


@dataclass(frozen=True)
class Pose2:
    """Vehicle pose in the world frame plus its reported GNSS std devs."""

    x: float
    y: float
    theta: float
    sigma_xy: float = 1.0
    sigma_theta: float = math.radians(1.0)

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    def as_transform(self) -> Transform2:
        return Transform2(self.x, self.y, self.theta)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.as_transform().apply(points)


def compose(a: Transform2, b: Transform2) -> Transform2:
    c, s = math.cos(a.dtheta), math.sin(a.dtheta)
    return Transform2(
        a.dx + c * b.dx - s * b.dy,
        a.dy + s * b.dx + c * b.dy,
        a.dtheta + b.dtheta,
    )


def inverse(t: Transform2) -> Transform2:
    c, s = math.cos(t.dtheta), math.sin(t.dtheta)
    return Transform2(-(c * t.dx + s * t.dy), s * t.dx - c * t.dy, -t.dtheta)


def relative_transform(a: Pose2 | Transform2, b: Pose2 | Transform2) -> Transform2:
    """Pose ``b`` expressed in the frame of ``a``."""
    ax, ay, ath = _xyt(a)
    bx, by, bth = _xyt(b)
    c, s = math.cos(ath), math.sin(ath)
    ddx, ddy = bx - ax, by - ay
    return Transform2(c * ddx + s * ddy, -s * ddx + c * ddy, bth - ath)


def apply_to_pose(a: Pose2, t: Transform2) -> Pose2:
    """Place ``t`` (expressed in the frame of ``a``) in the world frame."""
    g = compose(a.as_transform(), t)
    return Pose2(g.dx, g.dy, g.dtheta, a.sigma_xy, a.sigma_theta)


def _xyt(p) -> tuple[float, float, float]:
    if isinstance(p, Transform2):
        return p.dx, p.dy, p.dtheta
    return p.x, p.y, p.theta


def transform_points(xyt: Sequence[float], points: np.ndarray) -> np.ndarray:
    """Transform ego-frame points by a pose given as (x, y, theta)."""
    x, y, th = xyt
    return Transform2(float(x), float(y), float(th)).apply(points)


def relative_xyt(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorised :func:`relative_transform` over (N, 3) pose arrays."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
    ddx = b[..., 0] - a[..., 0]
    ddy = b[..., 1] - a[..., 1]
    return np.stack([c * ddx + s * ddy, -s * ddx + c * ddy, wrap_angle(b[..., 2] - a[..., 2])], axis=-1)


@dataclass(frozen=True)
class Trajectory:
    """Time-ordered pose samples of one drive.

    ``xyt`` is (N, 3) with wrapped headings, ``sigma`` is (N, 2) holding
    (sigma_xy, sigma_theta) per sample.
    """

    drive_id: str
    t: np.ndarray
    xyt: np.ndarray
    sigma: np.ndarray = field(default=None)

    def __post_init__(self):
        t = np.array(self.t, dtype=float).reshape(-1)
        xyt = np.array(self.xyt, dtype=float).reshape(-1, 3)
        if len(t) != len(xyt):
            raise TrajectoryError(f"{len(t)} timestamps but {len(xyt)} poses")
        if np.any(np.diff(t) <= 0):
            bad = int(np.argmax(np.diff(t) <= 0)) + 1
            raise TrajectoryError(f"timestamps not strictly increasing at sample {bad}")
        xyt[:, 2] = wrap_angle(xyt[:, 2])
        if self.sigma is None:
            sigma = np.ones((len(t), 2)) * [1.0, math.radians(1.0)]
        else:
            sigma = np.array(self.sigma, dtype=float).reshape(-1, 2)
        for arr in (t, xyt, sigma):
            arr.flags.writeable = False
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "xyt", xyt)
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def from_samples(cls, drive_id: str, samples: Iterable[tuple[float, Pose2]]) -> "Trajectory":
        samples = list(samples)
        t = [s[0] for s in samples]
        xyt = [[p.x, p.y, p.theta] for _, p in samples]
        sig = [[p.sigma_xy, p.sigma_theta] for _, p in samples]
        return cls(drive_id, t, xyt, sig)

    def __len__(self) -> int:
        return len(self.t)

    def pose(self, i: int) -> Pose2:
        x, y, th = self.xyt[i]
        sxy, sth = self.sigma[i]
        return Pose2(float(x), float(y), float(th), float(sxy), float(sth))

    @property
    def samples(self) -> list[tuple[float, Pose2]]:
        return [(float(self.t[i]), self.pose(i)) for i in range(len(self))]

    def interpolate(self, t: float) -> Pose2:
        return interpolate_pose(self, t)


def _catmull_rom_tangents(t: np.ndarray, y: np.ndarray) -> np.ndarray:
    m = np.empty_like(y)
    m[0] = (y[1] - y[0]) / (t[1] - t[0])
    m[-1] = (y[-1] - y[-2]) / (t[-1] - t[-2])
    if len(t) > 2:
        m[1:-1] = (y[2:] - y[:-2]) / (t[2:] - t[:-2])[:, None]
    return m


def interpolate_pose(traj: Trajectory, t: float) -> Pose2:
    """Cubic Hermite interpolation of position and unwrapped heading."""
    n = len(traj)
    if n < 2:
        raise DegenerateTrajectoryError(f"drive {traj.drive_id}: need >= 2 samples, got {n}")
    ts = traj.t
    if not (ts[0] <= t <= ts[-1]):
        raise TimeRangeError(f"t={t} outside [{ts[0]}, {ts[-1]}] for drive {traj.drive_id}")
    k = int(np.searchsorted(ts, t, side="right")) - 1
    k = min(max(k, 0), n - 2)
    if t == ts[k]:
        return traj.pose(k)
    if t == ts[k + 1]:
        return traj.pose(k + 1)

    # only the neighbourhood of the interval matters for Catmull-Rom tangents
    lo, hi = max(k - 1, 0), min(k + 3, n)
    tw = ts[lo:hi]
    yw = np.column_stack([traj.xyt[lo:hi, 0], traj.xyt[lo:hi, 1], np.unwrap(traj.xyt[lo:hi, 2])])
    mw = _catmull_rom_tangents(tw, yw)
    j = k - lo
    h = tw[j + 1] - tw[j]
    s = (t - tw[j]) / h
    h00 = s * s * (2.0 * s - 3.0) + 1.0
    h10 = s * (s * (s - 2.0) + 1.0)
    h01 = s * s * (3.0 - 2.0 * s)
    h11 = s * s * (s - 1.0)
    v = h00 * yw[j] + h10 * h * mw[j] + h01 * yw[j + 1] + h11 * h * mw[j + 1]
    sig = (1.0 - s) * traj.sigma[k] + s * traj.sigma[k + 1]
    return Pose2(float(v[0]), float(v[1]), float(v[2]), float(sig[0]), float(sig[1]))
