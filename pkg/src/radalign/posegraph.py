"""Robust SE(2) pose-graph optimisation with Levenberg-Marquardt.

Every pose gets a Gaussian prior from its GNSS measurement.  Relative
factors come from scan registration; correlation edges use a pseudo noise
derived from the inverted standard score, ICP edges a constant noise.
Relative factors can be robustified with a Huber kernel applied to the
whitened residual norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .correlation import CorrelationResult
from .geometry import relative_xyt, wrap_angle
from .pairs import CONSECUTIVE, PoseKey
from .synthetic import FleetDataset


class GraphConstructionError(ValueError):
    pass


class OptimizationInputError(ValueError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 100
    lambda_init: float = 1e-4
    lambda_factor: float = 10.0
    rel_error_tol: float = 1e-6
    abs_error_tol: float = 1e-8
    huber_k: float = 1.345
    z_weight_constant: float = 1.0
    z_min: float = 3.0
    robust: str = "huber"  # huber | none
    linear_solver: str = "sparse"  # sparse | dense
    icp_sigma_xy: float = 0.2
    icp_sigma_theta: float = math.radians(0.2)
    lambda_max: float = 1e10

    def validate(self) -> None:
        for name in (
            "max_iterations",
            "lambda_init",
            "lambda_factor",
            "rel_error_tol",
            "abs_error_tol",
            "huber_k",
            "z_weight_constant",
            "icp_sigma_xy",
            "icp_sigma_theta",
        ):
            if not getattr(self, name) > 0:
                raise ValueError(f"solver.{name} must be > 0")
        if self.z_min < 0:
            raise ValueError("solver.z_min must be >= 0")
        if self.robust not in ("huber", "none"):
            raise ValueError("solver.robust must be 'huber' or 'none'")
        if self.linear_solver not in ("sparse", "dense"):
            raise ValueError("solver.linear_solver must be 'sparse' or 'dense'")


@dataclass(frozen=True)
class PriorFactor:
    node: PoseKey
    measured: np.ndarray  # (x, y, theta)
    noise: np.ndarray  # (sigma_xy, sigma_xy, sigma_theta)


@dataclass(frozen=True)
class RelativeFactor:
    nodes: tuple[PoseKey, PoseKey]
    measured: np.ndarray  # (dx, dy, dtheta) of b in the frame of a
    noise: np.ndarray
    robust: str = "huber"
    huber_k: float = 1.345
    source: str = "correlation"  # correlation | consecutive | baseline_icp


@dataclass
class PoseGraphProblem:
    keys: list[PoseKey]
    initial: np.ndarray  # (N, 3)
    priors: list[PriorFactor]
    relatives: list[RelativeFactor]
    dropped_edge_count: int = 0
    index: dict[PoseKey, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {k: i for i, k in enumerate(self.keys)}
        self._arrays = None

    @property
    def factor_count(self) -> int:
        return len(self.priors) + len(self.relatives)

    def arrays(self):
        if self._arrays is None:
            P = len(self.priors)
            E = len(self.relatives)
            pi = np.array([self.index[f.node] for f in self.priors], dtype=np.int64)
            pm = np.array([f.measured for f in self.priors], dtype=float).reshape(P, 3)
            ps = np.array([f.noise for f in self.priors], dtype=float).reshape(P, 3)
            ri = np.array([self.index[f.nodes[0]] for f in self.relatives], dtype=np.int64)
            rj = np.array([self.index[f.nodes[1]] for f in self.relatives], dtype=np.int64)
            rm = np.array([f.measured for f in self.relatives], dtype=float).reshape(E, 3)
            rs = np.array([f.noise for f in self.relatives], dtype=float).reshape(E, 3)
            rk = np.array(
                [f.huber_k if f.robust == "huber" else np.inf for f in self.relatives], dtype=float
            )
            self._arrays = (pi, pm, ps, ri, rj, rm, rs, rk)
        return self._arrays


@dataclass
class OptimizationReport:
    iterations: int
    chi2_initial: float
    chi2_final: float
    converged: bool
    dropped_edge_count: int
    prior_residuals: np.ndarray = field(repr=False)
    relative_residuals: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "chi2_initial": self.chi2_initial,
            "chi2_final": self.chi2_final,
            "dropped_edge_count": self.dropped_edge_count,
            "converged": self.converged,
            "prior_factor_count": int(len(self.prior_residuals)),
            "relative_factor_count": int(len(self.relative_residuals)),
        }


def huber_rho(sq_norm, k: float):
    """Robust cost of a squared whitened residual norm (quadratic inside ``k``)."""
    s = np.asarray(sq_norm, dtype=float)
    e = np.sqrt(s)
    k = np.broadcast_to(np.asarray(k, dtype=float), e.shape)
    out = s.copy()
    over = e > k  # never true where k is inf
    out[over] = 2.0 * k[over] * e[over] - k[over] ** 2
    return out


def huber_weight(norm, k: float):
    e = np.asarray(norm, dtype=float)
    k = np.broadcast_to(np.asarray(k, dtype=float), e.shape)
    out = np.ones_like(e)
    over = e > k
    out[over] = k[over] / e[over]
    return out


def edge_noise(result: CorrelationResult, config: SolverConfig) -> np.ndarray | None:
    """Noise std devs for an edge, or None when it must be dropped."""
    if result.flag != "ok":
        return None
    if not np.all(np.isfinite(result.transform.as_array())):
        return None
    if result.method == "icp":
        return np.array([config.icp_sigma_xy, config.icp_sigma_xy, config.icp_sigma_theta])
    z = result.z_score
    if not math.isfinite(z) or z <= 0 or z < config.z_min:
        return None
    s = config.z_weight_constant / z
    return np.array([s, s, s * math.radians(1.0)])


def build_graph(
    dataset: FleetDataset,
    edges: Iterable[CorrelationResult],
    config: SolverConfig = SolverConfig(),
) -> PoseGraphProblem:
    keys: list[PoseKey] = []
    init = []
    priors = []
    for d in dataset.drives:
        for i in range(len(d)):
            key = (d.drive_id, i)
            keys.append(key)
            xyt = d.noisy.xyt[i]
            sxy, sth = d.noisy.sigma[i]
            if not (sxy > 0 and sth > 0):
                raise GraphConstructionError(f"pose {key}: GNSS std devs must be > 0")
            init.append(xyt)
            priors.append(PriorFactor(key, np.array(xyt, dtype=float), np.array([sxy, sxy, sth])))
    known = set(keys)
    relatives = []
    dropped = 0
    for e in edges:
        if e.pair is None:
            raise GraphConstructionError("edge without a pose pair")
        for node in (e.pair.a, e.pair.b):
            if node not in known:
                raise GraphConstructionError(f"edge references unknown pose {node}")
        noise = edge_noise(e, config)
        if noise is None:
            dropped += 1
            continue
        if e.method == "icp":
            source = "baseline_icp"
        else:
            source = "consecutive" if e.pair.kind == CONSECUTIVE else "correlation"
        relatives.append(
            RelativeFactor(
                (e.pair.a, e.pair.b), e.transform.as_array(), noise, config.robust, config.huber_k, source
            )
        )
    initial = np.array(init, dtype=float).reshape(-1, 3)
    return PoseGraphProblem(keys, initial, priors, relatives, dropped)


def prior_residuals(problem: PoseGraphProblem, x: np.ndarray) -> np.ndarray:
    """Whitened prior residuals, (P, 3)."""
    pi, pm, ps = problem.arrays()[:3]
    r = x[pi] - pm
    r[:, 2] = wrap_angle(r[:, 2])
    return r / ps


def relative_residuals(
    xa: np.ndarray, xb: np.ndarray, measured: np.ndarray, jacobians: bool = False
):
    """Unwhitened residuals of relative factors and optionally their Jacobians.

    Returns ``r`` (E, 3) or ``(r, Ja, Jb)`` with (E, 3, 3) Jacobians with
    respect to the (x, y, theta) of each end.
    """
    pred = relative_xyt(xa, xb)
    r = pred - measured
    r[:, 2] = wrap_angle(r[:, 2])
    if not jacobians:
        return r
    E = len(r)
    c, s = np.cos(xa[:, 2]), np.sin(xa[:, 2])
    Ja = np.zeros((E, 3, 3))
    Jb = np.zeros((E, 3, 3))
    Ja[:, 0, 0], Ja[:, 0, 1], Ja[:, 0, 2] = -c, -s, pred[:, 1]
    Ja[:, 1, 0], Ja[:, 1, 1], Ja[:, 1, 2] = s, -c, -pred[:, 0]
    Ja[:, 2, 2] = -1.0
    Jb[:, 0, 0], Jb[:, 0, 1] = c, s
    Jb[:, 1, 0], Jb[:, 1, 1] = -s, c
    Jb[:, 2, 2] = 1.0
    return r, Ja, Jb


def _whitened_relative(problem, x, jacobians=False):
    _, _, _, ri, rj, rm, rs, _ = problem.arrays()
    out = relative_residuals(x[ri], x[rj], rm, jacobians)
    if not jacobians:
        return out / rs
    r, Ja, Jb = out
    return r / rs, Ja / rs[:, :, None], Jb / rs[:, :, None]


def total_error(problem: PoseGraphProblem, x: np.ndarray) -> float:
    """Sum of squared whitened prior residuals plus robust relative costs."""
    rk = problem.arrays()[7]
    pr = prior_residuals(problem, x)
    rr = _whitened_relative(problem, x)
    return float(np.sum(pr * pr) + np.sum(huber_rho(np.sum(rr * rr, axis=1), rk)))


def _linearize(problem: PoseGraphProblem, x: np.ndarray):
    pi, _, ps, ri, rj, _, _, rk = problem.arrays()
    N = len(x)
    P, E = len(pi), len(ri)
    pr = prior_residuals(problem, x)
    rr, Ja, Jb = _whitened_relative(problem, x, jacobians=True)
    w = np.sqrt(huber_weight(np.sqrt(np.sum(rr * rr, axis=1)), rk))
    rr = rr * w[:, None]
    Ja = Ja * w[:, None, None]
    Jb = Jb * w[:, None, None]

    rows_p = np.arange(3 * P)
    cols_p = (3 * pi[:, None] + np.arange(3)).ravel()
    vals_p = (1.0 / ps).ravel()

    base = 3 * P + 3 * np.arange(E)
    rr_idx = base[:, None, None] + np.arange(3)[None, :, None]
    rows_e = np.broadcast_to(rr_idx, (E, 3, 3))
    cols_a = np.broadcast_to(3 * ri[:, None, None] + np.arange(3)[None, None, :], (E, 3, 3))
    cols_b = np.broadcast_to(3 * rj[:, None, None] + np.arange(3)[None, None, :], (E, 3, 3))
    rows = np.concatenate([rows_p, rows_e.ravel(), rows_e.ravel()])
    cols = np.concatenate([cols_p, cols_a.ravel(), cols_b.ravel()])
    vals = np.concatenate([vals_p, Ja.ravel(), Jb.ravel()])
    J = sp.csr_matrix((vals, (rows, cols)), shape=(3 * P + 3 * E, 3 * N))
    r = np.concatenate([pr.ravel(), rr.ravel()])
    return J, r


def _solve(H, b, method: str) -> np.ndarray:
    if method == "dense":
        c = scipy.linalg.cho_factor(H.toarray() if sp.issparse(H) else H)
        return scipy.linalg.cho_solve(c, b)
    return spla.spsolve(H.tocsc(), b, permc_spec="MMD_AT_PLUS_A")


def _check_finite(problem: PoseGraphProblem, x: np.ndarray) -> None:
    pr = prior_residuals(problem, x)
    bad = np.flatnonzero(~np.all(np.isfinite(pr), axis=1))
    if len(bad):
        raise OptimizationInputError(f"non-finite residual in prior factor on {problem.priors[bad[0]].node}")
    rr = _whitened_relative(problem, x)
    bad = np.flatnonzero(~np.all(np.isfinite(rr), axis=1))
    if len(bad):
        f = problem.relatives[bad[0]]
        raise OptimizationInputError(f"non-finite residual in relative factor {f.nodes} ({f.source})")


def optimize(
    problem: PoseGraphProblem,
    config: SolverConfig = SolverConfig(),
    initial: np.ndarray | None = None,
) -> tuple[np.ndarray, OptimizationReport]:
    """Levenberg-Marquardt over all node poses; returns (N, 3) poses and a report."""
    x = np.array(problem.initial if initial is None else initial, dtype=float)
    _check_finite(problem, x)
    chi2 = total_error(problem, x)
    chi2_init = chi2
    lam = config.lambda_init
    it = 0
    converged = chi2 < config.abs_error_tol
    while not converged and it < config.max_iterations:
        it += 1
        J, r = _linearize(problem, x)
        H = (J.T @ J).tocsc()
        g = J.T @ r
        D = sp.diags(H.diagonal())
        accepted = False
        while lam <= config.lambda_max:
            delta = _solve(H + lam * D, -g, config.linear_solver)
            x_new = x + delta.reshape(-1, 3)
            x_new[:, 2] = wrap_angle(x_new[:, 2])
            chi2_new = total_error(problem, x_new)
            if np.isfinite(chi2_new) and chi2_new < chi2:
                accepted = True
                lam = max(lam / config.lambda_factor, 1e-15)
                break
            lam *= config.lambda_factor
        if not accepted:
            # no damping level decreases the error: numerically at a minimum
            converged = True
            break
        rel = (chi2 - chi2_new) / chi2
        x, chi2 = x_new, chi2_new
        if chi2 < config.abs_error_tol or rel < config.rel_error_tol:
            converged = True
    pr = np.linalg.norm(prior_residuals(problem, x), axis=1)
    rr = np.linalg.norm(_whitened_relative(problem, x), axis=1)
    report = OptimizationReport(it, chi2_init, chi2, converged, problem.dropped_edge_count, pr, rr)
    return x, report


def split_by_drive(problem: PoseGraphProblem, x: np.ndarray) -> dict[str, np.ndarray]:
    out: dict[str, list] = {}
    for (drive_id, _), row in zip(problem.keys, x):
        out.setdefault(drive_id, []).append(row)
    return {k: np.array(v) for k, v in out.items()}


def hessian(problem: PoseGraphProblem, x: np.ndarray) -> np.ndarray:
    """Dense Gauss-Newton Hessian at ``x`` (small problems only)."""
    J, _ = _linearize(problem, x)
    return (J.T @ J).toarray()


def relative_factors_from_pairs(
    pairs: Sequence[tuple[PoseKey, PoseKey]],
    measured: np.ndarray,
    noise: np.ndarray,
    robust: str = "huber",
    huber_k: float = 1.345,
) -> list[RelativeFactor]:
    return [
        RelativeFactor(tuple(p), np.asarray(m, dtype=float), np.asarray(n, dtype=float), robust, huber_k)
        for p, m, n in zip(pairs, measured, noise)
    ]
