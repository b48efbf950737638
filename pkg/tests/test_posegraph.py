import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from radalign.correlation import CorrelationResult
from radalign.geometry import Transform2, relative_xyt, wrap_angle
from radalign.pairs import CONSECUTIVE, CROSS, PairCandidate
from radalign.posegraph import (
    GraphConstructionError,
    OptimizationInputError,
    PoseGraphProblem,
    PriorFactor,
    RelativeFactor,
    SolverConfig,
    build_graph,
    edge_noise,
    hessian,
    huber_rho,
    huber_weight,
    optimize,
    relative_residuals,
    split_by_drive,
    total_error,
)

from conftest import random_transforms


def prior(key, xyt, sxy=1.0, sth=0.1):
    return PriorFactor(key, np.asarray(xyt, dtype=float), np.array([sxy, sxy, sth]))


def rel(a, b, meas, s=0.01, st_=0.001, robust="none", k=1.345):
    return RelativeFactor((a, b), np.asarray(meas, dtype=float), np.array([s, s, st_]), robust, k)


def edge(a, b, t, z=10.0, flag="ok", kind=CROSS, method="grid"):
    return CorrelationResult(PairCandidate(a, b, kind), Transform2(*t), 1.0, z, flag, method)


# --- construction ----------------------------------------------------------


def test_no_edges_returns_priors(small_fleet):
    prob = build_graph(small_fleet, [])
    x, rep = optimize(prob)
    assert prob.factor_count == sum(len(d) for d in small_fleet.drives)
    assert np.array_equal(x, prob.initial)
    out = split_by_drive(prob, x)
    for d in small_fleet.drives:
        assert np.array_equal(out[d.drive_id], d.noisy.xyt)


def test_edge_gating_and_counting(small_fleet):
    a, b = ("a", 3), ("b", 5)
    edges = [
        edge(a, b, (1, 0, 0), z=10.0),
        edge(a, b, (1, 0, 0), z=2.9),  # below z_min
        edge(a, b, (1, 0, 0), z=-1.0),
        edge(a, b, (1, 0, 0), flag="boundary"),
        edge(a, b, (1, 0, 0), flag="degenerate"),
        CorrelationResult.failed(PairCandidate(a, b, CROSS), "empty"),
        edge(("a", 0), ("a", 1), (1, 0, 0), kind=CONSECUTIVE),
        edge(a, b, (1, 0, 0), z=float("nan"), method="icp"),
    ]
    prob = build_graph(small_fleet, edges)
    assert len(prob.relatives) == 3
    assert prob.dropped_edge_count == 5
    assert [f.source for f in prob.relatives] == ["correlation", "consecutive", "baseline_icp"]
    assert prob.factor_count == len(prob.priors) + 3


def test_edge_noise_inverse_in_z():
    cfg = SolverConfig(z_weight_constant=2.0)
    n1 = edge_noise(edge(("a", 0), ("b", 0), (0, 0, 0), z=4.0), cfg)
    n2 = edge_noise(edge(("a", 0), ("b", 0), (0, 0, 0), z=8.0), cfg)
    assert n1 == pytest.approx([0.5, 0.5, math.radians(0.5)])
    assert n2 == pytest.approx(n1 / 2)


def test_unknown_node_rejected(small_fleet):
    with pytest.raises(GraphConstructionError):
        build_graph(small_fleet, [edge(("a", 0), ("zz", 0), (0, 0, 0))])


# --- optimisation ----------------------------------------------------------


def test_priors_only_is_stationary():
    rng = np.random.default_rng(0)
    x0 = random_transforms(rng, 6)
    keys = [("d", i) for i in range(6)]
    prob = PoseGraphProblem(keys, x0.copy(), [prior(k, v) for k, v in zip(keys, x0)], [])
    x, rep = optimize(prob)
    assert np.all(np.abs(x - x0) <= 1e-12)
    assert rep.chi2_final == 0.0


def test_three_pose_chain_exact():
    keys = [("d", 0), ("d", 1), ("d", 2)]
    m01 = np.array([2.0, 0.5, 0.3])
    m12 = np.array([1.0, -1.0, -0.7])
    init = np.array([[0.0, 0.0, 0.0], [1.5, 1.0, 0.0], [3.0, 0.0, 0.5]])
    priors = [prior(keys[0], [0, 0, 0], 1e-3, 1e-3), prior(keys[1], init[1], 1e6, 1e6), prior(keys[2], init[2], 1e6, 1e6)]
    rels = [rel(keys[0], keys[1], m01), rel(keys[1], keys[2], m12)]
    prob = PoseGraphProblem(keys, init, priors, rels)
    x, rep = optimize(prob, SolverConfig(rel_error_tol=1e-15, abs_error_tol=1e-30))
    # oracle: compose the measurements by hand
    c, s = math.cos(m01[2]), math.sin(m01[2])
    x2 = np.array([m01[0] + c * m12[0] - s * m12[1], m01[1] + s * m12[0] + c * m12[1], m01[2] + m12[2]])
    assert np.all(np.abs(x[0]) <= 1e-9)
    assert np.all(np.abs(x[1] - m01) <= 1e-9)
    assert np.all(np.abs(x[2] - x2) <= 1e-9)


def test_jacobians_match_finite_differences():
    rng = np.random.default_rng(1)
    xa, xb = random_transforms(rng, 100), random_transforms(rng, 100)
    meas = random_transforms(rng, 100, 1.0)
    _, Ja, Jb = relative_residuals(xa, xb, meas, jacobians=True)
    h = 1e-6
    for J, which in ((Ja, 0), (Jb, 1)):
        for j in range(3):
            dp = np.zeros((100, 3))
            dp[:, j] = h
            args_p = (xa + dp, xb) if which == 0 else (xa, xb + dp)
            args_m = (xa - dp, xb) if which == 0 else (xa, xb - dp)
            d = relative_residuals(*args_p, meas) - relative_residuals(*args_m, meas)
            d[:, 2] = wrap_angle(d[:, 2])
            num = d / (2 * h)
            ana = J[:, :, j]
            assert np.all(np.abs(num - ana) <= 1e-5 * np.maximum(1.0, np.abs(ana)))


@given(st.floats(0, 100), st.floats(0.1, 5.0))
def test_huber_kernel_consistency(e, k):
    rho = huber_rho(e * e, k)
    if e <= k:
        assert rho == pytest.approx(e * e)
    else:
        assert rho == pytest.approx(2 * k * e - k * k)
        assert rho < e * e
    # the weight is the derivative of rho / (2 e) and never exceeds 1
    w = huber_weight(e, k)
    assert 0 < w <= 1
    if e > 1e-6:
        h = 1e-6 * max(e, 1)
        drho = (huber_rho((e + h) ** 2, k) - huber_rho((e - h) ** 2, k)) / (2 * h)
        assert w == pytest.approx(drho / (2 * e), rel=1e-4, abs=1e-6)


def test_huber_infinite_threshold_is_quadratic():
    s = np.array([0.0, 1.0, 1e6])
    assert np.array_equal(huber_rho(s, np.inf), s)
    assert np.array_equal(huber_weight(np.sqrt(s), np.inf), np.ones(3))


def loop_problem(rng, n=8, outlier=None, robust="huber"):
    """A ring of poses with noisy priors and exact relative factors."""
    ang = np.linspace(0, 2 * math.pi, n, endpoint=False)
    truth = np.column_stack([10 * np.cos(ang), 10 * np.sin(ang), wrap_angle(ang + math.pi / 2)])
    keys = [("r", i) for i in range(n)]
    noisy = truth + rng.normal(0, [0.5, 0.5, 0.02], truth.shape)
    priors = [prior(k, v, 0.5, 0.02) for k, v in zip(keys, noisy)]
    rels = []
    for i in range(n):
        for step in (1, 2):
            j = (i + step) % n
            m = relative_xyt(truth[i], truth[j])
            if outlier is not None and (i, step) == outlier:
                m = m + [5.0, 0.0, 0.0]
            rels.append(rel(keys[i], keys[j], m, 0.05, 0.002, robust))
    return PoseGraphProblem(keys, noisy.copy(), priors, rels), truth


def test_error_decreases_every_accepted_step():
    rng = np.random.default_rng(2)
    prob, _ = loop_problem(rng)
    x = prob.initial.copy()
    last = total_error(prob, x)
    for _ in range(6):
        x, rep = optimize(prob, SolverConfig(max_iterations=1), initial=x)
        assert rep.chi2_final <= last + 1e-12
        last = rep.chi2_final


def test_hessian_positive_definite():
    rng = np.random.default_rng(3)
    prob, _ = loop_problem(rng)
    H = hessian(prob, prob.initial)
    assert np.allclose(H, H.T)
    assert np.linalg.eigvalsh(H).min() > 0


def test_relative_factors_pull_toward_truth():
    rng = np.random.default_rng(4)
    prob, truth = loop_problem(rng)
    x, rep = optimize(prob)
    assert rep.converged
    before = np.sqrt(np.mean(np.sum((prob.initial[:, :2] - truth[:, :2]) ** 2, axis=1)))
    after = np.sqrt(np.mean(np.sum((x[:, :2] - truth[:, :2]) ** 2, axis=1)))
    assert after < before


def test_higher_z_pulls_harder():
    # one pose with a prior 1 m off; a relative factor to an anchored pose
    keys = [("a", 0), ("b", 0)]
    truth_rel = np.array([0.0, 3.0, 0.0])
    out = []
    for z in (4.0, 16.0):
        priors = [prior(keys[0], [0, 0, 0], 1e-3, 1e-3), prior(keys[1], [1.0, 3.0, 0.0], 0.7, 0.01)]
        s = 1.0 / z
        rels = [rel(keys[0], keys[1], truth_rel, s, s * math.radians(1.0))]
        x, _ = optimize(PoseGraphProblem(keys, np.array([[0, 0, 0], [1.0, 3.0, 0]], float), priors, rels))
        out.append(abs(x[1, 0]))
    assert out[1] < out[0]


def test_huber_resists_single_outlier():
    errs = {}
    for robust in ("huber", "none"):
        prob, truth = loop_problem(np.random.default_rng(5), n=10, outlier=(3, 1), robust=robust)
        assert len(prob.relatives) == 20
        x, _ = optimize(prob)
        errs[robust] = np.sqrt(np.mean(np.sum((x[:, :2] - truth[:, :2]) ** 2, axis=1)))
    assert errs["huber"] < errs["none"]


def test_sparse_and_dense_agree():
    prob, _ = loop_problem(np.random.default_rng(6))
    xs, _ = optimize(prob, SolverConfig(linear_solver="sparse"))
    xd, _ = optimize(prob, SolverConfig(linear_solver="dense"))
    assert np.allclose(xs, xd, atol=1e-8)


def test_non_finite_input_reported():
    prob, _ = loop_problem(np.random.default_rng(7))
    bad = prob.initial.copy()
    bad[2, 0] = np.nan
    with pytest.raises(OptimizationInputError, match="prior factor"):
        optimize(prob, initial=bad)


def test_report_dict():
    prob, _ = loop_problem(np.random.default_rng(8))
    _, rep = optimize(prob)
    d = rep.to_dict()
    assert d["prior_factor_count"] == 8 and d["relative_factor_count"] == 16
    assert d["chi2_final"] <= d["chi2_initial"]


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(robust="cauchy").validate()
    with pytest.raises(ValueError):
        SolverConfig(linear_solver="qr").validate()
