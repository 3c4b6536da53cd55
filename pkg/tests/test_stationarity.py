from dataclasses import replace

import numpy as np
import pytest

from conftest import field_of, instance_1
from services.bsde import CoupledFbsdeSolver, solve_linear_bsde
from services.errors import AssumptionError, InfeasibleStationarityError, ResourceLimitError
from services.riccati import hat_coefficients, solve_riccati_tree
from services.stationarity import (
    assemble_adjoint_response,
    kkt_matrix,
    problem2_gradient,
    solve_mfslq,
    solve_problem1,
    solve_stationarity,
    summarize,
    tilde_data,
    tilde_system,
)
from services.tree_sde import OpenLoop, evaluate_cost_problem1, propagate_state
from services.utils import mtv, mv, tr


def test_report_residuals_within_tolerance(report, settings):
    assert set(report.residuals) >= {"kkt_alpha", "kkt_lambda", "kkt_constraint", "mean_consistency", "problem2_cost_gap"}
    for name, value in report.residuals.items():
        assert value <= settings.tol, name


def test_report_carries_every_stage(report):
    assert report.name == "instance-1"
    assert set(report.timings) == {
        "tree", "coefficients", "assumptions", "riccati", "hat", "operators", "adjoint_response", "stationarity", "recovery",
    }
    assert report.assumptions.h3_ok
    assert report.mean_path.shape == (5, 1)
    assert summarize(report)["J_star"] == report.J_star.total


def test_kkt_matrix_is_symmetric(report):
    responses = assemble_adjoint_response(report.field, report.xi)
    K = kkt_matrix(responses, report.operators.L1, report.operators.L2)
    assert K.shape == (12, 12)
    np.testing.assert_allclose(K, K.T, atol=1e-10 * np.max(np.abs(K)))


def test_first_lambda_is_unidentified(report):
    # lambda on the first cell never reaches the mean, so its row and column vanish
    assert report.multipliers.info.nullity >= 1
    rows, cols, rank = report.kkt_rank
    assert rows == cols == 12 and rank < cols
    assert not np.any(report.operators.L1.matrix[:, 0])


def test_adjoint_response_is_the_affine_gradient(report):
    field = report.field
    solver = CoupledFbsdeSolver(tilde_system(field))
    responses = assemble_adjoint_response(field, report.xi, solver)
    rng = np.random.default_rng(2)
    alpha, lam = rng.standard_normal((2, 4, 1))
    direct = problem2_gradient(field, solver, report.xi, alpha, lam)
    for got, want in zip(responses.evaluate(alpha, lam), direct):
        np.testing.assert_allclose(got, want, atol=1e-10)


def test_inconsistent_gradient_is_infeasible(report):
    responses = assemble_adjoint_response(report.field, report.xi)
    r_k = responses.r_k.copy()
    r_k[0] = 1.0
    ops = report.operators
    with pytest.raises(InfeasibleStationarityError, match="inconsistent") as exc:
        solve_stationarity(replace(responses, r_k=r_k), ops.P_xi, ops.L1, ops.L2)
    assert exc.value.residuals["kkt_lambda"] > 1e-8


def test_fixed_mean_problem_reproduces_the_optimum(report):
    triple = report.multipliers
    sol = solve_problem1(report.field, report.riccati, report.hat, triple.alpha, triple.lam, report.xi)
    for a, b in zip(sol.law.gain, report.u_star.gain):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(sol.law.offset, report.u_star.offset):
        np.testing.assert_allclose(a, b, atol=1e-14)
    assert sol.cost.total == pytest.approx(report.J_star.total, rel=1e-8)


def test_multiplier_cost_at_the_optimum(report):
    triple = report.multipliers
    cost = evaluate_cost_problem1(report.field, report.X_star, report.control, triple.alpha, triple.lam)
    assert cost.multiplier == pytest.approx(0.0, abs=1e-8)


def test_zero_cost_has_zero_value(settings):
    report = solve_mfslq(instance_1(Q=0.0, Q1=0.0, G=0.0), settings)
    assert report.J_star.total == pytest.approx(0.0, abs=1e-12)
    assert report.control.max_abs() < 1e-8


def test_assumption_failure_is_labelled(settings):
    with pytest.raises(AssumptionError) as exc:
        solve_mfslq(instance_1(R=0.5), settings)
    assert exc.value.stage == "assumptions"
    assert exc.value.violations


def test_tree_cap_is_labelled(settings):
    with pytest.raises(ResourceLimitError) as exc:
        solve_mfslq(instance_1(), replace(settings, max_levels=3))
    assert exc.value.stage == "tree"
    assert str(exc.value).startswith("[tree]")


@pytest.mark.parametrize("scheme", ["discrete", "explicit"])
def test_both_schemes_solve(settings, scheme):
    report = solve_mfslq(instance_1(N=6), settings, scheme=scheme)
    assert report.riccati.scheme == scheme
    for name in ("kkt_alpha", "kkt_lambda", "kkt_constraint", "mean_consistency"):
        assert report.residuals[name] <= settings.tol, name


def _fixed_mean_inputs(scheme):
    field = field_of(instance_1())
    ric = solve_riccati_tree(field, scheme)
    rng = np.random.default_rng(5)
    alpha, lam = 0.5 * rng.standard_normal((2, field.N, 1))
    return field, ric, hat_coefficients(field, ric), alpha, lam, rng


@pytest.mark.parametrize("scheme", ["discrete", "explicit"])
def test_fixed_mean_feedback_is_stationary(scheme):
    field, ric, hat, alpha, lam, _ = _fixed_mean_inputs(scheme)
    xi = np.array([1.0])
    sol = solve_problem1(field, ric, hat, alpha, lam, xi)
    u = sol.law.realize(sol.X)
    opt = CoupledFbsdeSolver(tilde_system(field)).solve(tilde_data(field, xi, alpha, lam))

    residual = max(
        float(np.max(np.abs(mv(field.R[i], u.values[i]) + mtv(field.B[i], opt.Ybar[i]) + mtv(field.D[i], opt.Z[i]))))
        for i in range(field.N)
    )
    scale = 1.0 + max(np.max(np.abs(xi)), np.max(np.abs(alpha)), np.max(np.abs(lam)))
    if scheme == "discrete":
        assert residual <= 1e-9 * scale
        for x, y in zip(sol.X.X, opt.X.X):
            np.testing.assert_allclose(x, y, atol=1e-10)
    else:
        assert residual <= 2 * field.dt * scale


@pytest.mark.parametrize("scheme", ["discrete", "explicit"])
def test_fixed_mean_cost_second_variation(scheme):
    field, ric, hat, alpha, lam, rng = _fixed_mean_inputs(scheme)
    xi = np.array([1.0])
    sol = solve_problem1(field, ric, hat, alpha, lam, xi)
    u = sol.law.realize(sol.X)
    v = OpenLoop.random(field.tree, field.m, rng, 0.5)

    X = propagate_state(field, u, xi, alpha)
    base = evaluate_cost_problem1(field, X, u, alpha, lam).total
    moved = evaluate_cost_problem1(field, propagate_state(field, u + v, xi, alpha), u + v, alpha, lam).total

    zero = np.zeros((field.N, field.n))
    dX = propagate_state(field, v, np.zeros(field.n), alpha=zero)
    quad = evaluate_cost_problem1(field, dX, v, zero, zero).total

    # adjoint of u's own state; the first variation is 2 dt sum E[v . (R u + B'Ybar + D'Z)]
    adj = solve_linear_bsde(
        field.tree,
        tuple(tr(a) for a in field.A),
        tuple(tr(c) for c in field.C),
        tuple(mv(field.Q[i], X.X[i]) + lam[i] for i in range(field.N)),
        mv(field.G, X.X[field.N]),
    )
    first = 0.0
    for i in range(field.N):
        g = mv(field.R[i], u.values[i]) + mtv(field.B[i], adj.Ybar[i]) + mtv(field.D[i], adj.Z[i])
        first += 2 * field.dt * float(np.mean(np.sum(v.values[i] * g, axis=1)))

    assert quad > 0
    assert moved - base == pytest.approx(quad + first, abs=1e-10)
    if scheme == "discrete":
        assert abs(first) <= 1e-9
        assert moved - base >= 0
