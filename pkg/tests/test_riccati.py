import numpy as np
import pytest

from conftest import field_of, instance_1
from services.errors import AssumptionError, ConfigError, DefinitenessError
from services.model import make_spec, path_rule
from services.riccati import (
    check_definiteness,
    classical_feedback,
    hat_coefficients,
    solve_riccati_ode,
    solve_riccati_tree,
)
from services.tree_sde import evaluate_cost, propagate_state
from services.utils import tr


def scalar_spec(N: int):
    # Sigma(t) = 1 / (1 + T - t)
    return make_spec(1, 1, T=1.0, N=N, xi=[1.0], A=0.0, B=1.0, C=0.0, D=0.0, Q=0.0, R=1.0, G=1.0)


def exact_sigma(times):
    return 1.0 / (1.0 + 1.0 - np.asarray(times))


@pytest.mark.parametrize("scheme", ["explicit", "discrete"])
def test_leaf_is_terminal_weight(field, scheme):
    ric = solve_riccati_tree(field, scheme)
    np.testing.assert_array_equal(ric.Sigma[field.N], field.G)
    assert len(ric.Sigma) == field.N + 1 and len(ric.Psi) == field.N
    assert ric.scheme == scheme
    assert ric.warnings == ()


def test_discrete_scheme_matches_the_closed_form():
    spec = scalar_spec(8)
    ric = solve_riccati_tree(field_of(spec), "discrete")
    got = [s[0, 0, 0] for s in ric.Sigma]
    np.testing.assert_allclose(got, exact_sigma(spec.grid.times), rtol=1e-13)


def test_ode_matches_the_closed_form():
    spec = scalar_spec(8)
    path = solve_riccati_ode(spec)
    np.testing.assert_allclose(path.Sigma[:, 0, 0], exact_sigma(spec.grid.times), rtol=1e-9)
    assert path.min_gap >= 1.0


def test_explicit_scheme_close_to_the_closed_form():
    ric = solve_riccati_tree(field_of(scalar_spec(8)), "explicit")
    assert abs(ric.sigma0[0, 0] - 0.5) < 0.05


def test_explicit_scheme_converges_at_first_order():
    errors = []
    for N in (8, 16):
        ric = solve_riccati_tree(field_of(scalar_spec(N)), "explicit")
        errors.append(abs(ric.sigma0[0, 0] - 0.5))
    assert 1.6 <= errors[0] / errors[1] <= 2.4


def test_explicit_tree_tracks_the_ode_for_deterministic_data():
    spec = instance_1(N=8)
    ode = solve_riccati_ode(spec)
    ric = solve_riccati_tree(field_of(spec), "explicit")
    for i, s in enumerate(ric.Sigma):
        np.testing.assert_allclose(s[:, 0, 0], ode.Sigma[i, 0, 0], atol=0.05)


@pytest.mark.slow
def test_explicit_tree_converges_to_the_ode_at_first_order():
    errors = []
    for N in (4, 8, 16):
        spec = instance_1(N=N)
        ric = solve_riccati_tree(field_of(spec), "explicit")
        errors.append(abs(ric.sigma0[0, 0] - solve_riccati_ode(spec).sigma0[0, 0]))
    for coarse, fine in zip(errors, errors[1:]):
        assert 1.6 <= coarse / fine <= 2.4


def test_deterministic_data_gives_zero_psi(field):
    ric = solve_riccati_tree(field, "discrete")
    assert ric.max_norm_psi == 0.0
    for s in ric.Sigma:
        assert np.ptp(s[:, 0, 0]) == 0.0


def test_random_data_gives_nonzero_psi():
    field = field_of(instance_1(A=path_rule("sign_w", 0.1, 0.2, (1, 1))))
    ric = solve_riccati_tree(field, "discrete")
    assert ric.max_norm_psi > 0.0
    assert ric.min_gap >= 1.0


def test_lost_definiteness_names_the_node():
    spec = make_spec(1, 1, N=4, xi=[1.0], A=0.0, B=1.0, C=0.0, D=0.0, Q=1.0, R=0.0, G=1.0)
    with pytest.raises(DefinitenessError, match="not positive definite") as exc:
        solve_riccati_tree(field_of(spec), "explicit")
    assert exc.value.node[0] == 3


def test_unknown_scheme_rejected(field):
    with pytest.raises(ConfigError, match="unknown Riccati scheme"):
        solve_riccati_tree(field, "implicit")


def test_ode_needs_deterministic_coefficients():
    spec = instance_1(C=path_rule("tanh_w", 0.2, 0.1, (1, 1)))
    with pytest.raises(AssumptionError, match="deterministic"):
        solve_riccati_ode(spec)


@pytest.mark.parametrize(
    "overrides",
    [{}, {"A": path_rule("sign_w", 0.1, 0.2, (1, 1))}, {"D": path_rule("positive_w", 0.5, 0.3, (1, 1))}],
)
def test_classical_feedback_attains_the_riccati_value(overrides):
    spec = instance_1(A1=0.0, C1=0.0, Q1=0.0, **overrides)
    field = field_of(spec)
    ric = solve_riccati_tree(field, "discrete")
    law = classical_feedback(field, ric)
    cost = evaluate_cost(field, propagate_state(field, law, spec.xi), law)
    value = float(spec.xi @ ric.sigma0 @ spec.xi)
    assert cost.total == pytest.approx(value, rel=1e-10)


def test_hat_coefficients_shapes(field):
    ric = solve_riccati_tree(field, "discrete")
    hat = hat_coefficients(field, ric)
    assert hat.n == 1
    assert [k.shape for k in hat.K] == [(2**i, 1, 1) for i in range(4)]
    # with no mean-field data the alpha gain only sees C1 and A1
    no_mf = field_of(instance_1(A1=0.0, C1=0.0))
    hat0 = hat_coefficients(no_mf, solve_riccati_tree(no_mf, "discrete"))
    assert all(not np.any(k) for k in hat0.K_alpha)


def test_definiteness_report(field):
    ric = solve_riccati_tree(field, "discrete")
    report = check_definiteness(field, ric)
    assert report.min_gap >= 1.0
    assert report.min_eig_sigma > 0.0
    assert report.max_norm_psi == 0.0
    assert set(report.to_dict()) == {"min_gap", "min_gap_node", "min_eig_sigma", "max_norm_psi"}


def root_q_hat(field, ric):
    """Q hat at the root, written out in scalar arithmetic."""
    A, A1, B, C, C1, D, R = (float(getattr(field, k)[0][0, 0, 0]) for k in ("A", "A1", "B", "C", "C1", "D", "R"))
    S, P, dt = float(ric.Sigma_bar[0][0, 0, 0]), float(ric.Psi[0][0, 0, 0]), field.dt
    if ric.scheme == "explicit":
        return C * S * C1 + P * C1 + S * A1 - (S * B + P * D + C * S * D) * D * S * C1 / (D * S * D + R)
    F = 1.0 + dt * A
    gam = R + D * S * D + dt * (B * S * B + 2.0 * B * P * D)
    lam = B * S * F + dt * B * P * C + D * P * F + D * S * C
    l_alpha = dt * (B * S * A1 + B * P * C1 + D * P * A1) + D * S * C1
    return F * S * A1 + F * P * C1 + dt * C * P * A1 + C * S * C1 - lam * l_alpha / gam


@pytest.mark.parametrize("scheme", ["explicit", "discrete"])
@pytest.mark.parametrize("overrides", [{}, {"A": path_rule("sign_w", 0.1, 0.2, (1, 1))}])
def test_q_hat_at_the_root(scheme, overrides):
    field = field_of(instance_1(**overrides))
    ric = solve_riccati_tree(field, scheme)
    hat = hat_coefficients(field, ric)
    assert hat.Q[0][0, 0, 0] == pytest.approx(root_q_hat(field, ric), rel=1e-12)


def test_explicit_hat_uses_the_continuous_gain():
    field = field_of(instance_1(A=path_rule("sign_w", 0.1, 0.2, (1, 1))))
    ric = solve_riccati_tree(field, "explicit")
    hat = hat_coefficients(field, ric)
    for i in range(field.N):
        S, P = ric.Sigma_bar[i], ric.Psi[i]
        B, C, D, R = field.B[i], field.C[i], field.D[i], field.R[i]
        W = R + tr(D) @ S @ D
        K = -np.linalg.solve(W, tr(B) @ S + tr(D) @ P + tr(D) @ S @ C)
        np.testing.assert_allclose(hat.K[i], K, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(hat.A[i], field.A[i] + B @ K, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("scheme", ["explicit", "discrete"])
def test_hat_coefficients_collapse_without_a_value_function(scheme):
    # Q = Q1 = G = 0 gives Sigma = Psi = 0
    field = field_of(instance_1(Q=0.0, Q1=0.0, G=0.0))
    ric = solve_riccati_tree(field, scheme)
    assert all(not np.any(s) for s in ric.Sigma)
    hat = hat_coefficients(field, ric)
    for i in range(field.N):
        B, D, R = field.B[i], field.D[i], field.R[i]
        np.testing.assert_allclose(hat.A[i], field.A[i], atol=1e-15)
        np.testing.assert_allclose(hat.A1[i], field.A1[i], atol=1e-15)
        np.testing.assert_allclose(hat.C[i], field.C[i], atol=1e-15)
        np.testing.assert_allclose(hat.C1[i], field.C1[i], atol=1e-15)
        np.testing.assert_allclose(hat.B[i], -B @ np.linalg.solve(R, tr(B)), rtol=1e-14)
        np.testing.assert_allclose(hat.M[i], tr(field.A[i]), atol=1e-15)
        np.testing.assert_allclose(hat.N[i], tr(field.C[i]), atol=1e-15)
        assert not np.any(hat.Q[i])
