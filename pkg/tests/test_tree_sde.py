import numpy as np
import pytest

from conftest import field_of, instance_1
from services.errors import ConfigError, NumericalOverflowError, ShapeError
from services.model import make_spec
from services.tree_sde import (
    Feedback,
    FeedbackRule,
    OpenLoop,
    evaluate_cost,
    evaluate_cost_problem1,
    moment_ratio,
    propagate_state,
    simulate_mfsde_particles,
)


def test_initial_state_is_xi(field):
    path = propagate_state(field, OpenLoop.zeros(field.tree, 1), [1.0])
    np.testing.assert_allclose(path.X[0], [[1.0]])
    assert [x.shape for x in path.X] == [(1, 1), (2, 1), (4, 1), (8, 1), (16, 1)]


def test_hand_computed_cost():
    spec = make_spec(1, 1, T=1.0, N=2, xi=[0.0], A=0.0, B=1.0, C=0.0, D=0.0, Q=1.0, R=1.0, G=1.0)
    field = field_of(spec)
    u = OpenLoop.constant(field.tree, 1.0)
    path = propagate_state(field, u, spec.xi)
    np.testing.assert_allclose(path.mean[:, 0], [0.0, 0.5, 1.0])
    cost = evaluate_cost(field, path, u)
    assert cost.running_state == pytest.approx(0.125)
    assert cost.running_control == pytest.approx(1.0)
    assert cost.terminal == pytest.approx(1.0)
    assert cost.running_mean == 0.0
    assert cost.total == pytest.approx(2.125)
    np.testing.assert_allclose(cost.by_level, [0.5, 0.625])


def test_mean_follows_the_mean_equation(field):
    # E X_{i+1} = (1 + dt (A + A1)) E X_i with zero control and constant coefficients
    path = propagate_state(field, OpenLoop.zeros(field.tree, 1), [1.0])
    expected = (1 + 0.25 * 0.15) ** np.arange(5)
    np.testing.assert_allclose(path.mean[:, 0], expected, rtol=1e-14)


def test_fixed_mean_input_replaces_the_tree_mean(field):
    alpha = np.zeros((4, 1))
    path = propagate_state(field, OpenLoop.zeros(field.tree, 1), [1.0], alpha=alpha)
    expected = (1 + 0.25 * 0.1) ** np.arange(5)
    np.testing.assert_allclose(path.mean[:, 0], expected, rtol=1e-14)


def test_cost_parts_nonnegative(field):
    rng = np.random.default_rng(3)
    u = OpenLoop.random(field.tree, 1, rng)
    cost = evaluate_cost(field, propagate_state(field, u, [1.0]), u)
    parts = cost.as_dict()
    assert all(parts[k] >= 0 for k in ("running_state", "running_mean", "running_control", "terminal"))
    assert parts["total"] == pytest.approx(sum(parts[k] for k in ("running_state", "running_mean", "running_control", "terminal")))


def test_feedback_realizes_to_the_same_path(field):
    gain = tuple(np.full((field.tree.size(i), 1, 1), -0.5) for i in range(4))
    offset = tuple(np.full((field.tree.size(i), 1), 0.1) for i in range(4))
    law = Feedback(gain, offset)
    path = propagate_state(field, law, [1.0])
    u = law.realize(path)
    again = propagate_state(field, u, [1.0])
    for a, b in zip(path.X, again.X):
        np.testing.assert_allclose(a, b)
    assert evaluate_cost(field, path, law).total == pytest.approx(evaluate_cost(field, again, u).total)


def test_multiplier_term_vanishes_when_alpha_is_the_mean(field):
    u = OpenLoop.constant(field.tree, 0.3)
    path = propagate_state(field, u, [1.0])
    alpha = path.mean[:4]
    lam = np.ones((4, 1))
    cost = evaluate_cost_problem1(field, path, u, alpha, lam)
    assert cost.multiplier == pytest.approx(0.0, abs=1e-14)
    assert cost.total == pytest.approx(evaluate_cost(field, path, u).total)


def test_control_vector_length_checked(field):
    with pytest.raises(ShapeError, match="expected 15"):
        OpenLoop.from_vector(field.tree, 1, np.zeros(14))
    with pytest.raises(ShapeError, match="expected 15"):
        OpenLoop.from_vector(field.tree, 1, np.zeros(16))
    u = OpenLoop.from_vector(field.tree, 1, np.arange(15.0))
    np.testing.assert_allclose(u.values[2][:, 0], [3.0, 4.0, 5.0, 6.0])
    np.testing.assert_allclose(u.as_vector(), np.arange(15.0))


def test_moment_ratio_bounded_on_perturbed_instances():
    rng = np.random.default_rng(11)
    for k in range(5):
        spec = instance_1(A=0.1 + 0.1 * k, C=0.2 + 0.05 * k)
        field = field_of(spec)
        u = OpenLoop.random(field.tree, 1, rng)
        ratio = moment_ratio(field, propagate_state(field, u, spec.xi), u)
        assert 0.0 < ratio < 10.0


def test_particles_need_two():
    with pytest.raises(ConfigError, match="two particles"):
        simulate_mfsde_particles(instance_1(), n_particles=1)


def test_particles_reproducible():
    a = simulate_mfsde_particles(instance_1(), n_particles=5000, seed=7)
    b = simulate_mfsde_particles(instance_1(), n_particles=5000, seed=7)
    c = simulate_mfsde_particles(instance_1(), n_particles=5000, seed=8)
    np.testing.assert_array_equal(a.mean, b.mean)
    assert not np.array_equal(a.mean, c.mean)


def test_particle_mean_matches_the_tree(field):
    est = simulate_mfsde_particles(instance_1(), n_particles=10_000, seed=20240601)
    tree_mean = propagate_state(field, OpenLoop.zeros(field.tree, 1), [1.0]).mean
    np.testing.assert_array_less(np.abs(est.mean - tree_mean), 5 * est.std_error + 1e-3)
    assert est.second_moment[0] == pytest.approx(1.0)


def test_particle_feedback_rule_pulls_the_state_down():
    spec = instance_1()
    free = simulate_mfsde_particles(spec, n_particles=2000, seed=1)
    law = FeedbackRule.constant(-1.0, 0.0, m=1, n=1)
    steered = simulate_mfsde_particles(spec, feedback=law, n_particles=2000, seed=1)
    assert steered.mean[-1, 0] < free.mean[-1, 0]
    assert steered.control_energy > 0.0
    assert free.control_energy == 0.0


def test_particle_overflow_reports_the_step():
    spec = instance_1(A=1e40, A1=0.0)
    with pytest.raises(NumericalOverflowError, match="step 4") as exc:
        simulate_mfsde_particles(spec, n_particles=10)
    assert exc.value.step == 4


@pytest.mark.slow
def test_particle_mean_with_many_particles(field):
    est = simulate_mfsde_particles(instance_1(), n_particles=100_000, seed=5)
    tree_mean = propagate_state(field, OpenLoop.zeros(field.tree, 1), [1.0]).mean
    np.testing.assert_array_less(np.abs(est.mean - tree_mean), 5 * est.std_error + 1e-4)
    assert est.std_error[-1, 0] < 5e-3
