from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from typing import Any, Iterable, Sequence

import numpy as np
import scipy.linalg
from scipy.sparse.linalg import ArpackError, ArpackNoConvergence, LinearOperator, cg, eigsh

from services.bsde import BsdePath, CoupledFbsdeSolver, FbsdeData, FbsdeSystem, MeanFieldTerm, solve_meanfield_bsde
from services.errors import AssumptionError, ConditioningError, ConfigError
from services.model import (
    DEFAULT_MAX_LEVELS,
    CoefficientField,
    ProblemSpec,
    TimePolynomial,
    build_tree,
    evaluate_coefficients,
    make_spec,
    path_rule,
)
from services.riccati import classical_feedback
from services.settings import DEFAULT_SEED, Settings, load_settings
from services.stationarity import (
    MultiplierTriple,
    SolveReport,
    assemble_adjoint_response,
    kkt_matrix,
    problem2_gradient,
    recover_control,
    solve_mfslq,
    tilde_data,
    tilde_system,
)
from services.tree_sde import (
    ControlProcess,
    OpenLoop,
    StatePath,
    as_open_loop,
    evaluate_cost,
    evaluate_cost_problem2,
    propagate_state,
    tilde_control,
)
from services.utils import mtv, mv, tr

log = logging.getLogger(__name__)

ORACLE_DIRECT_LIMIT = 2048
SMP_CONSTANT = 4.0
FD_STEPS = (1e-2, 1e-3)


def field_for(spec: ProblemSpec, max_levels: int = DEFAULT_MAX_LEVELS) -> CoefficientField:
    return evaluate_coefficients(spec, build_tree(spec.grid, max_levels=max_levels))


def _scale_factor(field: CoefficientField, xi: np.ndarray) -> float:
    return (1.0 + field.scale()) ** 2 * (1.0 + float(np.linalg.norm(xi)))


# -------------------------
# cost gradient through the mean-field adjoint
# -------------------------
def meanfield_adjoint(field: CoefficientField, path: StatePath, method: str = "sweep") -> BsdePath:
    """Y_i = Ybar + dt(A'Ybar + C'Z + QX + E[Q1]EX + E[A1'Ybar + C1'Z]), Y_N = G X_N."""
    means = path.mean
    source = tuple(mv(field.Q[i], path.X[i]) + field.Q1_mean[i] @ means[i] for i in range(field.N))
    return solve_meanfield_bsde(field, source, mv(field.G, path.X[field.N]), method=method)


def cost_gradient(field: CoefficientField, xi, u: OpenLoop) -> tuple[StatePath, BsdePath, tuple[np.ndarray, ...]]:
    """Node-wise g = R u + B'Ybar + D'Z; the gradient of J/2 is p * dt * g."""
    path = propagate_state(field, u, xi)
    adj = meanfield_adjoint(field, path)
    g = tuple(
        mv(field.R[i], u.values[i]) + mtv(field.B[i], adj.Ybar[i]) + mtv(field.D[i], adj.Z[i]) for i in range(field.N)
    )
    return path, adj, g


def cost_of(field: CoefficientField, xi, u: OpenLoop) -> float:
    return evaluate_cost(field, propagate_state(field, u, xi), u).total


def _weighted_rms(field: CoefficientField, levels: Sequence[np.ndarray]) -> float:
    total = sum(field.dt * float(np.mean(np.sum(v * v, axis=1))) for v in levels)
    return float(np.sqrt(total / field.tree.grid.T))


def _max_abs(levels: Sequence[np.ndarray]) -> float:
    return max(float(np.max(np.abs(v))) for v in levels)


# -------------------------
# brute-force oracle
# -------------------------
@dataclass(frozen=True, eq=False)
class OracleResult:
    u_oracle: OpenLoop
    J_oracle: float
    method: str
    iterations: int
    gradient_max: float
    gradient_rms: float
    dim: int
    eig_min: float | None = None
    eig_max: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "J_oracle": self.J_oracle,
            "method": self.method,
            "iterations": self.iterations,
            "gradient_max": self.gradient_max,
            "gradient_rms": self.gradient_rms,
            "dim": self.dim,
            "eig_min": self.eig_min,
            "eig_max": self.eig_max,
        }


def _eig_estimates(op: LinearOperator) -> tuple[float | None, float | None]:
    out = []
    for which in ("SA", "LA"):
        try:
            out.append(float(eigsh(op, k=1, which=which, return_eigenvectors=False, maxiter=2000)[0]))
        except (ArpackNoConvergence, ArpackError):
            out.append(None)
    return out[0], out[1]


def brute_force_optimal(
    spec: ProblemSpec,
    method: str = "auto",
    tol: float = 1e-13,
    max_iter: int | None = None,
    field: CoefficientField | None = None,
) -> OracleResult:
    """Exact minimizer of the discrete cost over all adapted node controls.

    Works in coordinates y = sqrt(p dt) u so the Hessian's diagonal blocks are R.
    """
    field = field or field_for(spec)
    tree, m = field.tree, field.m
    weights = np.concatenate([np.full(tree.size(i) * m, np.sqrt(tree.prob(i) * tree.dt)) for i in range(tree.N)])
    dim = weights.size
    origin = np.zeros(field.n)

    def gradient(xi, u: OpenLoop) -> np.ndarray:
        _, _, g = cost_gradient(field, xi, u)
        return np.concatenate([v.reshape(-1) for v in g])

    def hess(y: np.ndarray) -> np.ndarray:
        return weights * gradient(origin, OpenLoop.from_vector(tree, m, np.ravel(y) / weights))

    b = weights * gradient(spec.xi, OpenLoop.zeros(tree, m))
    if method == "auto":
        method = "direct" if dim <= ORACLE_DIRECT_LIMIT else "cg"

    eig_min = eig_max = None
    if method == "direct":
        H = np.column_stack([hess(e) for e in np.eye(dim)])
        H = 0.5 * (H + H.T)
        y = scipy.linalg.solve(H, -b, assume_a="pos")
        ev = np.linalg.eigvalsh(H)
        eig_min, eig_max = float(ev[0]), float(ev[-1])
        iterations = dim
    elif method == "cg":
        op = LinearOperator((dim, dim), matvec=hess, dtype=float)

        def precondition(y: np.ndarray) -> np.ndarray:
            blocks = OpenLoop.from_vector(tree, m, np.ravel(y))
            return np.concatenate([mv(field.R_inv[i], v).reshape(-1) for i, v in enumerate(blocks.values)])

        counter = {"k": 0}

        def step(_xk: np.ndarray) -> None:
            counter["k"] += 1

        y, info = cg(
            op,
            -b,
            rtol=tol,
            atol=0.0,
            maxiter=max_iter or 10 * dim,
            M=LinearOperator((dim, dim), matvec=precondition, dtype=float),
            callback=step,
        )
        iterations = counter["k"]
        log.debug("oracle cg: %d iterations (info %d)", iterations, info)
        if info != 0:
            eig_min, eig_max = _eig_estimates(op)
            raise ConditioningError(
                f"conjugate gradient stalled after {iterations} iterations (eig estimates {eig_min}, {eig_max})",
                eig_min=eig_min,
                eig_max=eig_max,
            )
    else:
        raise ConfigError(f"unknown oracle method '{method}'")

    u = OpenLoop.from_vector(tree, m, y / weights)
    path, _, g = cost_gradient(field, spec.xi, u)
    return OracleResult(
        u_oracle=u,
        J_oracle=evaluate_cost(field, path, u).total,
        method=method,
        iterations=iterations,
        gradient_max=_max_abs(g),
        gradient_rms=_weighted_rms(field, g),
        dim=dim,
        eig_min=eig_min,
        eig_max=eig_max,
    )


# -------------------------
# maximum principle residual
# -------------------------
@dataclass(frozen=True)
class SmpReport:
    max_residual: float
    rms_residual: float
    gradient_max: float
    gradient_rms: float
    worst_node: tuple[int, int]
    dt: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "max_residual": self.max_residual,
            "rms_residual": self.rms_residual,
            "gradient_max": self.gradient_max,
            "gradient_rms": self.gradient_rms,
            "worst_node": list(self.worst_node),
            "dt": self.dt,
        }


def smp_system(field: CoefficientField) -> FbsdeSystem:
    """State equation plus the mean-field adjoint, with every expectation as an unknown."""
    tree, n = field.tree, field.n
    eye = tuple(np.broadcast_to(np.eye(n), (tree.size(i), n, n)) for i in range(tree.N))
    q1 = tuple(np.broadcast_to(q, (tree.size(i), n, n)) for i, q in enumerate(field.Q1_mean))
    return FbsdeSystem(
        tree=tree,
        n=n,
        drift={"X": field.A},
        diffusion={"X": field.C},
        driver={"X": field.Q, "Ybar": tuple(tr(a) for a in field.A), "Z": tuple(tr(c) for c in field.C)},
        terminal=field.G,
        mean_field=(
            MeanFieldTerm("drift", "X", eye, field.A1),
            MeanFieldTerm("diffusion", "X", eye, field.C1),
            MeanFieldTerm("driver", "X", eye, q1),
            MeanFieldTerm("driver", "Ybar", tuple(tr(a) for a in field.A1)),
            MeanFieldTerm("driver", "Z", tuple(tr(c) for c in field.C1)),
        ),
    )


def check_smp(
    spec: ProblemSpec,
    u: ControlProcess,
    method: str = "sweep",
    field: CoefficientField | None = None,
) -> SmpReport:
    """Residual of R u + B'Y + D'Z along the tree, with Y at the node itself."""
    field = field or field_for(spec)
    path = propagate_state(field, u, spec.xi)
    u = as_open_loop(u, path)
    if method == "global":
        data = FbsdeData(
            x0=spec.xi,
            drift=tuple(mv(field.B[i], u.values[i]) for i in range(field.N)),
            diffusion=tuple(mv(field.D[i], u.values[i]) for i in range(field.N)),
        )
        sol = CoupledFbsdeSolver(smp_system(field)).solve(data)
        Y, Z, Ybar = sol.Y, sol.Z, sol.Ybar
    else:
        adj = meanfield_adjoint(field, path)
        Y, Z, Ybar = adj.Y, adj.Z, adj.Ybar

    residual, gradient = [], []
    for i in range(field.N):
        Ru = mv(field.R[i], u.values[i])
        residual.append(Ru + mtv(field.B[i], Y[i]) + mtv(field.D[i], Z[i]))
        gradient.append(Ru + mtv(field.B[i], Ybar[i]) + mtv(field.D[i], Z[i]))
    worst, node = 0.0, (0, 0)
    for i, r in enumerate(residual):
        norms = np.linalg.norm(r, axis=1)
        j = int(np.argmax(norms))
        if norms[j] > worst:
            worst, node = float(norms[j]), (i, j)
    return SmpReport(
        max_residual=worst,
        rms_residual=_weighted_rms(field, residual),
        gradient_max=_max_abs(gradient),
        gradient_rms=_weighted_rms(field, gradient),
        worst_node=node,
        dt=field.dt,
    )


def smp_rate(spec: ProblemSpec, steps: Iterable[int] = (4, 8, 16)) -> list[tuple[int, float]]:
    """RMS maximum-principle residual at the oracle optimum for each N."""
    out = []
    for N in steps:
        refined = spec.with_steps(N)
        field = field_for(refined)
        oracle = brute_force_optimal(refined, field=field)
        out.append((N, check_smp(refined, oracle.u_oracle, field=field).rms_residual))
    return out


# -------------------------
# variations and directional derivatives
# -------------------------
@dataclass(frozen=True, eq=False)
class VariationSolution:
    X1: StatePath
    Y1: tuple[np.ndarray, ...] | None = None
    Z1: tuple[np.ndarray, ...] | None = None
    Ybar1: tuple[np.ndarray, ...] | None = None
    control: OpenLoop | None = None


def solve_variation(field: CoefficientField, v: OpenLoop) -> VariationSolution:
    """X1' = X1 + dt(A X1 + A1 E X1 + B v) + dW(C X1 + C1 E X1 + D v), X1_0 = 0."""
    return VariationSolution(X1=propagate_state(field, v, np.zeros(field.n)))


def solve_variation_problem2(
    field: CoefficientField,
    d_alpha: np.ndarray,
    d_lam: np.ndarray,
    solver: CoupledFbsdeSolver | None = None,
) -> VariationSolution:
    """Response (X1, Y1, Z1) of the fixed-mean optimality system to (d_alpha, d_lambda)."""
    solver = solver or CoupledFbsdeSolver(tilde_system(field))
    sol = solver.solve(tilde_data(field, np.zeros(field.n), d_alpha, d_lam))
    return VariationSolution(X1=sol.X, Y1=sol.Y, Z1=sol.Z, Ybar1=sol.Ybar, control=tilde_control(field, sol))


def _extrapolated_difference(f, eps: tuple[float, float] = FD_STEPS) -> float:
    """Two-step difference quotient that is exact for quadratics."""
    f0 = f(0.0)
    e1, e2 = eps
    d1 = (f(e1) - f0) / e1
    d2 = (f(e2) - f0) / e2
    return (e2 * d1 - e1 * d2) / (e2 - e1)


@dataclass(frozen=True)
class GateauxReport:
    analytic: float
    duality: float
    numeric: float

    @property
    def gap(self) -> float:
        values = (self.analytic, self.duality, self.numeric)
        return max(abs(a - b) for a in values for b in values)

    def to_dict(self) -> dict[str, float]:
        return {"analytic": self.analytic, "duality": self.duality, "numeric": self.numeric, "gap": self.gap}


def gateaux_derivative(
    spec: ProblemSpec,
    u: ControlProcess,
    v: OpenLoop,
    field: CoefficientField | None = None,
) -> GateauxReport:
    """Derivative of J at u along v: from the variation X1, by adjoint duality and by differences."""
    field = field or field_for(spec)
    u = as_open_loop(u, propagate_state(field, u, spec.xi))
    path, _, g = cost_gradient(field, spec.xi, u)
    X1 = solve_variation(field, v).X1
    means, means1 = path.mean, X1.mean
    dt = field.dt

    analytic = 0.0
    duality = 0.0
    for i in range(field.N):
        analytic += dt * float(np.mean(np.sum(mv(field.Q[i], path.X[i]) * X1.X[i], axis=1)))
        analytic += dt * float((field.Q1_mean[i] @ means[i]) @ means1[i])
        analytic += dt * float(np.mean(np.sum(mv(field.R[i], u.values[i]) * v.values[i], axis=1)))
        duality += dt * float(np.mean(np.sum(g[i] * v.values[i], axis=1)))
    analytic += float(np.mean(np.sum(mv(field.G, path.X[field.N]) * X1.X[field.N], axis=1)))

    numeric = _extrapolated_difference(lambda e: cost_of(field, spec.xi, u + e * v))
    return GateauxReport(analytic=2.0 * analytic, duality=2.0 * duality, numeric=numeric)


@dataclass(frozen=True)
class ConvexityReport:
    gap: float
    J_mid: float
    J1: float
    J2: float
    distance: float  # E sum dt |u1 - u2|^2


def check_convexity(
    spec: ProblemSpec,
    u1: OpenLoop,
    u2: OpenLoop,
    field: CoefficientField | None = None,
) -> ConvexityReport:
    """J(mid) - J1/2 - J2/2 + (delta/4) |u1 - u2|^2, which is <= 0 under the coercivity bound."""
    field = field or field_for(spec)
    J1 = cost_of(field, spec.xi, u1)
    J2 = cost_of(field, spec.xi, u2)
    Jm = cost_of(field, spec.xi, 0.5 * (u1 + u2))
    diff = u1 - u2
    distance = sum(field.dt * float(np.mean(np.sum(v * v, axis=1))) for v in diff.values)
    gap = Jm - 0.5 * J1 - 0.5 * J2 + 0.25 * field.delta * distance
    return ConvexityReport(gap=gap, J_mid=Jm, J1=J1, J2=J2, distance=distance)


# -------------------------
# degenerate (classical) case
# -------------------------
@dataclass(frozen=True)
class DegenerationReport:
    control_gap: float
    cost_gap: float
    value_gap: float
    value: float
    J_star: float
    budget: float

    @property
    def passed(self) -> bool:
        return self.control_gap <= 1e-8 and self.value_gap <= self.budget

    def to_dict(self) -> dict[str, Any]:
        return {
            "control_gap": self.control_gap,
            "cost_gap": self.cost_gap,
            "value_gap": self.value_gap,
            "value": self.value,
            "J_star": self.J_star,
            "budget": self.budget,
            "passed": self.passed,
        }


def degeneration_check(
    spec: ProblemSpec,
    report: SolveReport | None = None,
    settings: Settings | None = None,
) -> DegenerationReport:
    """Pipeline control versus the classical Riccati feedback when no mean-field term is present."""
    report = report or solve_mfslq(spec, settings)
    field = report.field
    if field.has_mean_field():
        raise AssumptionError("degeneration check needs A1 = C1 = Q1 = 0")
    law = classical_feedback(field, report.riccati)
    path = propagate_state(field, law, spec.xi)
    u_classical = law.realize(path)
    J_classical = evaluate_cost(field, path, u_classical).total
    value = float(spec.xi @ report.riccati.sigma0 @ spec.xi)
    J = report.J_star.total
    return DegenerationReport(
        control_gap=report.control.max_abs_diff(u_classical),
        cost_gap=abs(J - J_classical),
        value_gap=abs(J - value),
        value=value,
        J_star=J,
        budget=2.0 * field.dt * (1.0 + field.scale()) * (1.0 + float(spec.xi @ spec.xi)),
    )


# -------------------------
# multiplier problem gradient
# -------------------------
@dataclass(frozen=True)
class Problem2GradientReport:
    adjoint: float
    variation: float
    numeric: float

    @property
    def gap(self) -> float:
        values = (self.adjoint, self.variation, self.numeric)
        return max(abs(a - b) for a in values for b in values)


def problem2_gradient_check(
    spec: ProblemSpec,
    alpha: np.ndarray,
    lam: np.ndarray,
    d_alpha: np.ndarray,
    d_lam: np.ndarray,
    field: CoefficientField | None = None,
) -> Problem2GradientReport:
    """Directional derivative of the multiplier problem's cost three ways."""
    field = field or field_for(spec)
    solver = CoupledFbsdeSolver(tilde_system(field))
    alpha, lam = np.asarray(alpha, dtype=float), np.asarray(lam, dtype=float)
    d_alpha, d_lam = np.asarray(d_alpha, dtype=float), np.asarray(d_lam, dtype=float)
    dt = field.dt

    g_alpha, g_lambda = problem2_gradient(field, solver, spec.xi, alpha, lam)
    adjoint = 2.0 * dt * float(np.sum(g_alpha * d_alpha) + np.sum(g_lambda * d_lam))

    tilde = solver.solve(tilde_data(field, spec.xi, alpha, lam))
    u = tilde_control(field, tilde)
    var = solve_variation_problem2(field, d_alpha, d_lam, solver)
    X, X1 = tilde.X.X, var.X1.X
    variation = 0.0
    for i in range(field.N):
        variation += dt * float(np.mean(np.sum(mv(field.Q[i], X[i]) * X1[i], axis=1)))
        variation += dt * float(alpha[i] @ field.Q1_mean[i] @ d_alpha[i])
        variation += dt * float(np.mean(np.sum(mv(field.R[i], u.values[i]) * var.control.values[i], axis=1)))
    variation += float(np.mean(np.sum(mv(field.G, X[field.N]) * X1[field.N], axis=1)))

    def J2(e: float) -> float:
        a, b = alpha + e * d_alpha, lam + e * d_lam
        return evaluate_cost_problem2(field, solver.solve(tilde_data(field, spec.xi, a, b)), a, b).total

    return Problem2GradientReport(adjoint=adjoint, variation=2.0 * variation, numeric=_extrapolated_difference(J2))


@dataclass(frozen=True)
class OptimalityReport:
    min_increase: float
    n_checks: int
    J_star: float

    @property
    def passed(self) -> bool:
        return self.min_increase >= -1e-10 * (1.0 + abs(self.J_star))


def optimality_sweep(
    spec: ProblemSpec,
    report: SolveReport,
    n_directions: int = 50,
    eps: Sequence[float] = (0.1, -0.1, 0.01, -0.01),
    seed: int = DEFAULT_SEED,
) -> OptimalityReport:
    """J(u*) <= J(u* + eps v) for random adapted directions v."""
    field = report.field
    rng = np.random.default_rng(seed)
    u_star = report.control
    J0 = cost_of(field, spec.xi, u_star)
    worst = np.inf
    for _ in range(n_directions):
        v = OpenLoop.random(field.tree, field.m, rng)
        for e in eps:
            worst = min(worst, cost_of(field, spec.xi, u_star + e * v) - J0)
    return OptimalityReport(min_increase=float(worst), n_checks=n_directions * len(eps), J_star=J0)


def nullspace_control_gap(spec: ProblemSpec, report: SolveReport, rcond: float = 1e-10) -> float:
    """Largest control change when the multipliers move along the KKT nullspace."""
    field = report.field
    ops = report.operators
    if ops is None:
        return 0.0
    responses = assemble_adjoint_response(field, spec.xi)
    K = kkt_matrix(responses, ops.L1, ops.L2)
    basis = scipy.linalg.null_space(K, rcond=rcond)
    size = ops.L1.matrix.shape[0]
    n = field.n
    base = report.control
    gap = 0.0
    t = report.multipliers
    for col in basis.T:
        da, dl, db = (col[k * size : (k + 1) * size].reshape(-1, n) for k in range(3))
        moved = MultiplierTriple(alpha=t.alpha + da, lam=t.lam + dl, beta=t.beta + db, info=t.info)
        other = recover_control(field, report.riccati, report.hat, moved, spec.xi)
        gap = max(gap, base.max_abs_diff(other.control))
    return gap


# -------------------------
# corpus
# -------------------------
def _instance_1(**overrides: Any) -> ProblemSpec:
    params: dict[str, Any] = dict(
        T=1.0, N=4, xi=[1.0], delta=1.0, name="instance-1",
        A=0.1, A1=0.05, B=1.0, C=0.2, C1=0.1, D=0.5, Q=1.0, Q1=0.5, R=1.0, G=1.0,
    )
    params.update(overrides)
    return make_spec(1, 1, **params)


def build_corpus() -> list[ProblemSpec]:
    """Twelve instances: n, m in {1, 2}, N in {4, 6, 8}, fixed and path-dependent coefficients."""
    one = (1, 1)
    two = (2, 2)
    corpus = [
        _instance_1(),
        _instance_1(
            name="instance-1-random",
            A=path_rule("sign_w", 0.1, 0.2, one),
            C1=path_rule("positive_w", 0.0, 0.1, one),
        ),
        _instance_1(name="instance-1-n6", N=6),
        _instance_1(name="instance-1-n8", N=8),
        _instance_1(name="random-weight-r", N=6, delta=0.5, R=path_rule("tanh_w", 1.0, 0.5, one)),
        _instance_1(name="classical", A1=0.0, C1=0.0, Q1=0.0),
        _instance_1(
            name="classical-random", N=6, A1=0.0, C1=0.0, Q1=0.0,
            Q=path_rule("positive_w", 1.0, 0.5, one),
        ),
        make_spec(
            2, 1, N=4, xi=[1.0, -0.5], delta=1.0, name="two-state",
            A=[[0.1, 0.2], [0.0, -0.1]], A1=0.05, B=[[1.0], [0.5]], C=0.2, C1=0.1,
            D=[[0.3], [0.0]], Q=1.0, Q1=[[0.5, 0.1], [0.1, 0.3]], R=1.0, G=[[1.0, 0.2], [0.2, 0.5]],
        ),
        make_spec(
            2, 2, N=6, xi=[0.5, 1.0], delta=0.7, name="two-by-two",
            A=[[0.0, 0.3], [-0.3, 0.0]], A1=[[0.1, 0.0], [0.05, 0.1]], B=1.0, C=0.15, C1=0.05,
            D=[[0.4, 0.0], [0.1, 0.2]], Q=[[1.0, 0.0], [0.0, 0.5]], Q1=0.2, R=[[1.0, 0.1], [0.1, 0.8]], G=1.0,
        ),
        make_spec(
            1, 2, N=4, xi=[1.0], delta=1.0, name="wide-control",
            A=path_rule("sign_w", 0.1, 0.1, (1, 1)), A1=0.1, B=[[1.0, 0.5]], C=0.2, C1=0.1,
            D=[[0.2, 0.4]], Q=1.0, Q1=0.5, R=1.0, G=path_rule("tanh_w", 1.0, 0.3, (1, 1)),
        ),
        make_spec(
            2, 2, N=8, xi=[1.0, 0.5], delta=1.0, name="two-by-two-random",
            A=path_rule("tanh_w", 0.0, 0.2, two), A1=0.05, B=[[1.0, 0.0], [0.2, 1.0]],
            C=path_rule("sign_w", 0.1, 0.05, two), C1=0.05, D=0.3, Q=1.0,
            Q1=path_rule("positive_w", 0.2, 0.2, two), R=1.0, G=0.5,
        ),
        _instance_1(
            name="time-polynomial", N=8,
            A=TimePolynomial((np.array([[0.1]]), np.array([[0.2]]))),
            Q1=TimePolynomial((np.array([[0.5]]), np.array([[-0.2]]))),
        ),
    ]
    return corpus


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value <= self.threshold)

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "value": self.value, "threshold": self.threshold, "passed": self.passed}


@dataclass(frozen=True, eq=False)
class VerificationReport:
    name: str
    N: int
    dt: float
    J_star: float
    J_oracle: float
    checks: tuple[CheckResult, ...]
    elapsed: float = 0.0
    details: dict[str, Any] = dc_field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failed(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]

    def check(self, name: str) -> CheckResult:
        return next(c for c in self.checks if c.name == name)


def verify_instance(
    spec: ProblemSpec,
    seed: int = DEFAULT_SEED,
    settings: Settings | None = None,
    n_pairs: int = 100,
    n_gateaux: int = 10,
    n_directions: int = 50,
) -> VerificationReport:
    """Every verification check on one instance, as data."""
    settings = settings or load_settings(dotenv=False)
    start = time.perf_counter()
    tol = settings.tol
    rng = np.random.default_rng(seed)

    report = solve_mfslq(spec, settings)
    field = report.field
    tree, m = field.tree, field.m
    oracle = brute_force_optimal(spec, field=field)
    budget = SMP_CONSTANT * field.dt * _scale_factor(field, spec.xi)
    J, Jo = report.J_star.total, oracle.J_oracle
    u_star = report.control

    checks = [
        CheckResult("oracle_cost_gap", abs(J - Jo) / (1.0 + abs(Jo)), 1e-8),
        CheckResult("oracle_control_gap", u_star.max_abs_diff(oracle.u_oracle) / (1.0 + oracle.u_oracle.max_abs()), 1e-6),
        CheckResult("oracle_gradient", oracle.gradient_max / _scale_factor(field, spec.xi), 1e-8),
    ]
    checks += [CheckResult(k, v, tol) for k, v in report.residuals.items()]
    checks.append(CheckResult("riccati_gap_margin", max(0.0, field.delta - tol - report.riccati.min_gap), 0.0))

    smp = check_smp(spec, oracle.u_oracle, field=field)
    checks.append(CheckResult("smp_residual_rms", smp.rms_residual, budget))

    conv = max(
        check_convexity(spec, OpenLoop.random(tree, m, rng), OpenLoop.random(tree, m, rng), field=field).gap
        for _ in range(n_pairs)
    )
    checks.append(CheckResult("convexity_gap", conv, 1e-10))

    gat_gap, gat_opt = 0.0, 0.0
    for _ in range(n_gateaux):
        u = OpenLoop.random(tree, m, rng)
        v = OpenLoop.random(tree, m, rng)
        rep = gateaux_derivative(spec, u, v, field=field)
        gat_gap = max(gat_gap, rep.gap / (1.0 + abs(rep.analytic)))
        at_opt = gateaux_derivative(spec, u_star, v, field=field)
        v_norm = np.sqrt(sum(field.dt * float(np.mean(np.sum(x * x, axis=1))) for x in v.values))
        gat_opt = max(gat_opt, abs(at_opt.duality) / v_norm)
    checks.append(CheckResult("gateaux_gap", gat_gap, 1e-8))
    checks.append(CheckResult("gateaux_at_optimum", gat_opt, budget))

    sweep = optimality_sweep(spec, report, n_directions=n_directions, seed=seed)
    checks.append(CheckResult("optimality_sweep", max(0.0, -sweep.min_increase) / (1.0 + abs(sweep.J_star)), 1e-10))

    d_alpha = rng.standard_normal(report.multipliers.alpha.shape)
    d_lam = rng.standard_normal(report.multipliers.lam.shape)
    p2 = problem2_gradient_check(spec, report.multipliers.alpha, report.multipliers.lam, d_alpha, d_lam, field=field)
    checks.append(CheckResult("problem2_gradient_gap", p2.gap / (1.0 + abs(p2.adjoint)), 1e-8))

    checks.append(
        CheckResult("nullspace_control_gap", nullspace_control_gap(spec, report, settings.rcond) / (1.0 + u_star.max_abs()), 1e-8)
    )

    details: dict[str, Any] = {"oracle": oracle.to_dict(), "smp": smp.to_dict(), "kkt_rank": list(report.kkt_rank)}
    if not field.has_mean_field():
        deg = degeneration_check(spec, report)
        checks.append(CheckResult("degeneration_control_gap", deg.control_gap, 1e-8))
        checks.append(CheckResult("degeneration_value_gap", deg.value_gap, deg.budget))
        details["degeneration"] = deg.to_dict()

    out = VerificationReport(
        name=spec.name,
        N=tree.N,
        dt=field.dt,
        J_star=J,
        J_oracle=Jo,
        checks=tuple(checks),
        elapsed=time.perf_counter() - start,
        details=details,
    )
    if out.passed:
        log.info("verify %s: all %d checks passed", spec.name, len(checks))
    else:
        log.warning("verify %s: failed %s", spec.name, ", ".join(out.failed))
    return out


@dataclass(frozen=True, eq=False)
class CorpusReport:
    reports: tuple[VerificationReport, ...]
    elapsed: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)

    def rows(self) -> list[dict[str, Any]]:
        out = []
        for r in self.reports:
            row: dict[str, Any] = {"name": r.name, "N": r.N, "J_star": r.J_star, "J_oracle": r.J_oracle, "passed": r.passed}
            for c in r.checks:
                row[c.name] = c.value
            out.append(row)
        return out


def run_corpus(
    specs: Sequence[ProblemSpec] | None = None,
    seed: int = DEFAULT_SEED,
    settings: Settings | None = None,
    workers: int = 1,
    **kwargs: Any,
) -> CorpusReport:
    """Verify every instance; reports come back in corpus order whatever the worker count."""
    start = time.perf_counter()
    specs = build_corpus() if specs is None else specs

    def one(spec: ProblemSpec) -> VerificationReport:
        return verify_instance(spec, seed=seed, settings=settings, **kwargs)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = tuple(pool.map(one, specs))
    else:
        reports = tuple(one(spec) for spec in specs)
    elapsed = time.perf_counter() - start
    log.info("corpus: %d/%d instances passed in %.1fs", sum(r.passed for r in reports), len(reports), elapsed)
    return CorpusReport(reports=reports, elapsed=elapsed)
