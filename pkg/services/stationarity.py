from __future__ import annotations

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field as dc_field, replace
from typing import Any, Iterator, NamedTuple

import numpy as np
import scipy.linalg

from services.bsde import CoupledFbsdeSolver, FbsdeData, FbsdeSolution, FbsdeSystem
from services.errors import AssumptionError, InfeasibleStationarityError, MfslqError, ShapeError
from services.model import (
    AssumptionReport,
    CoefficientField,
    ProblemSpec,
    TimeGrid,
    build_tree,
    evaluate_coefficients,
    validate_assumptions,
)
from services.operators import DiscreteOperator, OperatorBundle, build_operators, closed_loop
from services.riccati import HatCoefficients, RiccatiSolution, hat_coefficients, solve_riccati_tree
from services.settings import Settings, load_settings
from services.tree_sde import (
    CostBreakdown,
    Feedback,
    OpenLoop,
    StatePath,
    evaluate_cost,
    evaluate_cost_problem1,
    evaluate_cost_problem2,
    tilde_control,
)
from services.utils import mv, tr

log = logging.getLogger(__name__)

# u = K X + k with node-indexed gain and offset
ControlLaw = Feedback


# -------------------------
# optimality system of the fixed-mean problem and its adjoint chain
# -------------------------
def tilde_system(field: CoefficientField) -> FbsdeSystem:
    """X' drift AX - BR^-1(B'Ybar + D'Z), Y driver A'Ybar + C'Z + QX, Y_N = G X_N.

    The adjoint chain (k, m, n) has the same matrix, so one factorization serves both.
    """
    BR = tuple(b @ r for b, r in zip(field.B, field.R_inv))
    DR = tuple(d @ r for d, r in zip(field.D, field.R_inv))
    return FbsdeSystem(
        tree=field.tree,
        n=field.n,
        drift={
            "X": field.A,
            "Ybar": tuple(-br @ tr(b) for br, b in zip(BR, field.B)),
            "Z": tuple(-br @ tr(d) for br, d in zip(BR, field.D)),
        },
        diffusion={
            "X": field.C,
            "Ybar": tuple(-dr @ tr(b) for dr, b in zip(DR, field.B)),
            "Z": tuple(-dr @ tr(d) for dr, d in zip(DR, field.D)),
        },
        driver={"X": field.Q, "Ybar": tuple(tr(a) for a in field.A), "Z": tuple(tr(c) for c in field.C)},
        terminal=field.G,
    )


def tilde_data(field: CoefficientField, xi, alpha: np.ndarray, lam: np.ndarray) -> FbsdeData:
    alpha = np.asarray(alpha, dtype=float)
    return FbsdeData(
        x0=xi,
        drift=tuple(mv(field.A1[i], alpha[i]) for i in range(field.N)),
        diffusion=tuple(mv(field.C1[i], alpha[i]) for i in range(field.N)),
        driver=np.asarray(lam, dtype=float),
    )


def adjoint_data(field: CoefficientField, tilde: FbsdeSolution) -> FbsdeData:
    """Exogenous terms of the chain: -B u, -D u forward; Q X source; G X_N terminal."""
    u = tilde_control(field, tilde)
    X = tilde.X.X
    return FbsdeData(
        x0=np.zeros(field.n),
        drift=tuple(-mv(field.B[i], u.values[i]) for i in range(field.N)),
        diffusion=tuple(-mv(field.D[i], u.values[i]) for i in range(field.N)),
        driver=tuple(mv(field.Q[i], X[i]) for i in range(field.N)),
        terminal=mv(field.G, X[field.N]),
    )


def problem2_gradient(
    field: CoefficientField,
    solver: CoupledFbsdeSolver,
    xi,
    alpha: np.ndarray,
    lam: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Half-gradients of the multiplier problem's cost in the dt-weighted inner product.

    Returns (E[Q1] alpha + E[A1' mbar + C1' n], E[k]), each of shape (N, n).
    """
    alpha = np.asarray(alpha, dtype=float)
    tilde = solver.solve(tilde_data(field, xi, alpha, lam))
    chain = solver.solve(adjoint_data(field, tilde))
    g_alpha = np.array(
        [
            field.Q1_mean[i] @ alpha[i] + (mv(tr(field.A1[i]), chain.Ybar[i]) + mv(tr(field.C1[i]), chain.Z[i])).mean(axis=0)
            for i in range(field.N)
        ]
    )
    g_lambda = chain.X.mean[: field.N]
    return g_alpha, g_lambda


@dataclass(frozen=True, eq=False)
class AdjointResponse:
    """Affine maps (alpha, lambda) -> the two half-gradients, on stacked grid vectors."""

    M_alpha: np.ndarray
    M_lambda: np.ndarray
    r_xi: np.ndarray
    K_alpha: np.ndarray
    K_lambda: np.ndarray
    r_k: np.ndarray
    grid: TimeGrid
    n: int

    def evaluate(self, alpha: np.ndarray, lam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a = np.asarray(alpha, dtype=float).reshape(-1)
        b = np.asarray(lam, dtype=float).reshape(-1)
        g_alpha = self.M_alpha @ a + self.M_lambda @ b + self.r_xi
        g_lambda = self.K_alpha @ a + self.K_lambda @ b + self.r_k
        return g_alpha.reshape(-1, self.n), g_lambda.reshape(-1, self.n)


def assemble_adjoint_response(
    field: CoefficientField,
    xi,
    solver: CoupledFbsdeSolver | None = None,
) -> AdjointResponse:
    solver = solver or CoupledFbsdeSolver(tilde_system(field))
    N, n = field.N, field.n
    size = N * n
    zero = np.zeros((N, n))
    r_xi, r_k = problem2_gradient(field, solver, xi, zero, zero)

    blocks = {k: np.zeros((size, size)) for k in ("M_alpha", "M_lambda", "K_alpha", "K_lambda")}
    origin = np.zeros(n)
    for col in range(size):
        e = np.zeros(size)
        e[col] = 1.0
        e = e.reshape(N, n)
        ga, gl = problem2_gradient(field, solver, origin, e, zero)
        blocks["M_alpha"][:, col], blocks["K_alpha"][:, col] = ga.reshape(-1), gl.reshape(-1)
        ga, gl = problem2_gradient(field, solver, origin, zero, e)
        blocks["M_lambda"][:, col], blocks["K_lambda"][:, col] = ga.reshape(-1), gl.reshape(-1)
    log.debug("adjoint response: %d impulse pairs", size)
    return AdjointResponse(r_xi=r_xi.reshape(-1), r_k=r_k.reshape(-1), grid=field.tree.grid, n=n, **blocks)


# -------------------------
# stationarity system
# -------------------------
@dataclass(frozen=True)
class KktInfo:
    rows: int
    cols: int
    rank: int
    residuals: dict[str, float]

    @property
    def nullity(self) -> int:
        return self.cols - self.rank

    @property
    def non_unique(self) -> bool:
        return self.nullity > 0


@dataclass(frozen=True, eq=False)
class MultiplierTriple:
    alpha: np.ndarray  # (N, n)
    lam: np.ndarray
    beta: np.ndarray
    info: KktInfo


def kkt_matrix(responses: AdjointResponse, L1: DiscreteOperator, L2: DiscreteOperator) -> np.ndarray:
    size = L1.matrix.shape[0]
    eye = np.eye(size)
    return np.block(
        [
            [responses.M_alpha, responses.M_lambda, L2.matrix.T - eye],
            [responses.K_alpha, responses.K_lambda, L1.matrix.T],
            [L2.matrix - eye, L1.matrix, np.zeros((size, size))],
        ]
    )


def solve_stationarity(
    responses: AdjointResponse,
    P_xi: np.ndarray,
    L1: DiscreteOperator,
    L2: DiscreteOperator,
    tol: float = 1e-8,
    rcond: float = 1e-10,
) -> MultiplierTriple:
    """Minimum-norm least-squares solution of the three stationarity lines.

    E[Q1 a] + E[A1'm + C1'n] + (L2* - I) beta = 0
    E[k] + L1* beta = 0
    P xi + L1 lambda + L2 alpha - alpha = 0
    """
    if L1.grid != responses.grid or L2.grid != responses.grid:
        raise ShapeError("stationarity inputs live on different grids")
    n = responses.n
    size = L1.matrix.shape[0]
    P_xi = np.asarray(P_xi, dtype=float).reshape(-1)
    if P_xi.size != size:
        raise ShapeError(f"P xi has {P_xi.size} entries, expected {size}")

    K = kkt_matrix(responses, L1, L2)
    rhs = np.concatenate([-responses.r_xi, -responses.r_k, -P_xi])
    sol, _, rank, _ = scipy.linalg.lstsq(K, rhs, cond=rcond, lapack_driver="gelsd")

    defect = K @ sol - rhs
    scale = 1.0 + float(np.max(np.abs(rhs), initial=0.0))
    names = ("alpha", "lambda", "constraint")
    residuals = {f"kkt_{name}": float(np.max(np.abs(defect[k * size : (k + 1) * size]), initial=0.0)) / scale for k, name in enumerate(names)}
    info = KktInfo(rows=K.shape[0], cols=K.shape[1], rank=int(rank), residuals=residuals)
    log.info("stationarity: rank %d of %d, residuals %s", info.rank, info.cols, {k: f"{v:.2e}" for k, v in residuals.items()})
    if info.non_unique:
        log.info("stationarity: nullspace of dimension %d, returning the minimum-norm triple", info.nullity)
    if any(not np.isfinite(v) or v > tol for v in residuals.values()):
        raise InfeasibleStationarityError(
            "stationarity system is inconsistent: " + ", ".join(f"{k}={v:.3g}" for k, v in residuals.items()),
            residuals,
        )
    alpha, lam, beta = (sol[k * size : (k + 1) * size].reshape(-1, n) for k in range(3))
    return MultiplierTriple(alpha=alpha, lam=lam, beta=beta, info=info)


# -------------------------
# control recovery
# -------------------------
@dataclass(frozen=True, eq=False)
class SolveReport:
    u_star: ControlLaw
    X_star: StatePath
    J_star: CostBreakdown
    multipliers: MultiplierTriple
    kkt_rank: tuple[int, int, int]
    residuals: dict[str, float]
    field: CoefficientField
    riccati: RiccatiSolution
    hat: HatCoefficients
    xi: np.ndarray
    name: str = "instance"
    operators: OperatorBundle | None = None
    assumptions: AssumptionReport | None = None
    timings: dict[str, float] = dc_field(default_factory=dict)

    @property
    def control(self) -> OpenLoop:
        return self.u_star.realize(self.X_star)

    @property
    def mean_path(self) -> np.ndarray:
        return self.X_star.mean


def recover_control(
    field: CoefficientField,
    ric: RiccatiSolution,
    hat: HatCoefficients,
    triple: MultiplierTriple,
    xi,
) -> SolveReport:
    xi = np.asarray(xi, dtype=float).reshape(-1)
    loop = closed_loop(hat, xi, triple.alpha, triple.lam)
    phi = loop.offset
    offset = tuple(
        mv(hat.K_alpha[i], triple.alpha[i]) + mv(hat.K_phi[i], phi.Ybar[i]) + mv(hat.K_psi[i], phi.Z[i])
        for i in range(field.N)
    )
    law = ControlLaw(gain=hat.K, offset=offset)
    J = evaluate_cost(field, loop.X, loop.control)
    mean_gap = float(np.max(np.abs(loop.X.mean[: field.N] - triple.alpha)))
    residuals = dict(triple.info.residuals)
    residuals["mean_consistency"] = mean_gap / (1.0 + float(np.max(np.abs(triple.alpha), initial=0.0)))
    info = triple.info
    return SolveReport(
        u_star=law,
        X_star=loop.X,
        J_star=J,
        multipliers=triple,
        kkt_rank=(info.rows, info.cols, info.rank),
        residuals=residuals,
        field=field,
        riccati=ric,
        hat=hat,
        xi=xi,
    )


class Problem1Solution(NamedTuple):
    law: ControlLaw
    X: StatePath
    cost: CostBreakdown


def solve_problem1(
    field: CoefficientField,
    ric: RiccatiSolution,
    hat: HatCoefficients,
    alpha: np.ndarray,
    lam: np.ndarray,
    xi,
) -> Problem1Solution:
    """Optimal feedback of the fixed-mean problem for a given (alpha, lambda)."""
    alpha = np.asarray(alpha, dtype=float)
    lam = np.asarray(lam, dtype=float)
    loop = closed_loop(hat, xi, alpha, lam)
    phi = loop.offset
    offset = tuple(
        mv(hat.K_alpha[i], alpha[i]) + mv(hat.K_phi[i], phi.Ybar[i]) + mv(hat.K_psi[i], phi.Z[i])
        for i in range(field.N)
    )
    law = ControlLaw(gain=hat.K, offset=offset)
    return Problem1Solution(law, loop.X, evaluate_cost_problem1(field, loop.X, loop.control, alpha, lam))


# -------------------------
# pipeline
# -------------------------
@contextmanager
def _stage(name: str, timings: dict[str, float]) -> Iterator[None]:
    start = time.perf_counter()
    log.debug("stage %s: start", name)
    try:
        yield
    except MfslqError as exc:
        if exc.stage is None:
            exc.stage = name
        log.error("stage %s failed: %s", name, exc.message)
        raise
    finally:
        timings[name] = time.perf_counter() - start
    log.info("stage %s: done in %.3fs", name, timings[name])


def solve_mfslq(
    spec: ProblemSpec,
    settings: Settings | None = None,
    *,
    scheme: str | None = None,
    tol: float | None = None,
    rcond: float | None = None,
) -> SolveReport:
    """Tree, coefficients, Riccati, operators, adjoint responses, stationarity, recovery."""
    settings = settings or load_settings(dotenv=False)
    scheme = scheme or settings.riccati_scheme
    tol = settings.tol if tol is None else tol
    rcond = settings.rcond if rcond is None else rcond
    timings: dict[str, float] = {}

    with _stage("tree", timings):
        tree = build_tree(spec.grid, max_levels=settings.max_levels)
    with _stage("coefficients", timings):
        field = evaluate_coefficients(spec, tree)
    with _stage("assumptions", timings):
        assumptions = validate_assumptions(field)
        if not (assumptions.h1_ok and assumptions.h2_ok):
            raise AssumptionError(
                f"{len(assumptions.violations)} assumption violation(s), first: {assumptions.violations[0].detail}",
                assumptions.violations,
            )
    with _stage("riccati", timings):
        ric = solve_riccati_tree(field, scheme=scheme)
        assumptions = assumptions.with_psi(ric.max_norm_psi)
    with _stage("hat", timings):
        hat = hat_coefficients(field, ric)
    with _stage("operators", timings):
        ops = build_operators(hat, spec.xi)
    with _stage("adjoint_response", timings):
        solver = CoupledFbsdeSolver(tilde_system(field))
        responses = assemble_adjoint_response(field, spec.xi, solver)
    with _stage("stationarity", timings):
        triple = solve_stationarity(responses, ops.P_xi, ops.L1, ops.L2, tol=tol, rcond=rcond)
    with _stage("recovery", timings):
        report = recover_control(field, ric, hat, triple, spec.xi)
        tilde = solver.solve(tilde_data(field, spec.xi, triple.alpha, triple.lam))
        J2 = evaluate_cost_problem2(field, tilde, triple.alpha, triple.lam, triple.beta, ops)
        residuals = dict(report.residuals)
        residuals["problem2_cost_gap"] = abs(J2.total - report.J_star.total) / (1.0 + abs(report.J_star.total))
        if residuals["mean_consistency"] > tol:
            log.warning("closed-loop mean misses alpha by %.3g", residuals["mean_consistency"])

    log.info("solved %s: J* = %.10g", spec.name, report.J_star.total)
    return replace(report, name=spec.name, operators=ops, assumptions=assumptions, residuals=residuals, timings=timings)


def summarize(report: SolveReport) -> dict[str, Any]:
    return {
        "name": report.name,
        "J_star": report.J_star.total,
        "kkt_rank": list(report.kkt_rank),
        "residuals": report.residuals,
    }
