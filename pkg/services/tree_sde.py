from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Union

import numpy as np

from services.errors import ConfigError, NumericalOverflowError, ShapeError
from services.model import CoefficientField, CoefficientRule, Constant, ProblemSpec, ScenarioTree
from services.settings import DEFAULT_SEED
from services.utils import as_matrix, mtv, mv, quad

if TYPE_CHECKING:
    from services.operators import OperatorBundle

log = logging.getLogger(__name__)

PARTICLE_BLOCK = 4096
OVERFLOW_LIMIT = 1e150


# -------------------------
# controls and paths
# -------------------------
@dataclass(frozen=True, eq=False)
class OpenLoop:
    """Node-indexed controls on levels 0..N-1, each level shaped (2**i, m)."""

    values: tuple[np.ndarray, ...]

    @classmethod
    def zeros(cls, tree: ScenarioTree, m: int) -> "OpenLoop":
        return cls(tree.zeros(m))

    @classmethod
    def constant(cls, tree: ScenarioTree, value) -> "OpenLoop":
        v = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(tuple(np.tile(v, (tree.size(i), 1)) for i in range(tree.N)))

    @classmethod
    def random(cls, tree: ScenarioTree, m: int, rng: np.random.Generator, scale: float = 1.0) -> "OpenLoop":
        return cls(tuple(scale * rng.standard_normal((tree.size(i), m)) for i in range(tree.N)))

    @classmethod
    def from_vector(cls, tree: ScenarioTree, m: int, vec: np.ndarray) -> "OpenLoop":
        vec = np.asarray(vec, dtype=float).reshape(-1)
        expected = sum(tree.size(i) for i in range(tree.N)) * m
        if vec.size != expected:
            raise ShapeError(f"control vector has length {vec.size}, expected {expected}")
        out, start = [], 0
        for i in range(tree.N):
            stop = start + tree.size(i) * m
            out.append(vec[start:stop].reshape(tree.size(i), m))
            start = stop
        return cls(tuple(out))

    @property
    def m(self) -> int:
        return self.values[0].shape[1]

    def as_vector(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.values])

    def at(self, level: int, X: np.ndarray) -> np.ndarray:
        return self.values[level]

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(v))) for v in self.values)

    def max_abs_diff(self, other: "OpenLoop") -> float:
        return max(float(np.max(np.abs(a - b))) for a, b in zip(self.values, other.values))

    def __add__(self, other: "OpenLoop") -> "OpenLoop":
        return OpenLoop(tuple(a + b for a, b in zip(self.values, other.values)))

    def __sub__(self, other: "OpenLoop") -> "OpenLoop":
        return OpenLoop(tuple(a - b for a, b in zip(self.values, other.values)))

    def __mul__(self, c: float) -> "OpenLoop":
        return OpenLoop(tuple(c * a for a in self.values))

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class Feedback:
    """u = gain X + offset, node by node."""

    gain: tuple[np.ndarray, ...]
    offset: tuple[np.ndarray, ...]

    def at(self, level: int, X: np.ndarray) -> np.ndarray:
        return mv(self.gain[level], X) + self.offset[level]

    def realize(self, path: "StatePath") -> OpenLoop:
        return OpenLoop(tuple(self.at(i, path.X[i]) for i in range(len(self.gain))))


ControlProcess = Union[OpenLoop, Feedback]


@dataclass(frozen=True, eq=False)
class StatePath:
    X: tuple[np.ndarray, ...]  # levels 0..N, each (2**i, n)

    @property
    def mean(self) -> np.ndarray:
        return np.array([x.mean(axis=0) for x in self.X])

    @property
    def n(self) -> int:
        return self.X[0].shape[1]

    def second_moment(self) -> np.ndarray:
        return np.array([np.mean(np.sum(x * x, axis=1)) for x in self.X])


def as_open_loop(u: ControlProcess, path: StatePath) -> OpenLoop:
    if isinstance(u, Feedback):
        return u.realize(path)
    return u


def propagate_state(
    field: CoefficientField,
    u: ControlProcess,
    xi,
    alpha: np.ndarray | None = None,
) -> StatePath:
    """Explicit Euler for the mean-field state equation on the tree.

    With `alpha` (shape (N, n)) the mean-field inputs use alpha instead of
    the tree mean, which is the state equation of the fixed-mean problem.
    """
    tree = field.tree
    xi = np.asarray(xi, dtype=float).reshape(-1)
    if xi.shape != (field.n,):
        raise ShapeError(f"initial state has length {xi.size}, expected n={field.n}")

    X = [xi[None, :].copy()]
    for i in range(tree.N):
        x = X[i]
        ex = x.mean(axis=0) if alpha is None else np.asarray(alpha[i], dtype=float)
        ui = u.at(i, x)
        if ui.shape != (tree.size(i), field.m):
            raise ShapeError(f"control at level {i} has shape {ui.shape}, expected {(tree.size(i), field.m)}")
        drift = mv(field.A[i], x) + mv(field.A1[i], ex) + mv(field.B[i], ui)
        diff = mv(field.C[i], x) + mv(field.C1[i], ex) + mv(field.D[i], ui)
        X.append(tree.expand(x + tree.dt * drift) + tree.increments(i)[:, None] * tree.expand(diff))
    return StatePath(tuple(X))


# -------------------------
# costs
# -------------------------
@dataclass(frozen=True)
class CostBreakdown:
    running_state: float
    running_mean: float
    running_control: float
    terminal: float
    multiplier: float = 0.0
    by_level: tuple[float, ...] = ()  # running cost on each grid cell

    @property
    def total(self) -> float:
        return self.running_state + self.running_mean + self.running_control + self.terminal + self.multiplier

    def as_dict(self) -> dict[str, Any]:
        return {
            "running_state": self.running_state,
            "running_mean": self.running_mean,
            "running_control": self.running_control,
            "terminal": self.terminal,
            "multiplier": self.multiplier,
            "total": self.total,
        }


def _running_parts(field: CoefficientField, X: tuple[np.ndarray, ...], u: OpenLoop, means: np.ndarray):
    dt = field.dt
    state = mean = control = 0.0
    per_level = []
    for i in range(field.N):
        s = dt * float(np.mean(quad(field.Q[i], X[i])))
        mt = dt * float(means[i] @ field.Q1_mean[i] @ means[i])
        c = dt * float(np.mean(quad(field.R[i], u.values[i])))
        state, mean, control = state + s, mean + mt, control + c
        per_level.append(s + mt + c)
    return state, mean, control, tuple(per_level)


def evaluate_cost(field: CoefficientField, path: StatePath, u: ControlProcess) -> CostBreakdown:
    u = as_open_loop(u, path)
    means = path.mean
    state, mean, control, per_level = _running_parts(field, path.X, u, means)
    terminal = float(np.mean(quad(field.G, path.X[field.N])))
    return CostBreakdown(state, mean, control, terminal, 0.0, per_level)


def evaluate_cost_problem1(
    field: CoefficientField,
    path: StatePath,
    u: ControlProcess,
    alpha: np.ndarray,
    lam: np.ndarray,
) -> CostBreakdown:
    """Cost with alpha in the mean-field weight and the multiplier term 2<lambda, X - alpha>."""
    u = as_open_loop(u, path)
    alpha = np.asarray(alpha, dtype=float)
    lam = np.asarray(lam, dtype=float)
    state, mean, control, per_level = _running_parts(field, path.X, u, alpha)
    gap = path.mean[: field.N] - alpha
    multiplier = 2.0 * field.dt * float(np.sum(lam * gap))
    terminal = float(np.mean(quad(field.G, path.X[field.N])))
    return CostBreakdown(state, mean, control, terminal, multiplier, per_level)


def tilde_control(field: CoefficientField, solution) -> OpenLoop:
    """u = -R^-1 (B' Ybar + D' Z) from an optimality-system solution."""
    out = []
    for i in range(field.N):
        rhs = mtv(field.B[i], solution.Ybar[i]) + mtv(field.D[i], solution.Z[i])
        out.append(-mv(field.R_inv[i], rhs))
    return OpenLoop(tuple(out))


def evaluate_cost_problem2(
    field: CoefficientField,
    tilde_solution,
    alpha: np.ndarray,
    lam: np.ndarray,
    beta: np.ndarray | None = None,
    operators: "OperatorBundle | None" = None,
) -> CostBreakdown:
    """Cost of the multiplier problem for a solved optimality system.

    The control term is (B'Ybar + D'Z)' R^-1 (B'Ybar + D'Z); the multiplier term
    is sum dt 2<beta, P xi + L1 lambda + L2 alpha - alpha>.
    """
    alpha = np.asarray(alpha, dtype=float)
    u = tilde_control(field, tilde_solution)
    path = tilde_solution.X
    state, mean, control, per_level = _running_parts(field, path.X, u, alpha)
    terminal = float(np.mean(quad(field.G, path.X[field.N])))

    multiplier = 0.0
    if beta is not None and np.any(beta):
        if operators is None:
            raise ShapeError("a nonzero beta needs the operator bundle")
        if operators.grid != field.tree.grid or operators.n != field.n:
            raise ShapeError("operator bundle was built on a different grid")
        residual = operators.constraint_residual(alpha, lam)
        multiplier = 2.0 * field.dt * float(np.sum(np.asarray(beta) * residual))
    return CostBreakdown(state, mean, control, terminal, multiplier, per_level)


def moment_ratio(field: CoefficientField, path: StatePath, u: ControlProcess) -> float:
    """sup_i E|X_i|^2 / (|xi|^2 + E sum |u|^2 dt)."""
    u = as_open_loop(u, path)
    top = float(np.max(path.second_moment()))
    energy = sum(field.dt * float(np.mean(np.sum(v * v, axis=1))) for v in u.values)
    bottom = float(path.X[0][0] @ path.X[0][0]) + energy
    if bottom == 0.0:
        return 0.0 if top == 0.0 else float("inf")
    return top / bottom


# -------------------------
# particles
# -------------------------
@dataclass(frozen=True, eq=False)
class FeedbackRule:
    """u = gain(t, W) X + offset(t, W); offset rules return (m, 1) matrices."""

    gain: CoefficientRule | None = None
    offset: CoefficientRule | None = None

    @classmethod
    def constant(cls, gain, offset, m: int, n: int) -> "FeedbackRule":
        return cls(Constant(as_matrix(gain, (m, n))), Constant(np.asarray(offset, dtype=float).reshape(m, 1)))

    def __call__(self, t: float, w: np.ndarray, X: np.ndarray, m: int) -> np.ndarray:
        u = np.zeros((len(w), m))
        if self.gain is not None:
            u += mv(np.asarray(self.gain(t, w)), X)
        if self.offset is not None:
            u += np.asarray(self.offset(t, w))[:, :, 0]
        return u


@dataclass(frozen=True, eq=False)
class ParticleEstimate:
    times: np.ndarray
    mean: np.ndarray  # (steps + 1, n)
    std_error: np.ndarray
    second_moment: np.ndarray
    control_energy: float
    n_particles: int
    seed: int

    @property
    def sup_second_moment(self) -> float:
        return float(np.max(self.second_moment))

    @property
    def moment_ratio(self) -> float:
        bottom = float(self.second_moment[0]) + self.control_energy
        if bottom == 0.0:
            return 0.0 if self.sup_second_moment == 0.0 else float("inf")
        return self.sup_second_moment / bottom


def _brownian_increments(n_particles: int, n_steps: int, dt: float, seed: int) -> np.ndarray:
    n_blocks = -(-n_particles // PARTICLE_BLOCK)
    children = np.random.SeedSequence(seed).spawn(n_blocks)
    blocks = []
    for b, child in enumerate(children):
        size = min(PARTICLE_BLOCK, n_particles - b * PARTICLE_BLOCK)
        blocks.append(np.random.Generator(np.random.Philox(child)).standard_normal((size, n_steps)))
    return np.sqrt(dt) * np.concatenate(blocks, axis=0)


def simulate_mfsde_particles(
    spec: ProblemSpec,
    feedback: FeedbackRule | None = None,
    n_particles: int = 10_000,
    n_steps: int | None = None,
    seed: int = DEFAULT_SEED,
) -> ParticleEstimate:
    """Euler-Maruyama with E X replaced by the empirical particle mean."""
    if int(n_particles) < 2:
        raise ConfigError("need at least two particles", field="particles")
    n, m = spec.dims.n, spec.dims.m
    steps = int(n_steps or spec.grid.N)
    dt = spec.grid.T / steps
    feedback = feedback or FeedbackRule()
    dW = _brownian_increments(int(n_particles), steps, dt, seed)

    W = np.zeros(n_particles)
    X = np.tile(spec.xi, (n_particles, 1))
    means, errors, moments = [X.mean(axis=0)], [np.zeros(n)], [float(spec.xi @ spec.xi)]
    energy = 0.0
    for i in range(steps):
        t = i * dt
        c = {name: np.asarray(spec.rule(name)(t, W)) for name in ("A", "A1", "B", "C", "C1", "D")}
        m_hat = X.mean(axis=0)
        u = feedback(t, W, X, m)
        energy += dt * float(np.mean(np.sum(u * u, axis=1)))
        drift = mv(c["A"], X) + mv(c["A1"], m_hat) + mv(c["B"], u)
        diff = mv(c["C"], X) + mv(c["C1"], m_hat) + mv(c["D"], u)
        X = X + dt * drift + dW[:, i, None] * diff
        W = W + dW[:, i]
        if not np.all(np.isfinite(X)) or np.max(np.abs(X)) > OVERFLOW_LIMIT:
            raise NumericalOverflowError(f"particle state blew up at step {i + 1}", step=i + 1)
        means.append(X.mean(axis=0))
        errors.append(X.std(axis=0, ddof=1) / np.sqrt(n_particles))
        moments.append(float(np.mean(np.sum(X * X, axis=1))))

    log.debug("simulated %d particles over %d steps (seed %d)", n_particles, steps, seed)
    return ParticleEstimate(
        times=np.arange(steps + 1) * dt,
        mean=np.array(means),
        std_error=np.array(errors),
        second_moment=np.array(moments),
        control_energy=energy,
        n_particles=int(n_particles),
        seed=int(seed),
    )
