from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from services.bsde import BsdePath, solve_linear_bsde
from services.errors import ShapeError, UnsupportedGridError
from services.model import TimeGrid
from services.riccati import HatCoefficients
from services.tree_sde import OpenLoop, StatePath
from services.utils import mv

log = logging.getLogger(__name__)

# (phi, psi) of the offset equation; phi vanishes on the leaves
OffsetPair = BsdePath


def grid_inner(f: np.ndarray, g: np.ndarray, dt: float) -> float:
    """<f, g> = sum_i dt f_i . g_i for piecewise-constant grid functions."""
    return dt * float(np.sum(np.asarray(f) * np.asarray(g)))


@dataclass(frozen=True, eq=False)
class ClosedLoop:
    X: StatePath
    offset: OffsetPair
    control: OpenLoop


def closed_loop(
    hat: HatCoefficients,
    xi,
    alpha: np.ndarray | None = None,
    lam: np.ndarray | None = None,
) -> ClosedLoop:
    """Offset BSDE with source lambda + Q alpha, then the feedback state equation."""
    tree, n = hat.tree, hat.n
    alpha = np.zeros((tree.N, n)) if alpha is None else np.asarray(alpha, dtype=float)
    lam = np.zeros((tree.N, n)) if lam is None else np.asarray(lam, dtype=float)
    source = tuple(lam[i] + mv(hat.Q[i], alpha[i]) for i in range(tree.N))
    phi = solve_linear_bsde(tree, hat.M, hat.N, source, np.zeros((tree.size(tree.N), n)))

    X = [np.asarray(xi, dtype=float).reshape(1, n)]
    controls = []
    for i in range(tree.N):
        x, pb, ps = X[i], phi.Ybar[i], phi.Z[i]
        drift = mv(hat.A[i], x) + mv(hat.A1[i], alpha[i]) + mv(hat.B[i], pb) + mv(hat.B1[i], ps)
        diff = mv(hat.C[i], x) + mv(hat.C1[i], alpha[i]) + mv(hat.D[i], pb) + mv(hat.D1[i], ps)
        controls.append(mv(hat.K[i], x) + mv(hat.K_alpha[i], alpha[i]) + mv(hat.K_phi[i], pb) + mv(hat.K_psi[i], ps))
        X.append(tree.expand(x + tree.dt * drift) + tree.increments(i)[:, None] * tree.expand(diff))
    return ClosedLoop(X=StatePath(tuple(X)), offset=phi, control=OpenLoop(tuple(controls)))


@dataclass(frozen=True, eq=False)
class DiscreteOperator:
    """Dense matrix on stacked grid vectors (cell-major, n components per cell)."""

    matrix: np.ndarray
    kind: str
    grid: TimeGrid
    n: int
    is_adjoint: bool = False

    def apply(self, f: np.ndarray) -> np.ndarray:
        out = self.matrix @ np.asarray(f, dtype=float).reshape(-1)
        return out.reshape(-1, self.n)

    @property
    def label(self) -> str:
        return f"{self.kind}*" if self.is_adjoint else self.kind


def adjoint(op: DiscreteOperator) -> DiscreteOperator:
    """Adjoint under the dt-weighted inner product; a plain transpose on uniform grids."""
    if not op.grid.is_uniform:
        raise UnsupportedGridError(f"adjoint of {op.label} needs a uniform grid")
    rows, cols = op.matrix.shape
    if rows != cols:
        raise ShapeError(f"adjoint needs a square operator, {op.label} is {rows}x{cols}")
    return replace(op, matrix=op.matrix.T, is_adjoint=not op.is_adjoint)


def _grid_mean(loop: ClosedLoop, N: int) -> np.ndarray:
    return loop.X.mean[:N]


def assemble_P(hat: HatCoefficients, xi) -> np.ndarray:
    """P xi: grid mean of the feedback state started at xi with no offsets, shape (N, n)."""
    return _grid_mean(closed_loop(hat, xi), hat.tree.N)


def _impulse_columns(hat: HatCoefficients, which: str) -> np.ndarray:
    tree, n = hat.tree, hat.n
    size = tree.N * n
    out = np.zeros((size, size))
    zero = np.zeros(n)
    for col in range(size):
        impulse = np.zeros(size)
        impulse[col] = 1.0
        impulse = impulse.reshape(tree.N, n)
        loop = closed_loop(hat, zero, alpha=impulse) if which == "L2" else closed_loop(hat, zero, lam=impulse)
        out[:, col] = _grid_mean(loop, tree.N).reshape(-1)
    log.debug("assembled %s from %d impulse columns", which, size)
    return out


def assemble_L1(hat: HatCoefficients) -> DiscreteOperator:
    return DiscreteOperator(_impulse_columns(hat, "L1"), "L1", hat.tree.grid, hat.n)


def assemble_L2(hat: HatCoefficients) -> DiscreteOperator:
    return DiscreteOperator(_impulse_columns(hat, "L2"), "L2", hat.tree.grid, hat.n)


def assemble_P_operator(hat: HatCoefficients) -> DiscreteOperator:
    """xi-response as an (nN) x n matrix, one column per initial-state coordinate."""
    n = hat.n
    cols = [assemble_P(hat, e).reshape(-1) for e in np.eye(n)]
    return DiscreteOperator(np.column_stack(cols), "P", hat.tree.grid, n)


@dataclass(frozen=True, eq=False)
class OperatorBundle:
    P_xi: np.ndarray
    P: DiscreteOperator
    L1: DiscreteOperator
    L2: DiscreteOperator
    xi: np.ndarray

    @property
    def grid(self) -> TimeGrid:
        return self.L1.grid

    @property
    def n(self) -> int:
        return self.L1.n

    def constraint_residual(self, alpha: np.ndarray, lam: np.ndarray) -> np.ndarray:
        """P xi + L1 lambda + L2 alpha - alpha, shape (N, n)."""
        alpha = np.asarray(alpha, dtype=float).reshape(-1, self.n)
        return self.P_xi + self.L1.apply(lam) + self.L2.apply(alpha) - alpha


def build_operators(hat: HatCoefficients, xi) -> OperatorBundle:
    xi = np.asarray(xi, dtype=float).reshape(-1)
    return OperatorBundle(
        P_xi=assemble_P(hat, xi),
        P=assemble_P_operator(hat),
        L1=assemble_L1(hat),
        L2=assemble_L2(hat),
        xi=xi,
    )
