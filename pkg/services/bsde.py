from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from services.errors import ConfigError, ConvergenceError, FbsdeSingularError, ShapeError, StepSizeError
from services.model import CoefficientField, ScenarioTree
from services.tree_sde import StatePath
from services.utils import mv, spectral_norm, tr

log = logging.getLogger(__name__)

SINGULAR_TOL = 1e-12
FBSDE_RESIDUAL_TOL = 1e-8
DENSE_RANK_LIMIT = 4000
SIGMA_CAP = 600.0  # keeps exp(sigma * t) finite


@dataclass(frozen=True, eq=False)
class BsdePath:
    Y: tuple[np.ndarray, ...]  # levels 0..N
    Z: tuple[np.ndarray, ...]  # levels 0..N-1
    Ybar: tuple[np.ndarray, ...]  # E[Y_{i+1} | node], levels 0..N-1
    iterations: int = 1
    ratios: tuple[float, ...] = ()

    @property
    def y0(self) -> np.ndarray:
        return self.Y[0][0]


def _levels(tree: ScenarioTree, value, n: int, levels: int | None = None) -> tuple[np.ndarray, ...]:
    """None -> zeros; (N, n) grid array -> broadcast; per-level tuple -> as given."""
    levels = tree.N if levels is None else levels
    if value is None:
        return tree.zeros(n, levels=levels)
    if isinstance(value, np.ndarray):
        return tree.broadcast(value[:levels])
    return tuple(np.asarray(v, dtype=float) for v in value)


def _matrices(tree: ScenarioTree, value, n: int) -> tuple[np.ndarray, ...]:
    if value is None:
        return tree.zeros(n, n)
    return tuple(value)


def solve_linear_bsde(
    tree: ScenarioTree,
    M=None,
    N=None,
    source=None,
    terminal: np.ndarray | None = None,
    *,
    implicit: bool = False,
) -> BsdePath:
    """Y_i = Ybar_i + dt (M Ybar_i + N Z_i + source_i), Y_N = terminal.

    With implicit=True the driver sees Y_i itself: (I - dt M) Y_i = Ybar_i + dt (N Z_i + source_i).
    """
    n = (terminal.shape[1] if terminal is not None else np.asarray(source[0]).shape[-1])
    M, N_ = _matrices(tree, M, n), _matrices(tree, N, n)
    src = _levels(tree, source, n)
    Y = [None] * (tree.N + 1)
    Z, Ybar = [None] * tree.N, [None] * tree.N
    Y[tree.N] = np.zeros((tree.size(tree.N), n)) if terminal is None else np.asarray(terminal, dtype=float)
    if Y[tree.N].shape != (tree.size(tree.N), n):
        raise ShapeError(f"terminal has shape {Y[tree.N].shape}, expected {(tree.size(tree.N), n)}")

    dt = tree.dt
    for i in reversed(range(tree.N)):
        Ybar[i] = tree.cond_mean(Y[i + 1])
        Z[i] = tree.cond_dw(Y[i + 1])
        rest = mv(N_[i], Z[i]) + src[i]
        if implicit:
            lhs = np.eye(n) - dt * M[i]
            smin = np.linalg.svd(lhs, compute_uv=False)[:, -1]
            j = int(np.argmin(smin))
            if smin[j] <= SINGULAR_TOL:
                raise StepSizeError(
                    f"I - dt*M is singular at node (level {i}, path '{tree.path(i, j)}'); increase N to shrink dt"
                )
            Y[i] = np.linalg.solve(lhs, (Ybar[i] + dt * rest)[..., None])[..., 0]
        else:
            Y[i] = Ybar[i] + dt * (mv(M[i], Ybar[i]) + rest)
    return BsdePath(Y=tuple(Y), Z=tuple(Z), Ybar=tuple(Ybar))


# -------------------------
# mean-field BSDE
# -------------------------
def sigma_norm(tree: ScenarioTree, Y: Sequence[np.ndarray], Z: Sequence[np.ndarray], sigma: float) -> float:
    times = tree.grid.times
    total = 0.0
    for i in range(tree.N):
        w = tree.dt * np.exp(sigma * times[i])
        total += w * (float(np.mean(np.sum(Y[i] ** 2, axis=1))) + float(np.mean(np.sum(Z[i] ** 2, axis=1))))
    return float(np.sqrt(total))


def default_sigma(field: CoefficientField) -> float:
    K = max(spectral_norm(np.concatenate(getattr(field, k))) for k in ("A", "C", "A1", "C1"))
    return float(min(32 * K**2 + 4 * K + 2, SIGMA_CAP / field.tree.grid.T))


def _mean_term(field: CoefficientField, Ybar: np.ndarray, Z: np.ndarray, i: int) -> np.ndarray:
    return (mv(tr(field.A1[i]), Ybar) + mv(tr(field.C1[i]), Z)).mean(axis=0)


def solve_meanfield_bsde(
    field: CoefficientField,
    source=None,
    terminal: np.ndarray | None = None,
    max_iter: int = 200,
    tol: float = 1e-13,
    sigma: float | None = None,
    method: str = "picard",
) -> BsdePath:
    """Y_i = Ybar + dt (A'Ybar + C'Z + E[A1'Ybar + C1'Z] + source).

    `picard` freezes the mean-field term and iterates linear solves until two
    iterates agree in the sigma-weighted norm; `sweep` evaluates the level mean
    on the fly, which the explicit step allows.
    """
    tree, n = field.tree, field.n
    src = _levels(tree, source, n)
    terminal = np.zeros((tree.size(tree.N), n)) if terminal is None else np.asarray(terminal, dtype=float)
    AT = tuple(tr(a) for a in field.A)
    CT = tuple(tr(c) for c in field.C)

    if method == "sweep":
        dt = tree.dt
        Y = [None] * (tree.N + 1)
        Z, Ybar = [None] * tree.N, [None] * tree.N
        Y[tree.N] = terminal
        for i in reversed(range(tree.N)):
            Ybar[i] = tree.cond_mean(Y[i + 1])
            Z[i] = tree.cond_dw(Y[i + 1])
            mu = _mean_term(field, Ybar[i], Z[i], i)
            Y[i] = Ybar[i] + dt * (mv(AT[i], Ybar[i]) + mv(CT[i], Z[i]) + src[i] + mu)
        return BsdePath(Y=tuple(Y), Z=tuple(Z), Ybar=tuple(Ybar))
    if method != "picard":
        raise ConfigError(f"unknown mean-field BSDE method '{method}'")

    def linear(mu: np.ndarray) -> BsdePath:
        return solve_linear_bsde(tree, AT, CT, tuple(s + mu[i] for i, s in enumerate(src)), terminal)

    path = linear(np.zeros((tree.N, n)))
    if not (any(np.any(a) for a in field.A1) or any(np.any(c) for c in field.C1)):
        return path

    sigma = default_sigma(field) if sigma is None else float(sigma)
    ratios: list[float] = []
    prev_diff: float | None = None
    for it in range(2, max_iter + 1):
        mu = np.array([_mean_term(field, path.Ybar[i], path.Z[i], i) for i in range(tree.N)])
        new = linear(mu)
        diff = sigma_norm(tree, [a - b for a, b in zip(new.Y, path.Y)], [a - b for a, b in zip(new.Z, path.Z)], sigma)
        if prev_diff:
            ratios.append(diff / prev_diff)
            log.debug("picard iteration %d: diff %.3e, contraction ratio %.4f", it, diff, ratios[-1])
        prev_diff = diff
        path = new
        if diff <= tol * (1.0 + sigma_norm(tree, new.Y, new.Z, sigma)):
            return BsdePath(Y=new.Y, Z=new.Z, Ybar=new.Ybar, iterations=it, ratios=tuple(ratios))
    raise ConvergenceError(
        f"Picard iteration did not converge in {max_iter} iterations",
        iterations=max_iter,
        last_ratio=ratios[-1] if ratios else None,
    )


# -------------------------
# coupled linear FBSDE, one sparse solve over all node unknowns
# -------------------------
VARIABLES = ("X", "Ybar", "Z")
EQUATIONS = ("drift", "diffusion", "driver")


@dataclass(frozen=True, eq=False)
class MeanFieldTerm:
    """Adds outer(node) E_level[inner(node) variable(node)] to one equation."""

    equation: str
    variable: str
    inner: tuple[np.ndarray, ...]
    outer: tuple[np.ndarray, ...] | None = None

    def __post_init__(self):
        if self.equation not in EQUATIONS or self.variable not in VARIABLES:
            raise ConfigError(f"bad mean-field term {self.equation}/{self.variable}")


@dataclass(frozen=True, eq=False)
class FbsdeSystem:
    """Coefficient blocks of a linear FBSDE on the tree.

    Forward:  X' = X + dt(drift . v + a) + dW(diffusion . v + c), X_0 = x0
    Backward: Y_i = Ybar_i + dt(driver . v + f), Y_N = terminal X_N + g
    where v = (X, Ybar, Z) at the parent node.
    """

    tree: ScenarioTree
    n: int
    drift: Mapping[str, tuple[np.ndarray, ...]] = dc_field(default_factory=dict)
    diffusion: Mapping[str, tuple[np.ndarray, ...]] = dc_field(default_factory=dict)
    driver: Mapping[str, tuple[np.ndarray, ...]] = dc_field(default_factory=dict)
    terminal: np.ndarray | None = None
    mean_field: tuple[MeanFieldTerm, ...] = ()

    def block(self, equation: str, variable: str, level: int) -> np.ndarray | None:
        blocks = getattr(self, equation).get(variable)
        return None if blocks is None else blocks[level]


@dataclass(frozen=True, eq=False)
class FbsdeData:
    x0: np.ndarray | None = None
    drift: tuple[np.ndarray, ...] | np.ndarray | None = None
    diffusion: tuple[np.ndarray, ...] | np.ndarray | None = None
    driver: tuple[np.ndarray, ...] | np.ndarray | None = None
    terminal: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class FbsdeSolution:
    X: StatePath
    Y: tuple[np.ndarray, ...]
    Z: tuple[np.ndarray, ...]
    Ybar: tuple[np.ndarray, ...]
    residual: float


class _Layout:
    def __init__(self, tree: ScenarioTree, n: int, n_mean_field: int):
        self.tree, self.n = tree, n
        total = 2 ** (tree.N + 1) - 1
        inner = 2**tree.N - 1
        self.x = 0
        self.y = n * total
        self.z = 2 * n * total
        self.mu = self.z + n * inner
        self.size = self.mu + n * tree.N * n_mean_field

    def node(self, base: int, level: int, j: np.ndarray) -> np.ndarray:
        """Index array (len(j), n) of a node-indexed variable."""
        gid = 2**level - 1 + np.asarray(j)
        return base + gid[:, None] * self.n + np.arange(self.n)[None, :]

    def mean(self, k: int, level: int) -> np.ndarray:
        return self.mu + (k * self.tree.N + level) * self.n + np.arange(self.n)


class _Assembler:
    def __init__(self):
        self.rows: list[np.ndarray] = []
        self.cols: list[np.ndarray] = []
        self.vals: list[np.ndarray] = []

    def add(self, rows: np.ndarray, cols: np.ndarray, blocks: np.ndarray) -> None:
        """rows, cols: (K, n) index arrays; blocks: (K, n, n) or (n, n) or a scalar."""
        K, n = rows.shape
        blocks = np.broadcast_to(np.asarray(blocks, dtype=float) * np.ones((1, 1, 1)), (K, n, cols.shape[1]))
        self.rows.append(np.broadcast_to(rows[:, :, None], blocks.shape).reshape(-1))
        self.cols.append(np.broadcast_to(cols[:, None, :], blocks.shape).reshape(-1))
        self.vals.append(blocks.reshape(-1))

    def matrix(self, size: int) -> sp.csc_matrix:
        return sp.coo_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))), shape=(size, size)
        ).tocsc()


class CoupledFbsdeSolver:
    """Factorizes the discrete system once; `solve` then handles any data."""

    def __init__(self, system: FbsdeSystem):
        self.system = system
        self.tree = system.tree
        self.layout = _Layout(system.tree, system.n, len(system.mean_field))
        self.matrix = self._assemble()
        try:
            self._lu = splu(self.matrix)
        except RuntimeError as exc:
            raise self._singular(f"FBSDE system is singular: {exc}") from exc
        log.debug("fbsde: factorized %d unknowns, %d nonzeros", self.layout.size, self.matrix.nnz)

    def _singular(self, message: str) -> FbsdeSingularError:
        size = self.layout.size
        rank = None
        if size <= DENSE_RANK_LIMIT:
            rank = int(np.linalg.matrix_rank(self.matrix.toarray()))
        return FbsdeSingularError(message, rows=size, cols=size, rank=rank)

    def _assemble(self) -> sp.csc_matrix:
        tree, n, lay, sys_ = self.tree, self.system.n, self.layout, self.system
        dt, s = tree.dt, tree.sqrt_dt
        eye = np.eye(n)
        asm = _Assembler()

        # X_0 = x0
        root = lay.node(lay.x, 0, np.arange(1))
        asm.add(root, root, eye)

        for i in range(tree.N):
            K = tree.size(i)
            parents = np.arange(K)
            children = np.arange(2 * K)
            up, down = 2 * parents, 2 * parents + 1
            dw = tree.increments(i)[:, None, None]
            P = tree.expand

            # forward Euler rows, one per child
            rx = lay.node(lay.x, i + 1, children)
            asm.add(rx, rx, eye)
            cx = lay.node(lay.x, i, children // 2)
            step = np.broadcast_to(eye, (2 * K, n, n)).copy()
            for eq, scale in (("drift", dt), ("diffusion", dw)):
                bx = sys_.block(eq, "X", i)
                if bx is not None:
                    step = step + scale * P(bx)
            asm.add(rx, cx, -step)
            for var in ("Ybar", "Z"):
                coeff = 0.0
                for eq, scale in (("drift", dt), ("diffusion", dw)):
                    b = sys_.block(eq, var, i)
                    if b is not None:
                        coeff = coeff + scale * P(b)
                if np.isscalar(coeff):
                    continue
                if var == "Z":
                    asm.add(rx, lay.node(lay.z, i, children // 2), -coeff)
                else:
                    parent_of = children // 2
                    asm.add(rx, lay.node(lay.y, i + 1, 2 * parent_of), -0.5 * coeff)
                    asm.add(rx, lay.node(lay.y, i + 1, 2 * parent_of + 1), -0.5 * coeff)

            # backward rows, one per parent
            ry = lay.node(lay.y, i, parents)
            asm.add(ry, ry, eye)
            my = sys_.block("driver", "Ybar", i)
            half = 0.5 * (eye + (dt * my if my is not None else 0.0))
            asm.add(ry, lay.node(lay.y, i + 1, up), -half)
            asm.add(ry, lay.node(lay.y, i + 1, down), -half)
            mx = sys_.block("driver", "X", i)
            if mx is not None:
                asm.add(ry, lay.node(lay.x, i, parents), -dt * mx)
            mz = sys_.block("driver", "Z", i)
            if mz is not None:
                asm.add(ry, lay.node(lay.z, i, parents), -dt * mz)

            # Z rows: Z = (Y_up - Y_down) / (2 sqrt(dt))
            rz = lay.node(lay.z, i, parents)
            asm.add(rz, rz, eye)
            asm.add(rz, lay.node(lay.y, i + 1, up), -eye / (2 * s))
            asm.add(rz, lay.node(lay.y, i + 1, down), eye / (2 * s))

            # mean-field auxiliaries
            for k, term in enumerate(sys_.mean_field):
                mu = lay.mean(k, i)[None, :]
                asm.add(mu, mu, eye)
                w = -tree.prob(i) * term.inner[i]
                if term.variable == "X":
                    asm.add(np.repeat(mu, K, 0), lay.node(lay.x, i, parents), w)
                elif term.variable == "Z":
                    asm.add(np.repeat(mu, K, 0), lay.node(lay.z, i, parents), w)
                else:
                    asm.add(np.repeat(mu, K, 0), lay.node(lay.y, i + 1, up), 0.5 * w)
                    asm.add(np.repeat(mu, K, 0), lay.node(lay.y, i + 1, down), 0.5 * w)
                outer = term.outer[i] if term.outer is not None else np.broadcast_to(eye, (K, n, n))
                mu_rows = np.repeat(mu, K, 0)
                if term.equation == "driver":
                    asm.add(ry, mu_rows, -dt * outer)
                else:
                    scale = dt if term.equation == "drift" else dw
                    asm.add(rx, np.repeat(mu, 2 * K, 0), -scale * tree.expand(outer))

        # terminal rows: Y_N - Gamma X_N = g
        leaves = np.arange(tree.size(tree.N))
        rt = lay.node(lay.y, tree.N, leaves)
        asm.add(rt, rt, eye)
        if sys_.terminal is not None:
            asm.add(rt, lay.node(lay.x, tree.N, leaves), -np.asarray(sys_.terminal))
        return asm.matrix(lay.size)

    def rhs(self, data: FbsdeData) -> np.ndarray:
        tree, n, lay = self.tree, self.system.n, self.layout
        b = np.zeros(lay.size)
        x0 = np.zeros(n) if data.x0 is None else np.asarray(data.x0, dtype=float).reshape(n)
        b[lay.node(lay.x, 0, np.arange(1))[0]] = x0
        a = _levels(tree, data.drift, n)
        c = _levels(tree, data.diffusion, n)
        f = _levels(tree, data.driver, n)
        for i in range(tree.N):
            K = tree.size(i)
            dw = tree.increments(i)[:, None]
            b[lay.node(lay.x, i + 1, np.arange(2 * K))] = tree.dt * tree.expand(a[i]) + dw * tree.expand(c[i])
            b[lay.node(lay.y, i, np.arange(K))] = tree.dt * f[i]
        if data.terminal is not None:
            b[lay.node(lay.y, tree.N, np.arange(tree.size(tree.N)))] = np.asarray(data.terminal, dtype=float)
        return b

    def solve(self, data: FbsdeData) -> FbsdeSolution:
        tree, n, lay = self.tree, self.system.n, self.layout
        b = self.rhs(data)
        sol = self._lu.solve(b)
        defect = float(np.max(np.abs(self.matrix @ sol - b), initial=0.0))
        residual = defect / (1.0 + float(np.max(np.abs(b), initial=0.0)))
        if not np.isfinite(residual) or residual > FBSDE_RESIDUAL_TOL:
            raise self._singular(f"FBSDE solve left residual {residual:.3g}; system is (numerically) singular")

        def levels(base: int, count: int) -> tuple[np.ndarray, ...]:
            return tuple(sol[lay.node(base, i, np.arange(tree.size(i)))] for i in range(count))

        X = list(levels(lay.x, tree.N + 1))
        Y = list(levels(lay.y, tree.N + 1))
        Z = list(levels(lay.z, tree.N))
        # boundary rows hold exactly, not to solver rounding
        X[0] = b[lay.node(lay.x, 0, np.arange(1))]
        leaf = b[lay.node(lay.y, tree.N, np.arange(tree.size(tree.N)))]
        if self.system.terminal is not None:
            gamma = np.asarray(self.system.terminal, dtype=float)
            gamma = np.broadcast_to(gamma, (tree.size(tree.N), n, n))
            leaf = leaf + mv(gamma, X[tree.N])
        Y[tree.N] = leaf
        Z[tree.N - 1] = tree.cond_dw(Y[tree.N])
        X, Y, Z = tuple(X), tuple(Y), tuple(Z)
        Ybar = tuple(tree.cond_mean(Y[i + 1]) for i in range(tree.N))
        return FbsdeSolution(X=StatePath(X), Y=Y, Z=Z, Ybar=Ybar, residual=residual)


def solve_coupled_fbsde(system: FbsdeSystem, data: FbsdeData) -> FbsdeSolution:
    return CoupledFbsdeSolver(system).solve(data)
