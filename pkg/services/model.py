from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Any, Callable, ClassVar, Mapping, Protocol

import numpy as np

from services.errors import (
    AssumptionError,
    CoefficientShapeError,
    ConfigError,
    ResourceLimitError,
    ShapeError,
    UnsupportedGridError,
)
from services.utils import as_matrix, eigmin

log = logging.getLogger(__name__)

DEFAULT_MAX_LEVELS = 16
PSD_TOL = 1e-10
SYMMETRY_TOL = 1e-12

# node-indexed coefficients sampled on levels 0..N-1; G lives on the leaves
COEFFICIENT_NAMES = ("A", "A1", "B", "C", "C1", "D", "Q", "Q1", "R")
REQUIRED_COEFFICIENTS = ("A", "B", "C", "D", "Q", "R", "G")
OPTIONAL_COEFFICIENTS = ("A1", "C1", "Q1")


@dataclass(frozen=True)
class Dimensions:
    n: int
    m: int

    def __post_init__(self):
        if int(self.n) < 1 or int(self.m) < 1:
            raise ShapeError(f"dimensions must be positive, got n={self.n}, m={self.m}")

    def shape(self, name: str) -> tuple[int, int]:
        n, m = self.n, self.m
        if name in ("B", "D"):
            return (n, m)
        if name == "R":
            return (m, m)
        return (n, n)


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int
    points: tuple[float, ...] | None = None  # set only for non-uniform grids

    def __post_init__(self):
        if not float(self.T) > 0:
            raise ShapeError(f"horizon T must be positive, got {self.T}")
        if int(self.N) < 1:
            raise ShapeError(f"number of steps N must be >= 1, got {self.N}")

    @classmethod
    def from_points(cls, points) -> "TimeGrid":
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 1 or len(pts) < 2 or pts[0] != 0.0 or np.any(np.diff(pts) <= 0):
            raise ShapeError("grid points must start at 0 and increase strictly")
        steps = np.diff(pts)
        uniform = np.allclose(steps, steps[0], rtol=0.0, atol=1e-14)
        return cls(T=float(pts[-1]), N=len(pts) - 1, points=None if uniform else tuple(pts.tolist()))

    @property
    def is_uniform(self) -> bool:
        return self.points is None

    @property
    def dt(self) -> float:
        return float(self.T) / int(self.N)

    @property
    def times(self) -> np.ndarray:
        if self.points is not None:
            return np.asarray(self.points)
        return np.arange(self.N + 1) * self.dt


@dataclass(frozen=True, eq=False)
class ScenarioTree:
    """Non-recombining binary tree on a uniform grid.

    Level i holds 2**i nodes, each with probability 2**-i. The children of
    node j are 2j (dW = +sqrt(dt)) and 2j+1 (dW = -sqrt(dt)). `steps[i]` is
    the signed count of up-moves, so W = steps * sqrt(dt) exactly.
    """

    grid: TimeGrid
    steps: tuple[np.ndarray, ...]

    @property
    def N(self) -> int:
        return self.grid.N

    @property
    def dt(self) -> float:
        return self.grid.dt

    @cached_property
    def sqrt_dt(self) -> float:
        return float(np.sqrt(self.dt))

    @cached_property
    def w(self) -> tuple[np.ndarray, ...]:
        return tuple(k * self.sqrt_dt for k in self.steps)

    @property
    def n_nodes(self) -> int:
        return 2 ** (self.N + 1) - 1

    def size(self, level: int) -> int:
        return 2**level

    def prob(self, level: int) -> float:
        return 0.5**level

    def increments(self, level: int) -> np.ndarray:
        """dW on the edges into level+1, ordered like the children."""
        return np.tile([self.sqrt_dt, -self.sqrt_dt], 2**level)

    def expand(self, values: np.ndarray) -> np.ndarray:
        return np.repeat(values, 2, axis=0)

    def cond_mean(self, child: np.ndarray) -> np.ndarray:
        c = child.reshape((-1, 2) + child.shape[1:])
        return 0.5 * (c[:, 0] + c[:, 1])

    def cond_dw(self, child: np.ndarray) -> np.ndarray:
        """E[value * dW | parent] / dt."""
        c = child.reshape((-1, 2) + child.shape[1:])
        return (c[:, 0] - c[:, 1]) / (2.0 * self.sqrt_dt)

    def mean(self, values: np.ndarray) -> np.ndarray:
        return values.mean(axis=0)

    def broadcast(self, grid_values: np.ndarray) -> tuple[np.ndarray, ...]:
        """Spread a deterministic grid function (one row per level) over the nodes."""
        grid_values = np.asarray(grid_values, dtype=float)
        return tuple(
            np.broadcast_to(grid_values[i], (self.size(i),) + grid_values[i].shape).copy()
            for i in range(len(grid_values))
        )

    def zeros(self, *shape: int, levels: int | None = None) -> tuple[np.ndarray, ...]:
        levels = self.N if levels is None else levels
        return tuple(np.zeros((self.size(i),) + shape) for i in range(levels))

    def path(self, level: int, index: int) -> str:
        if level == 0:
            return "root"
        return format(index, f"0{level}b").replace("0", "+").replace("1", "-")


def build_tree(grid: TimeGrid, *, max_levels: int = DEFAULT_MAX_LEVELS) -> ScenarioTree:
    if not grid.is_uniform:
        raise UnsupportedGridError("scenario trees need a uniform time grid")
    if grid.N > max_levels:
        raise ResourceLimitError(f"N={grid.N} exceeds the tree cap of {max_levels} levels (2^N leaves)")
    steps = [np.zeros(1, dtype=np.int64)]
    for i in range(grid.N):
        steps.append(np.repeat(steps[-1], 2) + np.tile(np.array([1, -1], dtype=np.int64), 2**i))
    return ScenarioTree(grid=grid, steps=tuple(steps))


# -------------------------
# coefficient rules of (t, W(t))
# -------------------------
class CoefficientRule(Protocol):
    random: bool

    def __call__(self, t: float, w: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class Constant:
    value: np.ndarray
    random: ClassVar[bool] = False

    def __call__(self, t: float, w: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.value, (len(w),) + self.value.shape).copy()


@dataclass(frozen=True, eq=False)
class TimePolynomial:
    coeffs: tuple[np.ndarray, ...]
    random: ClassVar[bool] = False

    def __call__(self, t: float, w: np.ndarray) -> np.ndarray:
        value = sum(c * t**k for k, c in enumerate(self.coeffs))
        return np.broadcast_to(value, (len(w),) + value.shape).copy()


_PATH_FUNCTIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "sign_w": np.sign,
    "positive_w": lambda w: (w > 0).astype(float),
    "tanh_w": np.tanh,
}
PATH_RULES = tuple(_PATH_FUNCTIONS)


@dataclass(frozen=True, eq=False)
class PathRule:
    """base + scale * g(W(t)) for one of the builtin g."""

    kind: str
    base: np.ndarray
    scale: np.ndarray
    random: ClassVar[bool] = True

    def __call__(self, t: float, w: np.ndarray) -> np.ndarray:
        g = _PATH_FUNCTIONS[self.kind](np.asarray(w, dtype=float))
        return self.base[None] + g[:, None, None] * self.scale[None]


@dataclass(frozen=True, eq=False)
class FunctionRule:
    """User callable; may return one matrix or one matrix per W value."""

    fn: Callable[[float, np.ndarray], Any]
    random: bool = True

    def __call__(self, t: float, w: np.ndarray) -> np.ndarray:
        out = np.asarray(self.fn(t, w), dtype=float)
        if out.ndim == 2:
            out = np.broadcast_to(out, (len(w),) + out.shape).copy()
        return out


def constant(value: Any, shape: tuple[int, int]) -> Constant:
    return Constant(as_matrix(value, shape))


def path_rule(kind: str, base: Any, scale: Any, shape: tuple[int, int]) -> PathRule:
    if kind not in _PATH_FUNCTIONS:
        raise ConfigError(f"unknown rule '{kind}', expected one of {', '.join(PATH_RULES)}")
    return PathRule(kind=kind, base=as_matrix(base, shape), scale=as_matrix(scale, shape))


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    dims: Dimensions
    grid: TimeGrid
    coefficients: Mapping[str, CoefficientRule]
    xi: np.ndarray
    delta: float | None = None
    name: str = "instance"

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float).reshape(-1)
        if xi.shape != (self.dims.n,):
            raise ShapeError(f"xi has length {xi.size}, expected n={self.dims.n}")
        object.__setattr__(self, "xi", xi)
        for key in REQUIRED_COEFFICIENTS:
            if key not in self.coefficients:
                raise ConfigError(f"missing required coefficient {key}", field=f"coefficients.{key}")
        for key in self.coefficients:
            if key not in COEFFICIENT_NAMES and key != "G":
                raise ConfigError(f"unknown coefficient {key}", field=f"coefficients.{key}")
        if self.delta is not None and not float(self.delta) > 0:
            raise ConfigError("delta must be positive", field="delta")

    @property
    def deterministic(self) -> bool:
        return not any(rule.random for rule in self.coefficients.values())

    def rule(self, name: str) -> CoefficientRule:
        rule = self.coefficients.get(name)
        if rule is None:
            return Constant(np.zeros(self.dims.shape(name)))
        return rule

    def with_steps(self, N: int) -> "ProblemSpec":
        return replace(self, grid=TimeGrid(self.grid.T, int(N)))

    def with_coefficients(self, **rules: Any) -> "ProblemSpec":
        merged = dict(self.coefficients)
        for key, value in rules.items():
            merged[key] = _as_rule(value, self.dims.shape(key))
        return replace(self, coefficients=merged)

    def with_xi(self, xi) -> "ProblemSpec":
        return replace(self, xi=np.asarray(xi, dtype=float))


def _as_rule(value: Any, shape: tuple[int, int]) -> CoefficientRule:
    if callable(value) and not isinstance(value, np.ndarray):
        return value
    return constant(value, shape)


def make_spec(
    n: int,
    m: int,
    *,
    T: float = 1.0,
    N: int = 4,
    xi: Any = None,
    delta: float | None = None,
    name: str = "instance",
    **coefficients: Any,
) -> ProblemSpec:
    """Build a spec from numbers, arrays or rules; missing A1, C1, Q1 stay zero."""
    dims = Dimensions(n, m)
    rules = {k: _as_rule(v, dims.shape(k)) for k, v in coefficients.items()}
    xi = np.zeros(n) if xi is None else xi
    return ProblemSpec(dims=dims, grid=TimeGrid(T, N), coefficients=rules, xi=xi, delta=delta, name=name)


# -------------------------
# coefficient field on the tree
# -------------------------
@dataclass(frozen=True, eq=False)
class CoefficientField:
    tree: ScenarioTree
    dims: Dimensions
    A: tuple[np.ndarray, ...]
    A1: tuple[np.ndarray, ...]
    B: tuple[np.ndarray, ...]
    C: tuple[np.ndarray, ...]
    C1: tuple[np.ndarray, ...]
    D: tuple[np.ndarray, ...]
    Q: tuple[np.ndarray, ...]
    Q1: tuple[np.ndarray, ...]
    R: tuple[np.ndarray, ...]
    G: np.ndarray
    delta: float

    @property
    def N(self) -> int:
        return self.tree.N

    @property
    def dt(self) -> float:
        return self.tree.dt

    @property
    def n(self) -> int:
        return self.dims.n

    @property
    def m(self) -> int:
        return self.dims.m

    @cached_property
    def R_inv(self) -> tuple[np.ndarray, ...]:
        return tuple(np.linalg.inv(r) for r in self.R)

    @cached_property
    def Q1_mean(self) -> tuple[np.ndarray, ...]:
        return tuple(q.mean(axis=0) for q in self.Q1)

    def has_mean_field(self) -> bool:
        return any(np.any(a) for a in self.A1) or any(np.any(c) for c in self.C1) or any(np.any(q) for q in self.Q1)

    def scale(self) -> float:
        """Largest absolute coefficient entry; used to scale tolerances."""
        blocks = [getattr(self, k) for k in COEFFICIENT_NAMES]
        top = max(float(np.max(np.abs(b))) for levels in blocks for b in levels)
        return max(top, float(np.max(np.abs(self.G))))


def _first_bad_node(rule: CoefficientRule, t: float, w: np.ndarray, shape) -> tuple[int, tuple[int, ...]] | None:
    """Evaluate node by node; index and shape of the first node off `shape`."""
    for j in range(len(w)):
        try:
            out = np.asarray(rule(t, w[j : j + 1]), dtype=float)
        except ValueError:
            return j, ()
        if out.shape != (1,) + tuple(shape):
            return j, tuple(out.shape[1:] if out.ndim == 3 else out.shape)
    return None


def _evaluate_rule(rule: CoefficientRule, name: str, t: float, tree: ScenarioTree, level: int, shape) -> np.ndarray:
    w = tree.w[level]
    expected = (tree.size(level),) + tuple(shape)
    try:
        out = np.asarray(rule(t, w), dtype=float)
    except ValueError:
        # ragged: one matrix per node, not all the same shape
        if _first_bad_node(rule, t, w, shape) is None:
            raise
        out = None
    if out is None or out.shape != expected:
        bad = _first_bad_node(rule, t, w, shape)
        if bad is None:
            whole = out.shape[1:] if out.ndim == 3 and out.shape[0] == expected[0] else out.shape
            bad = (0, tuple(whole))
        j, got = bad
        raise CoefficientShapeError(name, (level, tree.path(level, j)), got, tuple(shape))
    return out


def evaluate_coefficients(spec: ProblemSpec, tree: ScenarioTree) -> CoefficientField:
    """Sample every coefficient rule at the left endpoint of each interval."""
    if tree.grid.N != spec.grid.N or tree.grid.T != spec.grid.T:
        raise ShapeError("tree grid does not match the problem grid")
    times = tree.grid.times
    blocks: dict[str, tuple[np.ndarray, ...]] = {}
    for name in COEFFICIENT_NAMES:
        shape = spec.dims.shape(name)
        rule = spec.rule(name)
        blocks[name] = tuple(_evaluate_rule(rule, name, float(times[i]), tree, i, shape) for i in range(tree.N))
    G = _evaluate_rule(spec.rule("G"), "G", float(spec.grid.T), tree, tree.N, spec.dims.shape("G"))

    asym = np.max(np.abs(G - np.swapaxes(G, 1, 2)))
    if asym > SYMMETRY_TOL:
        raise AssumptionError(f"terminal weight G must be symmetric (max asymmetry {asym:.3g})")

    delta = spec.delta
    if delta is None:
        delta = min(float(np.min(eigmin(r))) for r in blocks["R"])
    return CoefficientField(tree=tree, dims=spec.dims, G=G, delta=float(delta), **blocks)


# -------------------------
# assumptions H1-H3
# -------------------------
@dataclass(frozen=True)
class Violation:
    assumption: str
    node: tuple[int, int]
    path: str
    detail: str

    def to_dict(self) -> dict:
        return {"assumption": self.assumption, "level": self.node[0], "index": self.node[1], "path": self.path, "detail": self.detail}


@dataclass(frozen=True)
class AssumptionReport:
    h1_ok: bool
    h2_ok: bool
    h3_ok: bool
    min_eig_R: float
    max_norm_Psi: float
    delta: float
    violations: tuple[Violation, ...] = ()

    def with_psi(self, max_norm_psi: float) -> "AssumptionReport":
        return replace(self, h3_ok=bool(np.isfinite(max_norm_psi)), max_norm_Psi=float(max_norm_psi))

    def to_dict(self) -> dict:
        return {
            "h1_ok": self.h1_ok,
            "h2_ok": self.h2_ok,
            "h3_ok": self.h3_ok,
            "min_eig_R": self.min_eig_R,
            "max_norm_Psi": self.max_norm_Psi,
            "delta": self.delta,
            "violations": [v.to_dict() for v in self.violations],
        }


def validate_assumptions(field: CoefficientField, tol: float = PSD_TOL) -> AssumptionReport:
    tree = field.tree
    out: list[Violation] = []

    def flag(assumption: str, level: int, idx: np.ndarray, detail: Callable[[int], str]) -> None:
        for j in np.flatnonzero(idx):
            out.append(Violation(assumption, (level, int(j)), tree.path(level, int(j)), detail(int(j))))

    levelled = {name: list(enumerate(getattr(field, name))) for name in COEFFICIENT_NAMES}
    levelled["G"] = [(field.N, field.G)]

    finite: dict[str, list[np.ndarray]] = {}
    for name, levels in levelled.items():
        finite[name] = []
        for i, M in levels:
            ok = np.isfinite(M).all(axis=(1, 2))
            flag("H1", i, ~ok, lambda j, name=name: f"{name} has non-finite entries")
            finite[name].append(np.where(ok[:, None, None], M, 0.0))
    h1_ok = not out

    for name in ("Q", "Q1", "G", "R"):
        levels = [i for i, _ in levelled[name]]
        for i, M in zip(levels, finite[name]):
            asym = np.max(np.abs(M - np.swapaxes(M, 1, 2)), axis=(1, 2))
            flag("H2", i, asym > tol, lambda j, name=name, a=asym: f"{name} not symmetric (asymmetry {a[j]:.3g})")
            e = eigmin(M)
            if name == "R":
                flag("H2", i, e < field.delta - tol, lambda j, e=e: f"R eigmin {e[j]:.6g} below delta {field.delta:.6g}")
            else:
                flag("H2", i, e < -tol, lambda j, name=name, e=e: f"{name} eigmin {e[j]:.6g} < 0")

    min_eig_R = min(float(np.min(eigmin(r))) for r in finite["R"])
    h2_ok = not any(v.assumption == "H2" for v in out)
    if out:
        log.warning("assumption check: %d violation(s), first: %s", len(out), out[0].detail)
    return AssumptionReport(
        h1_ok=h1_ok,
        h2_ok=h2_ok,
        h3_ok=True,
        min_eig_R=min_eig_R,
        max_norm_Psi=float("nan"),
        delta=field.delta,
        violations=tuple(out),
    )
