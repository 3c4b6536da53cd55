from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from services.errors import AssumptionError, ConfigError, DefinitenessError
from services.model import CoefficientField, ProblemSpec, ScenarioTree
from services.tree_sde import Feedback
from services.utils import eigmin, sym, tr

log = logging.getLogger(__name__)

SCHEMES = ("explicit", "discrete")
DEFINITENESS_TOL = 1e-12
PSD_WARN_TOL = -1e-10


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    Sigma: tuple[np.ndarray, ...]  # levels 0..N
    Psi: tuple[np.ndarray, ...]  # levels 0..N-1
    Sigma_bar: tuple[np.ndarray, ...]  # E[Sigma_{i+1} | node], levels 0..N-1
    min_gap: float
    scheme: str
    warnings: tuple[str, ...] = ()

    @property
    def sigma0(self) -> np.ndarray:
        return self.Sigma[0][0]

    @property
    def max_norm_psi(self) -> float:
        return max((float(np.max(np.linalg.norm(p, ord=2, axis=(1, 2)))) for p in self.Psi), default=0.0)


def _check_gap(W: np.ndarray, level: int, tree: ScenarioTree) -> float:
    gaps = eigmin(W)
    j = int(np.argmin(gaps))
    if gaps[j] <= DEFINITENESS_TOL:
        raise DefinitenessError(
            f"gain matrix not positive definite at node (level {level}, path '{tree.path(level, j)}'), eigmin {gaps[j]:.3g}",
            node=(level, j),
            eigmin=float(gaps[j]),
        )
    return float(gaps[j])


def _explicit_step(field: CoefficientField, i: int, S: np.ndarray, Psi: np.ndarray):
    A, B, C, D, Q, R = (getattr(field, k)[i] for k in ("A", "B", "C", "D", "Q", "R"))
    W = tr(D) @ S @ D + R
    gap = _check_gap(W, i, field.tree)
    H = S @ B + Psi @ D + tr(C) @ S @ D
    F = S @ A + tr(A) @ S + Psi @ C + tr(C) @ Psi + tr(C) @ S @ C + Q - H @ np.linalg.solve(W, tr(H))
    return S + field.dt * F, gap


def _discrete_step(field: CoefficientField, i: int, S: np.ndarray, Psi: np.ndarray):
    A, B, C, D, Q, R = (getattr(field, k)[i] for k in ("A", "B", "C", "D", "Q", "R"))
    dt = field.dt
    F = np.eye(field.n) + dt * A
    Gam = R + tr(D) @ S @ D + dt * (tr(B) @ S @ B + tr(B) @ Psi @ D + tr(D) @ Psi @ B)
    gap = _check_gap(Gam, i, field.tree)
    Lam = tr(B) @ S @ F + dt * tr(B) @ Psi @ C + tr(D) @ Psi @ F + tr(D) @ S @ C
    out = (
        dt * Q
        + tr(F) @ S @ F
        + dt * (tr(F) @ Psi @ C + tr(C) @ Psi @ F)
        + dt * tr(C) @ S @ C
        - dt * tr(Lam) @ np.linalg.solve(Gam, Lam)
    )
    return out, gap


def solve_riccati_tree(field: CoefficientField, scheme: str = "explicit") -> RiccatiSolution:
    """Backward sweep for (Sigma, Psi) on the tree.

    `explicit` steps the continuous driver at S = E[Sigma_{i+1} | node];
    `discrete` is the dynamic-programming recursion of the tree problem.
    """
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown Riccati scheme '{scheme}'", field="riccati_scheme")
    tree = field.tree
    step = _explicit_step if scheme == "explicit" else _discrete_step

    Sigma: list[np.ndarray] = [None] * (tree.N + 1)  # type: ignore[list-item]
    Psi: list[np.ndarray] = [None] * tree.N  # type: ignore[list-item]
    Sbar: list[np.ndarray] = [None] * tree.N  # type: ignore[list-item]
    Sigma[tree.N] = field.G.copy()
    min_gap = np.inf
    warnings: list[str] = []
    for i in reversed(range(tree.N)):
        Sbar[i] = tree.cond_mean(Sigma[i + 1])
        Psi[i] = tree.cond_dw(Sigma[i + 1])
        new, gap = step(field, i, Sbar[i], Psi[i])
        min_gap = min(min_gap, gap)
        Sigma[i] = sym(new)

        e = eigmin(Sigma[i])
        j = int(np.argmin(e))
        if e[j] < PSD_WARN_TOL:
            msg = f"Sigma not PSD at node (level {i}, path '{tree.path(i, j)}'): eigmin {e[j]:.3g}"
            log.warning(msg)
            warnings.append(msg)

    log.debug("riccati (%s): Sigma(0)=%s, min gap %.6g", scheme, Sigma[0][0].tolist(), min_gap)
    return RiccatiSolution(
        Sigma=tuple(Sigma),
        Psi=tuple(Psi),
        Sigma_bar=tuple(Sbar),
        min_gap=float(min_gap),
        scheme=scheme,
        warnings=tuple(warnings),
    )


# -------------------------
# deterministic ODE backend
# -------------------------
@dataclass(frozen=True, eq=False)
class RiccatiPath:
    times: np.ndarray
    Sigma: np.ndarray  # (N + 1, n, n)
    min_gap: float

    @property
    def sigma0(self) -> np.ndarray:
        return self.Sigma[0]


def solve_riccati_ode(spec: ProblemSpec, rtol: float = 1e-12, atol: float = 1e-14) -> RiccatiPath:
    """Integrate the Riccati ODE (Psi = 0) backward from Sigma(T) = G."""
    if not spec.deterministic:
        raise AssumptionError("the ODE backend needs deterministic coefficients")
    n = spec.dims.n
    w0 = np.zeros(1)

    def coef(name: str, t: float) -> np.ndarray:
        return np.asarray(spec.rule(name)(t, w0))[0]

    gaps: list[float] = []

    def rhs(t: float, y: np.ndarray) -> np.ndarray:
        S = y.reshape(n, n)
        A, B, C, D, Q, R = (coef(k, t) for k in ("A", "B", "C", "D", "Q", "R"))
        W = D.T @ S @ D + R
        gap = float(np.linalg.eigvalsh(sym(W))[0])
        if gap <= DEFINITENESS_TOL:
            raise DefinitenessError(f"D'SD + R lost definiteness at t={t:.6g} (eigmin {gap:.3g})", eigmin=gap)
        gaps.append(gap)
        H = S @ B + C.T @ S @ D
        F = S @ A + A.T @ S + C.T @ S @ C + Q - H @ np.linalg.solve(W, H.T)
        return -F.reshape(-1)

    times = spec.grid.times
    G = np.asarray(spec.rule("G")(spec.grid.T, w0))[0]
    sol = solve_ivp(
        rhs,
        (float(times[-1]), 0.0),
        G.reshape(-1),
        method="DOP853",
        t_eval=times[::-1],
        rtol=rtol,
        atol=atol,
    )
    if not sol.success:
        raise DefinitenessError(f"Riccati ODE integration failed: {sol.message}")
    Sigma = sol.y.T[::-1].reshape(len(times), n, n)
    Sigma[-1] = G
    return RiccatiPath(times=times, Sigma=sym(Sigma), min_gap=min(gaps, default=float("nan")))


# -------------------------
# feedback coefficients
# -------------------------
@dataclass(frozen=True, eq=False)
class HatCoefficients:
    """Closed-loop matrices per level; state side A..D1, adjoint side M, N, Q."""

    tree: ScenarioTree
    A: tuple[np.ndarray, ...]
    A1: tuple[np.ndarray, ...]
    B: tuple[np.ndarray, ...]
    B1: tuple[np.ndarray, ...]
    C: tuple[np.ndarray, ...]
    C1: tuple[np.ndarray, ...]
    D: tuple[np.ndarray, ...]
    D1: tuple[np.ndarray, ...]
    M: tuple[np.ndarray, ...]
    N: tuple[np.ndarray, ...]
    Q: tuple[np.ndarray, ...]
    K: tuple[np.ndarray, ...]
    K_alpha: tuple[np.ndarray, ...]
    K_phi: tuple[np.ndarray, ...]
    K_psi: tuple[np.ndarray, ...]

    @property
    def n(self) -> int:
        return self.A[0].shape[1]


def _continuous_gains(field: CoefficientField, i: int, S: np.ndarray, Psi: np.ndarray):
    """Gain data of the continuous-time feedback, frozen at (S, Psi)."""
    A1, B, C, C1, D, R = (getattr(field, k)[i] for k in ("A1", "B", "C", "C1", "D", "R"))
    W = R + tr(D) @ S @ D
    Lam = tr(B) @ S + tr(D) @ Psi + tr(D) @ S @ C
    L_alpha = tr(D) @ S @ C1
    Q_base = tr(C) @ S @ C1 + Psi @ C1 + S @ A1
    return W, Lam, L_alpha, Q_base


def _discrete_gains(field: CoefficientField, i: int, S: np.ndarray, Psi: np.ndarray):
    """Gain data of the one-step tree problem, matching `_discrete_step`."""
    A, A1, B, C, C1, D, R = (getattr(field, k)[i] for k in ("A", "A1", "B", "C", "C1", "D", "R"))
    dt = field.dt
    F = np.eye(field.n) + dt * A
    Gam = R + tr(D) @ S @ D + dt * (tr(B) @ S @ B + tr(B) @ Psi @ D + tr(D) @ Psi @ B)
    Lam = tr(B) @ S @ F + dt * tr(B) @ Psi @ C + tr(D) @ Psi @ F + tr(D) @ S @ C
    L_alpha = dt * (tr(B) @ S @ A1 + tr(B) @ Psi @ C1 + tr(D) @ Psi @ A1) + tr(D) @ S @ C1
    Q_base = tr(F) @ S @ A1 + tr(F) @ Psi @ C1 + dt * tr(C) @ Psi @ A1 + tr(C) @ S @ C1
    return Gam, Lam, L_alpha, Q_base


def hat_coefficients(field: CoefficientField, ric: RiccatiSolution) -> HatCoefficients:
    """Closed-loop coefficients for the scheme that produced `ric`.

    With gain matrix W, Lam and L_alpha the feedback is u = K X + K_alpha alpha
    + K_phi phi + K_psi psi, K = -W^-1 Lam, K_alpha = -W^-1 L_alpha,
    K_phi = -W^-1 B', K_psi = -W^-1 D'. For `explicit` these are the
    continuous formulas, W = D'SD + R and Lam = B'S + D'Psi + D'SC.
    """
    if ric.scheme not in SCHEMES:
        raise ConfigError(f"unknown Riccati scheme '{ric.scheme}'", field="riccati_scheme")
    gains = _continuous_gains if ric.scheme == "explicit" else _discrete_gains
    tree = field.tree
    out: dict[str, list[np.ndarray]] = {k: [] for k in HatCoefficients.__dataclass_fields__ if k != "tree"}
    for i in range(tree.N):
        A, A1, B, C, C1, D = (getattr(field, k)[i] for k in ("A", "A1", "B", "C", "C1", "D"))
        W, Lam, L_alpha, Q_base = gains(field, i, ric.Sigma_bar[i], ric.Psi[i])
        _check_gap(W, i, tree)

        K = -np.linalg.solve(W, Lam)
        K_alpha = -np.linalg.solve(W, L_alpha)
        K_phi = -np.linalg.solve(W, tr(B))
        K_psi = -np.linalg.solve(W, tr(D))

        out["K"].append(K)
        out["K_alpha"].append(K_alpha)
        out["K_phi"].append(K_phi)
        out["K_psi"].append(K_psi)
        out["A"].append(A + B @ K)
        out["A1"].append(A1 + B @ K_alpha)
        out["B"].append(B @ K_phi)
        out["B1"].append(B @ K_psi)
        out["C"].append(C + D @ K)
        out["C1"].append(C1 + D @ K_alpha)
        out["D"].append(D @ K_phi)
        out["D1"].append(D @ K_psi)
        out["M"].append(tr(A) + tr(Lam) @ K_phi)
        out["N"].append(tr(C) + tr(Lam) @ K_psi)
        out["Q"].append(Q_base + tr(Lam) @ K_alpha)
    return HatCoefficients(tree=tree, **{k: tuple(v) for k, v in out.items()})


def classical_feedback(field: CoefficientField, ric: RiccatiSolution) -> Feedback:
    """Riccati-only feedback u = K X, the optimal law without mean-field terms."""
    hat = hat_coefficients(field, ric)
    return Feedback(gain=hat.K, offset=field.tree.zeros(field.m))


@dataclass(frozen=True)
class DefinitenessReport:
    min_gap: float
    min_gap_node: tuple[int, int]
    min_eig_sigma: float
    max_norm_psi: float

    def to_dict(self) -> dict:
        return {
            "min_gap": self.min_gap,
            "min_gap_node": list(self.min_gap_node),
            "min_eig_sigma": self.min_eig_sigma,
            "max_norm_psi": self.max_norm_psi,
        }


def check_definiteness(field: CoefficientField, ric: RiccatiSolution) -> DefinitenessReport:
    """Smallest eigenvalue of D' Sigma D + R over the nodes, plus Sigma and Psi bounds."""
    best, node = np.inf, (0, 0)
    for i in range(field.N):
        D, R = field.D[i], field.R[i]
        gaps = eigmin(tr(D) @ ric.Sigma[i] @ D + R)
        j = int(np.argmin(gaps))
        if gaps[j] < best:
            best, node = float(gaps[j]), (i, j)
    min_sigma = min(float(np.min(eigmin(s))) for s in ric.Sigma)
    return DefinitenessReport(min_gap=best, min_gap_node=node, min_eig_sigma=min_sigma, max_norm_psi=ric.max_norm_psi)
