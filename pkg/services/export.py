from __future__ import annotations

import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from services.bsde import BsdePath
from services.model import CoefficientField
from services.operators import DiscreteOperator, OperatorBundle
from services.riccati import RiccatiSolution
from services.stationarity import SolveReport, summarize
from services.tree_sde import CostBreakdown, OpenLoop, ParticleEstimate, StatePath
from services.verify import CorpusReport, VerificationReport

log = logging.getLogger(__name__)

NODE_DUMP_LIMIT = 8  # full node-indexed data only for N <= 8
TIMESTAMP_KEY = "generated_at"


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, (np.floating, float)):
        f = float(value)
        return f if np.isfinite(f) else None
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, Path):
        return str(value)
    return value


def dumps(payload: dict[str, Any], timestamp: bool = True) -> str:
    """Stable JSON: sorted keys, lists for arrays, non-finite floats as null."""
    doc = _plain(payload)
    if timestamp:
        doc[TIMESTAMP_KEY] = datetime.now(timezone.utc).isoformat()
    return json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_json(path: Path, payload: dict[str, Any], timestamp: bool = True) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(payload, timestamp), encoding="utf-8")
    log.info("wrote %s", path)
    return path


def write_csv(path: Path, frame: pd.DataFrame) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g")
    log.info("wrote %s", path)
    return path


def _components(prefix: str, values: np.ndarray) -> dict[str, np.ndarray]:
    values = np.asarray(values, dtype=float)
    return {f"{prefix}_{k}": values[:, k] for k in range(values.shape[1])}


def _node_levels(levels) -> list[list]:
    return [np.asarray(v).tolist() for v in levels]


# -------------------------
# paths and costs
# -------------------------
def path_frame(field: CoefficientField, path: StatePath, cost: CostBreakdown | None = None) -> pd.DataFrame:
    """One row per grid time: t, EX components and the accumulated running cost."""
    frame = pd.DataFrame({"t": field.tree.grid.times, **_components("EX", path.mean)})
    frame["second_moment"] = path.second_moment()
    if cost is not None and cost.by_level:
        frame["running_cost"] = np.concatenate([[0.0], np.cumsum(cost.by_level)])
    return frame


def path_payload(field: CoefficientField, path: StatePath, u: OpenLoop | None = None) -> dict[str, Any]:
    out: dict[str, Any] = {"times": field.tree.grid.times, "mean": path.mean}
    if field.N <= NODE_DUMP_LIMIT:
        out["X"] = _node_levels(path.X)
        if u is not None:
            out["u"] = _node_levels(u.values)
    return out


def riccati_frame(ric: RiccatiSolution) -> pd.DataFrame:
    """(level, node, vec Sigma, vec Psi); Psi is empty on the leaves."""
    rows = []
    for i, S in enumerate(ric.Sigma):
        n = S.shape[-1]
        for j in range(S.shape[0]):
            row: dict[str, Any] = {"level": i, "node": j}
            row.update({f"Sigma_{a}{b}": S[j, a, b] for a in range(n) for b in range(n)})
            if i < len(ric.Psi):
                row.update({f"Psi_{a}{b}": ric.Psi[i][j, a, b] for a in range(n) for b in range(n)})
            rows.append(row)
    return pd.DataFrame(rows)


def bsde_frame(path: BsdePath) -> pd.DataFrame:
    rows = []
    for i, Y in enumerate(path.Y):
        for j in range(Y.shape[0]):
            row: dict[str, Any] = {"level": i, "node": j}
            row.update({f"Y_{k}": Y[j, k] for k in range(Y.shape[1])})
            if i < len(path.Z):
                row.update({f"Z_{k}": path.Z[i][j, k] for k in range(Y.shape[1])})
            rows.append(row)
    return pd.DataFrame(rows)


# -------------------------
# operators
# -------------------------
def operator_frame(op: DiscreteOperator) -> pd.DataFrame:
    return pd.DataFrame(op.matrix)


def operator_sidecar(op: DiscreteOperator, instance: str) -> dict[str, Any]:
    grid = op.grid
    return {
        "operator": op.label,
        "instance": instance,
        "shape": list(op.matrix.shape),
        "n": op.n,
        "grid": {"T": grid.T, "N": grid.N, "dt": grid.dt},
        "layout": "cell-major, n components per cell",
        "built_from": "impulse responses of the closed-loop feedback system",
    }


def write_operators(out_dir: Path, bundle: OperatorBundle, instance: str) -> list[Path]:
    written = []
    for op in (bundle.P, bundle.L1, bundle.L2):
        stem = op.kind.lower()
        written.append(write_csv(out_dir / f"{stem}.csv", operator_frame(op)))
        written.append(write_json(out_dir / f"{stem}.json", operator_sidecar(op, instance), timestamp=False))
    written.append(write_csv(out_dir / "p_xi.csv", pd.DataFrame(_components("P_xi", bundle.P_xi))))
    return written


# -------------------------
# solve reports
# -------------------------
def report_payload(report: SolveReport) -> dict[str, Any]:
    t = report.multipliers
    out = summarize(report)
    out.update(
        cost=report.J_star.as_dict(),
        xi=report.xi,
        multipliers={"alpha": t.alpha, "lambda": t.lam, "beta": t.beta},
        kkt={"rows": t.info.rows, "cols": t.info.cols, "rank": t.info.rank, "nullity": t.info.nullity},
        mean_path=report.mean_path,
        riccati={"scheme": report.riccati.scheme, "sigma0": report.riccati.sigma0, "min_gap": report.riccati.min_gap},
    )
    if report.assumptions is not None:
        out["assumptions"] = report.assumptions.to_dict()
    if report.field.N <= NODE_DUMP_LIMIT:
        out["gains"] = {"K": _node_levels(report.u_star.gain), "offset": _node_levels(report.u_star.offset)}
        out["control"] = _node_levels(report.control.values)
    return out


def summary_frame(report: SolveReport) -> pd.DataFrame:
    """t, alpha*, lambda*, beta*, EX* per grid time; multipliers are empty at T."""
    field = report.field
    t = report.multipliers

    def padded(values: np.ndarray) -> np.ndarray:
        return np.vstack([values, np.full((1, values.shape[1]), np.nan)])

    frame = pd.DataFrame(
        {
            "t": field.tree.grid.times,
            **_components("alpha", padded(t.alpha)),
            **_components("lambda", padded(t.lam)),
            **_components("beta", padded(t.beta)),
            **_components("EX", report.mean_path),
        }
    )
    frame["running_cost"] = np.concatenate([[0.0], np.cumsum(report.J_star.by_level)])
    frame["J_total"] = report.J_star.total
    return frame


def write_solve(out_dir: Path, report: SolveReport) -> list[Path]:
    return [
        write_json(out_dir / "solve_report.json", report_payload(report)),
        write_csv(out_dir / "solve_summary.csv", summary_frame(report)),
        write_csv(out_dir / "riccati.csv", riccati_frame(report.riccati)),
        write_csv(out_dir / "state_path.csv", path_frame(report.field, report.X_star, report.J_star)),
    ]


# -------------------------
# verification
# -------------------------
def verification_payload(report: VerificationReport) -> dict[str, Any]:
    return {
        "name": report.name,
        "N": report.N,
        "dt": report.dt,
        "J_star": report.J_star,
        "J_oracle": report.J_oracle,
        "passed": report.passed,
        "failed": report.failed,
        "checks": [c.to_dict() for c in report.checks],
        "details": report.details,
    }


def corpus_frame(corpus: CorpusReport) -> pd.DataFrame:
    return pd.DataFrame(corpus.rows())


def write_verification(out_dir: Path, report: VerificationReport) -> Path:
    return write_json(out_dir / f"verify_{report.name}.json", verification_payload(report))


def write_corpus(out_dir: Path, corpus: CorpusReport) -> list[Path]:
    written = [write_verification(out_dir, r) for r in corpus.reports]
    written.append(write_csv(out_dir / "corpus_summary.csv", corpus_frame(corpus)))
    return written


# -------------------------
# particles
# -------------------------
def particle_frame(est: ParticleEstimate) -> pd.DataFrame:
    frame = pd.DataFrame({"t": est.times, **_components("EX", est.mean), **_components("stderr", est.std_error)})
    frame["second_moment"] = est.second_moment
    return frame


def particle_payload(est: ParticleEstimate) -> dict[str, Any]:
    return {
        "n_particles": est.n_particles,
        "seed": est.seed,
        "control_energy": est.control_energy,
        "sup_second_moment": est.sup_second_moment,
        "moment_ratio": est.moment_ratio,
    }
