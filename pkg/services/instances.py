from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any

import numpy as np

from services.errors import ConfigError, ShapeError
from services.model import (
    COEFFICIENT_NAMES,
    PATH_RULES,
    Dimensions,
    ProblemSpec,
    TimeGrid,
    TimePolynomial,
    constant,
    path_rule,
)
from services.utils import as_matrix, safe_float, safe_int

log = logging.getLogger(__name__)

DATA_DIR = Path(__file__).resolve().parents[1] / "data" / "instances"
CANONICAL = "instance_1"


def _matrix(value: Any, shape: tuple[int, int], where: str) -> np.ndarray:
    try:
        out = as_matrix(value, shape)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"not a number or matrix ({exc})", field=where) from exc
    if out.shape != shape:
        raise ConfigError(f"shape {out.shape}, expected {shape}", field=where)
    return out


def parse_coefficient(name: str, entry: Any, dims: Dimensions):
    """Number, nested list, {"poly": [...]}, {"rule": "constant", "value": ...} or a path rule."""
    where = f"coefficients.{name}"
    shape = dims.shape(name)
    if not isinstance(entry, dict):
        return constant(_matrix(entry, shape, where), shape)

    if "poly" in entry:
        coeffs = entry["poly"]
        if not isinstance(coeffs, list) or not coeffs:
            raise ConfigError("poly needs a non-empty list of matrices", field=f"{where}.poly")
        return TimePolynomial(tuple(_matrix(c, shape, f"{where}.poly[{k}]") for k, c in enumerate(coeffs)))

    kind = entry.get("rule")
    if kind == "constant":
        if "value" not in entry:
            raise ConfigError("constant rule needs 'value'", field=where)
        return constant(_matrix(entry["value"], shape, f"{where}.value"), shape)
    if kind == "poly":
        return parse_coefficient(name, {"poly": entry.get("coeffs")}, dims)
    if kind in PATH_RULES:
        base = _matrix(entry.get("base", 0.0), shape, f"{where}.base")
        scale = _matrix(entry.get("scale", 0.0), shape, f"{where}.scale")
        return path_rule(kind, base, scale, shape)
    raise ConfigError(
        f"unknown rule '{kind}', expected constant, poly or one of {', '.join(PATH_RULES)}", field=f"{where}.rule"
    )


def parse_instance(doc: dict, name: str | None = None) -> ProblemSpec:
    """Validate an instance document and build the ProblemSpec."""
    if not isinstance(doc, dict):
        raise ConfigError("instance must be a JSON object")

    dims_doc = doc.get("dimensions") or {}
    n, m = safe_int(dims_doc.get("n")), safe_int(dims_doc.get("m"))
    if n is None or n < 1:
        raise ConfigError("n must be a positive integer", field="dimensions.n")
    if m is None or m < 1:
        raise ConfigError("m must be a positive integer", field="dimensions.m")
    dims = Dimensions(n, m)

    grid_doc = doc.get("grid") or {}
    if "points" in grid_doc:
        try:
            grid = TimeGrid.from_points(grid_doc["points"])
        except (ShapeError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc), field="grid.points") from exc
    else:
        T, N = safe_float(grid_doc.get("T", 1.0)), safe_int(grid_doc.get("N"))
        if T is None or not T > 0:
            raise ConfigError("T must be a positive number", field="grid.T")
        if N is None or N < 1:
            raise ConfigError("N must be a positive integer", field="grid.N")
        grid = TimeGrid(T, N)

    coeff_doc = doc.get("coefficients")
    if not isinstance(coeff_doc, dict):
        raise ConfigError("coefficients must be an object", field="coefficients")
    for key in ("A", "B", "C", "D", "Q", "R", "G"):
        if key not in coeff_doc:
            raise ConfigError(f"missing required coefficient {key}", field=f"coefficients.{key}")
    unknown = sorted(set(coeff_doc) - set(COEFFICIENT_NAMES) - {"G"})
    if unknown:
        raise ConfigError(f"unknown coefficient {unknown[0]}", field=f"coefficients.{unknown[0]}")
    rules = {key: parse_coefficient(key, entry, dims) for key, entry in coeff_doc.items()}

    delta = doc.get("delta")
    if delta is not None:
        delta = safe_float(delta)
        if delta is None or not delta > 0:
            raise ConfigError("delta must be a positive number", field="delta")

    try:
        return ProblemSpec(
            dims=dims,
            grid=grid,
            coefficients=rules,
            xi=doc.get("xi", np.zeros(n)),
            delta=delta,
            name=str(doc.get("name") or name or "instance"),
        )
    except (ShapeError, ValueError) as exc:
        raise ConfigError(str(exc), field="xi") from exc


def loads_instance(text: str, name: str | None = None) -> ProblemSpec:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", line=exc.lineno) from exc
    return parse_instance(doc, name)


def load_instance(path: str | Path) -> ProblemSpec:
    path = Path(path)
    if not path.exists():
        candidate = DATA_DIR / f"{path.name}.json"
        if not candidate.exists():
            raise ConfigError(f"instance file not found: {path}")
        path = candidate
    spec = loads_instance(path.read_text(encoding="utf-8"), name=path.stem)
    log.info("loaded instance %s from %s (n=%d, m=%d, N=%d)", spec.name, path, spec.dims.n, spec.dims.m, spec.grid.N)
    return spec


def list_bundled() -> list[str]:
    if not DATA_DIR.exists():
        return []
    return sorted(p.stem for p in DATA_DIR.glob("*.json"))
