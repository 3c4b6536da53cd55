import json

import numpy as np
import pytest

from conftest import field_of, instance_1
from services.errors import ConfigError
from services.instances import CANONICAL, list_bundled, load_instance, loads_instance, parse_instance
from services.model import PathRule, TimePolynomial
from services.stationarity import solve_mfslq


def doc(**overrides):
    base = {
        "name": "doc",
        "dimensions": {"n": 1, "m": 1},
        "grid": {"T": 1.0, "N": 4},
        "xi": [1.0],
        "coefficients": {"A": 0.1, "B": 1.0, "C": 0.2, "D": 0.5, "Q": 1.0, "R": 1.0, "G": 1.0},
    }
    base.update(overrides)
    return base


def with_coefficients(**coefficients):
    d = doc()
    d["coefficients"] = {**d["coefficients"], **coefficients}
    return d


def test_bundled_instances_are_listed():
    assert list_bundled() == ["instance_1", "instance_1_random", "no_meanfield", "two_state", "zero_cost"]


@pytest.mark.parametrize("name", ["instance_1", "instance_1_random", "no_meanfield", "two_state", "zero_cost"])
def test_bundled_instances_load(name):
    spec = load_instance(name)
    assert spec.grid.N == 4
    field_of(spec)


def test_canonical_file_matches_the_fixture(field):
    spec = load_instance(CANONICAL)
    assert spec.name == "instance-1"
    assert spec.delta == 1.0
    loaded = field_of(spec)
    for key in ("A", "A1", "B", "C", "C1", "D", "Q", "Q1", "R"):
        for a, b in zip(getattr(loaded, key), getattr(field, key)):
            np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(loaded.G, field.G)


def test_random_bundle_uses_path_rules():
    spec = load_instance("instance_1_random")
    assert isinstance(spec.rule("A"), PathRule)
    assert not spec.deterministic


def test_poly_and_matrix_entries():
    spec = load_instance("two_state")
    assert isinstance(spec.rule("A1"), TimePolynomial)
    field = field_of(spec)
    np.testing.assert_allclose(field.A[0][0], [[0.1, 0.2], [0.0, -0.1]])
    np.testing.assert_allclose(field.A1[2][0], [[0.075, 0.0], [0.0, 0.05]])
    np.testing.assert_allclose(field.B[0][0], [[1.0], [0.5]])


def test_constant_and_poly_rule_spellings():
    spec = parse_instance(with_coefficients(A={"rule": "constant", "value": 0.3}, Q={"rule": "poly", "coeffs": [1.0, 2.0]}))
    field = field_of(spec)
    np.testing.assert_allclose([a[0, 0, 0] for a in field.A], 0.3)
    np.testing.assert_allclose([q[0, 0, 0] for q in field.Q], [1.0, 1.5, 2.0, 2.5])


def test_name_falls_back_to_the_argument():
    d = doc()
    del d["name"]
    assert parse_instance(d, "from-file").name == "from-file"
    assert parse_instance(d).name == "instance"


def test_missing_xi_is_zero():
    d = doc()
    del d["xi"]
    np.testing.assert_array_equal(parse_instance(d).xi, [0.0])


@pytest.mark.parametrize(
    "document, where",
    [
        (doc(dimensions={"n": 0, "m": 1}), "dimensions.n"),
        (doc(dimensions={"n": 1, "m": "two"}), "dimensions.m"),
        (doc(grid={"T": -1.0, "N": 4}), "grid.T"),
        (doc(grid={"T": 1.0, "N": 2.5}), "grid.N"),
        (doc(grid={"points": [0.0, 0.5, 0.4]}), "grid.points"),
        (doc(delta=-1.0), "delta"),
        (doc(xi=[1.0, 2.0]), "xi"),
        (doc(coefficients=[1.0]), "coefficients"),
        (with_coefficients(B=[[1.0, 2.0]]), "coefficients.B"),
        (with_coefficients(E=1.0), "coefficients.E"),
        (with_coefficients(A={"rule": "cos_w"}), "coefficients.A.rule"),
        (with_coefficients(A={"rule": "constant"}), "coefficients.A"),
        (with_coefficients(A={"poly": []}), "coefficients.A.poly"),
        (with_coefficients(C={"rule": "sign_w", "base": [[1.0, 0.0]]}), "coefficients.C.base"),
    ],
)
def test_bad_documents_name_the_field(document, where):
    with pytest.raises(ConfigError) as exc:
        parse_instance(document)
    assert exc.value.field == where
    assert exc.value.to_dict()["field"] == where


def test_missing_coefficient():
    d = doc()
    del d["coefficients"]["R"]
    with pytest.raises(ConfigError, match="missing required coefficient R"):
        parse_instance(d)


def test_non_uniform_points_parse():
    spec = parse_instance(doc(grid={"points": [0.0, 0.3, 1.0]}))
    assert not spec.grid.is_uniform and spec.grid.N == 2


def test_invalid_json_reports_the_line():
    with pytest.raises(ConfigError, match="invalid JSON") as exc:
        loads_instance('{\n  "name": "x",\n}')
    assert exc.value.line == 3


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_instance(tmp_path / "nope.json")


def test_file_round_trip(tmp_path):
    path = tmp_path / "mine.json"
    d = doc()
    del d["name"]
    path.write_text(json.dumps(d), encoding="utf-8")
    spec = load_instance(path)
    assert spec.name == "mine"
    assert spec.dims.n == 1 and spec.grid.T == 1.0


def test_parsed_instance_solves_like_the_fixture(settings, report):
    parsed = solve_mfslq(load_instance(CANONICAL), settings)
    assert parsed.J_star.total == pytest.approx(report.J_star.total, rel=1e-14)
    assert parsed.name == instance_1().name
