import json
from pathlib import Path

import pytest

from app import create_app

CANONICAL_FILE = Path(__file__).resolve().parents[1] / "data" / "instances" / "instance_1.json"


@pytest.fixture
def client():
    app = create_app({"SQLALCHEMY_DATABASE_URI": "sqlite://", "TESTING": True})
    with app.test_client() as c:
        yield c


@pytest.fixture
def instance_doc():
    return json.loads(CANONICAL_FILE.read_text(encoding="utf-8"))


def test_healthz(client):
    r = client.get("/healthz")
    assert r.status_code == 200
    assert r.get_json()["ok"] is True


def test_solve_stores_a_run(client, instance_doc):
    r = client.post("/solve", json=instance_doc)
    assert r.status_code == 200
    body = r.get_json()
    assert body["name"] == "instance-1"
    assert body["run_id"] == 1
    assert "generated_at" not in body

    runs = client.get("/runs").get_json()["runs"]
    assert len(runs) == 1
    assert runs[0]["status"] == "ok" and runs[0]["J_star"] == pytest.approx(body["J_star"])

    detail = client.get("/runs/1").get_json()
    assert detail["document"] == instance_doc
    assert detail["report"]["J_star"] == pytest.approx(body["J_star"])


def test_body_must_be_an_object(client):
    r = client.post("/solve", data="[1, 2]", content_type="application/json")
    assert r.status_code == 400
    assert r.get_json()["error"] == "ConfigError"


def test_bad_document_is_rejected(client, instance_doc):
    del instance_doc["coefficients"]["R"]
    r = client.post("/solve", json=instance_doc)
    assert r.status_code == 400
    assert r.get_json()["field"] == "coefficients.R"
    assert client.get("/runs").get_json()["runs"][0]["status"] == "rejected"


def test_failed_stage_is_unprocessable(client, instance_doc):
    instance_doc["delta"] = 2.0
    r = client.post("/solve", json=instance_doc)
    assert r.status_code == 422
    body = r.get_json()
    assert body["error"] == "AssumptionError"
    assert body["stage"] == "assumptions"
    assert client.get("/runs").get_json()["runs"][0]["status"] == "failed"


def test_verify_endpoint(client, instance_doc):
    r = client.post("/verify", json=instance_doc)
    assert r.status_code == 200
    body = r.get_json()
    assert body["passed"] is True
    assert any(c["name"] == "oracle_cost_gap" for c in body["checks"])


def test_missing_run_is_404(client):
    assert client.get("/runs/99").status_code == 404
