from __future__ import annotations

import json
import os
from datetime import datetime

from flask import Flask, request

from cli import cli
from extensions import db
from models import SolveRun
from services import export
from services.errors import ConfigError, MfslqError
from services.instances import parse_instance
from services.settings import load_settings
from services.stationarity import solve_mfslq
from services.verify import verify_instance

HTTP_BAD_INPUT = 400
HTTP_UNPROCESSABLE = 422


def create_app(overrides: dict | None = None) -> Flask:
    settings = load_settings()
    app = Flask(__name__)
    app.config["SECRET_KEY"] = settings.secret_key
    app.config["SQLALCHEMY_DATABASE_URI"] = settings.database_url
    app.config["SQLALCHEMY_TRACK_MODIFICATIONS"] = False
    app.config["MFSLQ_SETTINGS"] = settings
    app.config.update(overrides or {})

    db.init_app(app)
    with app.app_context():
        db.create_all()

    app.cli.add_command(cli)

    def record(command: str, doc: dict, name: str, payload: dict, status: str) -> SolveRun:
        run = SolveRun(
            command=command,
            instance_name=name,
            instance_json=json.dumps(doc, ensure_ascii=False, sort_keys=True),
            report_json=export.dumps(payload),
            status=status,
        )
        db.session.add(run)
        db.session.commit()
        return run

    def handle(command: str):
        doc = request.get_json(silent=True)
        if not isinstance(doc, dict):
            return {"error": "ConfigError", "message": "request body must be a JSON instance document"}, HTTP_BAD_INPUT
        name = str(doc.get("name") or "instance")
        settings = app.config["MFSLQ_SETTINGS"]
        try:
            spec = parse_instance(doc)
            if command == "solve":
                payload = export.report_payload(solve_mfslq(spec, settings))
                status = "ok"
            else:
                report = verify_instance(spec, seed=settings.seed, settings=settings)
                payload = export.verification_payload(report)
                status = "ok" if report.passed else "failed"
        except ConfigError as exc:
            app.logger.warning("%s rejected: %s", command, exc)
            record(command, doc, name, exc.to_dict(), "rejected")
            return exc.to_dict(), HTTP_BAD_INPUT
        except MfslqError as exc:
            app.logger.error("%s failed: %s", command, exc)
            record(command, doc, name, exc.to_dict(), "failed")
            return exc.to_dict(), HTTP_UNPROCESSABLE
        run = record(command, doc, spec.name, payload, status)
        app.logger.info("%s %s stored as run %d (%s)", command, spec.name, run.id, status)
        return json.loads(export.dumps({**payload, "run_id": run.id}, timestamp=False))

    @app.get("/healthz")
    def healthz():
        return {"ok": True, "ts": datetime.utcnow().isoformat()}

    @app.post("/solve")
    def solve():
        return handle("solve")

    @app.post("/verify")
    def verify():
        return handle("verify")

    @app.get("/runs")
    def runs():
        rows = SolveRun.query.order_by(SolveRun.created_at.desc(), SolveRun.id.desc()).limit(50).all()
        return {"runs": [r.to_summary() for r in rows]}

    @app.get("/runs/<int:run_id>")
    def run_detail(run_id: int):
        r = db.get_or_404(SolveRun, run_id)
        return {**r.to_summary(), "document": json.loads(r.instance_json), "report": r.report()}

    return app


app = create_app()

if __name__ == "__main__":
    app.run(host="0.0.0.0", port=int(os.environ.get("PORT", "5000")))
