from __future__ import annotations

import json
from datetime import datetime

from extensions import db


class SolveRun(db.Model):
    """One HTTP-triggered solve or verify run.

    status: ok / failed (a check or stage failed) / rejected (bad input)
    """

    __tablename__ = "solve_runs"

    id = db.Column(db.Integer, primary_key=True)
    command = db.Column(db.String(16), nullable=False)  # solve / verify
    instance_name = db.Column(db.String(255), default="", nullable=False)
    instance_json = db.Column(db.Text, nullable=False)
    report_json = db.Column(db.Text, nullable=False)
    status = db.Column(db.String(16), default="ok", nullable=False)
    created_at = db.Column(db.DateTime, default=datetime.utcnow, nullable=False)

    def report(self) -> dict:
        try:
            return json.loads(self.report_json)
        except Exception:
            return {}

    def to_summary(self) -> dict:
        rep = self.report()
        return {
            "id": self.id,
            "command": self.command,
            "instance": self.instance_name,
            "status": self.status,
            "J_star": rep.get("J_star"),
            "created_at": self.created_at.isoformat(),
        }
