from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from dotenv import load_dotenv

from services.utils import safe_float, safe_int

DEFAULT_SEED = 20240601
RICCATI_SCHEMES = ("discrete", "explicit")


@dataclass(frozen=True)
class Settings:
    max_levels: int = 16
    seed: int = DEFAULT_SEED
    tol: float = 1e-8
    rcond: float = 1e-10
    riccati_scheme: str = "discrete"
    log_level: str = "INFO"
    output_dir: Path = Path("out")
    database_url: str = "sqlite:///mfslq.db"
    secret_key: str = "dev-secret"


def _env_int(key: str, default: int) -> int:
    v = safe_int(os.environ.get(key))
    return default if v is None else v


def _env_float(key: str, default: float) -> float:
    v = safe_float(os.environ.get(key))
    return default if v is None else v


def load_settings(dotenv: bool = True) -> Settings:
    """Read settings from the environment (and .env when present)."""
    if dotenv:
        load_dotenv()

    scheme = (os.environ.get("MFSLQ_RICCATI_SCHEME") or "discrete").strip().lower()
    if scheme not in RICCATI_SCHEMES:
        scheme = "discrete"

    db_url = os.environ.get("DATABASE_URL", "sqlite:///mfslq.db")
    if db_url.startswith("postgres://"):
        db_url = db_url.replace("postgres://", "postgresql://", 1)

    return Settings(
        max_levels=_env_int("MFSLQ_MAX_LEVELS", 16),
        seed=_env_int("MFSLQ_SEED", DEFAULT_SEED),
        tol=_env_float("MFSLQ_TOL", 1e-8),
        rcond=_env_float("MFSLQ_RCOND", 1e-10),
        riccati_scheme=scheme,
        log_level=(os.environ.get("MFSLQ_LOG_LEVEL") or "INFO").upper(),
        output_dir=Path(os.environ.get("MFSLQ_OUTPUT_DIR", "out")),
        database_url=db_url,
        secret_key=os.environ.get("SECRET_KEY", "dev-secret"),
    )
