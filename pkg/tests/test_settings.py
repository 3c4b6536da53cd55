from pathlib import Path

from services.settings import DEFAULT_SEED, load_settings


def test_defaults(monkeypatch):
    for key in ("MFSLQ_MAX_LEVELS", "MFSLQ_SEED", "MFSLQ_TOL", "MFSLQ_RICCATI_SCHEME", "MFSLQ_OUTPUT_DIR"):
        monkeypatch.delenv(key, raising=False)
    s = load_settings(dotenv=False)
    assert s.max_levels == 16
    assert s.seed == DEFAULT_SEED
    assert s.tol == 1e-8
    assert s.riccati_scheme == "discrete"
    assert s.output_dir == Path("out")


def test_environment_overrides(monkeypatch):
    monkeypatch.setenv("MFSLQ_MAX_LEVELS", "12")
    monkeypatch.setenv("MFSLQ_SEED", "7")
    monkeypatch.setenv("MFSLQ_TOL", "1e-6")
    monkeypatch.setenv("MFSLQ_RICCATI_SCHEME", " Explicit ")
    monkeypatch.setenv("MFSLQ_LOG_LEVEL", "debug")
    s = load_settings(dotenv=False)
    assert (s.max_levels, s.seed, s.tol) == (12, 7, 1e-6)
    assert s.riccati_scheme == "explicit"
    assert s.log_level == "DEBUG"


def test_bad_values_fall_back(monkeypatch):
    monkeypatch.setenv("MFSLQ_MAX_LEVELS", "lots")
    monkeypatch.setenv("MFSLQ_RICCATI_SCHEME", "implicit")
    s = load_settings(dotenv=False)
    assert s.max_levels == 16
    assert s.riccati_scheme == "discrete"


def test_postgres_url_is_normalized(monkeypatch):
    monkeypatch.setenv("DATABASE_URL", "postgres://u:p@host/db")
    assert load_settings(dotenv=False).database_url == "postgresql://u:p@host/db"
