from __future__ import annotations

import os

os.environ.setdefault("DATABASE_URL", "sqlite://")
os.environ.setdefault("SECRET_KEY", "test")

import pytest

from services.model import build_tree, evaluate_coefficients, make_spec
from services.settings import load_settings
from services.stationarity import solve_mfslq

INSTANCE_1 = dict(
    T=1.0, N=4, xi=[1.0], delta=1.0,
    A=0.1, A1=0.05, B=1.0, C=0.2, C1=0.1, D=0.5, Q=1.0, Q1=0.5, R=1.0, G=1.0,
)


def instance_1(**overrides):
    params = dict(INSTANCE_1, name="instance-1")
    params.update(overrides)
    return make_spec(1, 1, **params)


def field_of(spec):
    return evaluate_coefficients(spec, build_tree(spec.grid))


@pytest.fixture(scope="session")
def settings():
    return load_settings(dotenv=False)


@pytest.fixture
def spec():
    return instance_1()


@pytest.fixture
def field(spec):
    return field_of(spec)


@pytest.fixture(scope="session")
def report(settings):
    return solve_mfslq(instance_1(), settings)
