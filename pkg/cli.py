from __future__ import annotations

import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import click

from services import export
from services.errors import ConfigError, MfslqError
from services.instances import CANONICAL, load_instance
from services.model import ProblemSpec
from services.settings import Settings, load_settings
from services.stationarity import solve_mfslq
from services.tree_sde import OpenLoop, moment_ratio, propagate_state, simulate_mfsde_particles
from services.verify import field_for, run_corpus, verify_instance

log = logging.getLogger(__name__)

COMMANDS = ("solve", "verify", "simulate", "operators", "corpus")
DEFAULT_PARTICLES = 10_000


@dataclass(frozen=True)
class RunConfig:
    command: str
    instance: Path | None = None
    out: Path | None = None
    seed: int | None = None
    steps: int | None = None
    particles: int | None = None
    tol: float | None = None
    workers: int = 1

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command '{self.command}', expected one of {', '.join(COMMANDS)}", field="command")


def _configure_logging(settings: Settings) -> None:
    logging.basicConfig(
        level=getattr(logging, settings.log_level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _load(config: RunConfig) -> ProblemSpec:
    spec = load_instance(config.instance or CANONICAL)
    if config.steps is not None:
        if config.steps < 1:
            raise ConfigError("steps must be positive", field="steps")
        spec = spec.with_steps(config.steps)
    return spec


def _solve(config: RunConfig, settings: Settings, out: Path) -> int:
    spec = _load(config)
    report = solve_mfslq(spec, settings)
    export.write_solve(out, report)
    log.info("J* = %.12g, KKT rank %d of %d", report.J_star.total, report.kkt_rank[2], report.kkt_rank[1])
    return 0


def _verify(config: RunConfig, settings: Settings, out: Path) -> int:
    spec = _load(config)
    report = verify_instance(spec, seed=settings.seed, settings=settings)
    export.write_verification(out, report)
    return 0 if report.passed else 1


def _simulate(config: RunConfig, settings: Settings, out: Path) -> int:
    """Particle estimate of the uncontrolled state next to the exact tree mean."""
    spec = _load(config)
    est = simulate_mfsde_particles(
        spec,
        n_particles=config.particles or DEFAULT_PARTICLES,
        n_steps=spec.grid.N,
        seed=settings.seed,
    )
    field = field_for(spec, settings.max_levels)
    u = OpenLoop.zeros(field.tree, field.m)
    path = propagate_state(field, u, spec.xi)
    payload = export.particle_payload(est)
    payload.update(
        tree=export.path_payload(field, path),
        tree_moment_ratio=moment_ratio(field, path, u),
        max_mean_gap=float(abs(est.mean - path.mean).max()),
    )
    export.write_csv(out / "particles.csv", export.particle_frame(est))
    export.write_csv(out / "tree_path.csv", export.path_frame(field, path))
    export.write_json(out / "particles.json", payload)
    return 0


def _operators(config: RunConfig, settings: Settings, out: Path) -> int:
    spec = _load(config)
    report = solve_mfslq(spec, settings)
    export.write_operators(out, report.operators, spec.name)
    return 0


def _corpus(config: RunConfig, settings: Settings, out: Path) -> int:
    corpus = run_corpus(seed=settings.seed, settings=settings, workers=config.workers)
    export.write_corpus(out, corpus)
    return 0 if corpus.passed else 1


_HANDLERS = {
    "solve": _solve,
    "verify": _verify,
    "simulate": _simulate,
    "operators": _operators,
    "corpus": _corpus,
}


def run(config: RunConfig, settings: Settings | None = None) -> int:
    """Run one command; 0 on success, 1 on a failed check or stage, 2 on bad input."""
    settings = settings or load_settings()
    if config.seed is not None:
        settings = replace(settings, seed=int(config.seed))
    if config.tol is not None:
        settings = replace(settings, tol=float(config.tol))
    _configure_logging(settings)

    name = config.instance.stem if config.instance else ("corpus" if config.command == "corpus" else CANONICAL)
    out = config.out or settings.output_dir / name
    try:
        status = _HANDLERS[config.command](config, settings, out)
    except ConfigError as exc:
        log.error("%s", exc)
        return 2
    except MfslqError as exc:
        log.error("%s failed: %s", config.command, exc)
        return 1
    log.info("%s finished with status %d; artifacts in %s", config.command, status, out)
    return status


# -------------------------
# click surface
# -------------------------
def _options(func):
    func = click.option("--tol", type=float, default=None, help="KKT / consistency tolerance.")(func)
    func = click.option("--particles", type=int, default=None, help="Particle count for simulate.")(func)
    func = click.option("--steps", type=int, default=None, help="Override the number of time steps N.")(func)
    func = click.option("--seed", type=int, default=None, help="Seed for every randomized step.")(func)
    func = click.option("--out", type=click.Path(path_type=Path), default=None, help="Output directory.")(func)
    func = click.option(
        "--instance", type=click.Path(path_type=Path), default=None, help="Instance JSON (or a bundled name)."
    )(func)
    return func


def _invoke(command: str, **params) -> None:
    sys.exit(run(RunConfig(command, **params)))


@click.group("mfslq")
def cli() -> None:
    """Mean-field SLQ solver and verification suite."""


@cli.command("solve")
@_options
def solve_command(**params):
    """Solve an instance; writes the report JSON, summary CSV, Riccati CSV and state path."""
    _invoke("solve", **params)


@cli.command("verify")
@_options
def verify_command(**params):
    """Run every verification check; exits 1 if any fails."""
    _invoke("verify", **params)


@cli.command("simulate")
@_options
def simulate_command(**params):
    """Particle simulation of the state equation with the exact tree mean alongside."""
    _invoke("simulate", **params)


@cli.command("operators")
@_options
def operators_command(**params):
    """Dump the P, L1 and L2 matrices with JSON sidecars."""
    _invoke("operators", **params)


@cli.command("corpus")
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Output directory.")
@click.option("--seed", type=int, default=None, help="Seed for every randomized step.")
@click.option("--tol", type=float, default=None, help="KKT / consistency tolerance.")
@click.option("--workers", type=int, default=1, show_default=True, help="Instances verified in parallel.")
def corpus_command(**params):
    """Run the acceptance corpus; one report per instance plus a CSV summary."""
    _invoke("corpus", **params)


if __name__ == "__main__":
    cli()
