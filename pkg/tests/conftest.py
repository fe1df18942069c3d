import time
from contextlib import contextmanager
from functools import lru_cache

import numpy as np
import pytest
import scipy.sparse as sp

from fleetsense.grid import GridSpec
from fleetsense.pipeline import prepare_scenario
from fleetsense.synth import generate_scenario, get_preset
from fleetsense.visits import VisitModel


def flat_grid(n_cells: int, n_days: int = 1) -> GridSpec:
    """One-row grid with a single daily interval, so flat cell index == column."""
    return GridSpec(23.0, 113.0, 500.0, 1, n_cells, time_interval_minutes=1440, n_days=n_days)


def model_from_q(q, cost=None, ids=None) -> VisitModel:
    q = np.atleast_2d(np.asarray(q, dtype=float))
    V, C = q.shape
    ids = tuple(ids) if ids is not None else tuple(f"veh{i:04d}" for i in range(V))
    totals = q.sum(axis=1, keepdims=True)
    pi = np.divide(q, totals, out=np.zeros_like(q), where=totals > 0)
    cost = np.ones(V) if cost is None else np.asarray(cost, dtype=float)
    return VisitModel(ids, sp.csr_matrix(q), sp.csr_matrix(pi), cost, flat_grid(C), totals.ravel() == 0)


def random_q(rng, n_vehicles, n_cells, density=0.4, ones=0.05):
    q = rng.random((n_vehicles, n_cells))
    q[rng.random(q.shape) > density] = 0.0
    q[rng.random(q.shape) < ones] = 1.0
    return q


@lru_cache(maxsize=None)
def scenario(preset: str, seed: int):
    return generate_scenario(get_preset(preset, seed=seed))


@lru_cache(maxsize=None)
def prepared(preset: str, seed: int):
    return prepare_scenario(scenario(preset, seed))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_prepared():
    return prepared("desk-small", 3)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


@contextmanager
def criterion(number: int, title: str, limit_s: float | None = None):
    """Record PASS/FAIL for an acceptance criterion, including its runtime budget."""
    notes: dict = {}
    t0 = time.perf_counter()
    try:
        yield notes
        elapsed = time.perf_counter() - t0
        if limit_s is not None:
            assert elapsed < limit_s, f"took {elapsed:.1f}s, limit {limit_s:.0f}s"
    except BaseException as exc:
        elapsed = time.perf_counter() - t0
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        line = f"criterion {number:>2} FAIL  {title} [{elapsed:.1f}s] {msg}"
        ACCEPTANCE.append(line)
        print(line)
        raise
    detail = " ".join(f"{k}={v}" for k, v in notes.items())
    line = f"criterion {number:>2} PASS  {title} [{elapsed:.1f}s] {detail}".rstrip()
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
