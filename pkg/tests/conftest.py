"""Shared fixtures, random model generators and the acceptance summary hook."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

import lcm.optimizer as _optimizer
from lcm.data_io import Dataset, simulate
from lcm.model_core import ModelSpec, Params

FIXTURES = Path(__file__).parent / "fixtures"

# every optimizer run in the session, as (start loglik, accepted logliks)
RECORDED_TRACES: list[tuple[float, list[float]]] = []
# criterion number -> (passed, detail)
ACCEPTANCE: dict[int, tuple[bool, str]] = {}

_original_optimize = _optimizer.optimize


def _recording_optimize(objective, psi0, opts):
    run = _original_optimize(objective, psi0, opts)
    RECORDED_TRACES.append((run.loglik_start, [e.loglik for e in run.trace]))
    return run


_optimizer.optimize = _recording_optimize


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)


def random_spec(rng: np.random.Generator, classes=None, n_resp=None, v=None, pairs=True) -> ModelSpec:
    c = int(rng.integers(1, 4)) if classes is None else classes
    t = int(rng.integers(2, 4)) if n_resp is None else n_resp
    cats = [int(rng.integers(2, 4)) for _ in range(t)]
    v = int(rng.integers(0, 3)) if v is None else v
    pair_list = []
    if pairs:
        for a in range(t):
            for b in range(a + 1, t):
                if cats[a] == cats[b] and cats[a] > 2 and rng.random() < 0.5:
                    pair_list.append((a, b))
    return ModelSpec(c, [(f"y{i}", m) for i, m in enumerate(cats)],
                     [f"x{i}" for i in range(v)], pair_list)


def random_params(rng: np.random.Generator, spec: ModelSpec, scale=0.8) -> Params:
    return Params(rng.normal(0, scale, spec.k), rng.normal(0, scale, (spec.classes, spec.g)))


def random_data(rng: np.random.Generator, spec: ModelSpec, params: Params, n=40) -> Dataset:
    return simulate(spec, params, "normal", n, seed=int(rng.integers(2**32)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_model(rng):
    spec = ModelSpec(2, [("a", 3), ("b", 3), ("c", 2)], ["x1"], [(0, 1)])
    params = random_params(rng, spec)
    data = random_data(rng, spec, params, 60)
    return spec, params, data
