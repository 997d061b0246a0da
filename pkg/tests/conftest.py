"""Shared fixtures: exact fields, solved runs and the acceptance ledger printer."""

from __future__ import annotations

import numpy as np
import pytest

from fblab.field import Grid, ScalarField
from fblab.problem import WeightField, half_plane_spec, spec_from_dict, two_plane_spec
from fblab.solver import minimize

CRITERIA: dict = {}

PERTURBATION = {"seed": 3, "lambda_pert": 0.1, "alpha": 0.5}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA, key=_criterion_order):
        ok, detail = CRITERIA[key]
        terminalreporter.write_line(f"{key:<5} {'PASS' if ok else 'FAIL'}  {detail}")


def _criterion_order(key: str):
    order = "WSMGHCD"
    return order.index(key[2]), int(key[3:])


@pytest.fixture
def record():
    """Record a criterion verdict; it is printed in the terminal summary."""
    def rec(key: str, ok: bool, detail: str) -> bool:
        CRITERIA[key] = (bool(ok), detail)
        print(f"{key} {'PASS' if ok else 'FAIL'}: {detail}")
        return ok
    return rec


@pytest.fixture(scope="session")
def grid512():
    return Grid.square(-1.0, 1.0, 512)


@pytest.fixture(scope="session")
def half_plane(grid512):
    return ScalarField.from_function(grid512, lambda p: np.maximum(p[..., 1], 0.0))


@pytest.fixture(scope="session")
def unit_weights(grid512):
    return WeightField.constant(grid512, 1.0)


class Solved:
    def __init__(self, spec, result):
        self.spec = spec
        self.result = result
        self.u = result.u
        self.weights = spec.effective_weights


def _solve(d):
    spec = spec_from_dict(d)
    return Solved(spec, minimize(spec))


@pytest.fixture(scope="session")
def solved_hp():
    return _solve(half_plane_spec(512))


@pytest.fixture(scope="session")
def solved_pert():
    return _solve(half_plane_spec(512, perturbation=PERTURBATION))


@pytest.fixture(scope="session")
def solved_tp():
    return _solve(two_plane_spec(512))
