"""Shared fixtures: scenario runs are expensive, so they are cached per session."""

from __future__ import annotations

import functools
import math

import numpy as np

import pytest

from scipy.optimize import brentq

from swbathy.bench_cli import load_scenario, run_scenario
from swbathy.core_model import GRAVITY, evaluate_bed
from swbathy.forward_solver import run_forward
from swbathy.surface_lab import extract_snapshot


@functools.lru_cache(maxsize=None)
def scenario_record(ident: str, nx: int | None = None, seed: int = 0):
    overrides = {} if nx is None else {"nx": nx}
    return run_scenario(ident, overrides, None, seed)


@functools.lru_cache(maxsize=None)
def forward_case(ident: str, nx: int | None = None):
    """``(cfg, report, snapshot)`` for a scenario at resolution ``nx``."""
    cfg = load_scenario(ident, nx)
    rep = run_forward(cfg)
    snap = extract_snapshot(rep.history, cfg.t_star, rep.bed, cfg.boundary, cfg.grid)
    return cfg, rep, snap


STEADY_BEDS = {"bump": {"kind": "bump"}, "sech": {"kind": "sech", "amplitude": 0.2, "length": 25.0}}


def bernoulli_cell_averages(bed_spec, n, q=4.42, h_out=2.0, sub=40):
    """Exact subcritical steady surface (cell averages) with h(25) = h_out."""
    b_out = evaluate_bed(bed_spec, np.array([25.0]))[0]
    head = q * q / (2 * GRAVITY * h_out ** 2) + h_out + b_out
    xf = np.linspace(0, 25, n * sub + 1)
    xm = 0.5 * (xf[1:] + xf[:-1])
    bm = evaluate_bed(bed_spec, xm)
    hm = np.array([brentq(lambda h: h + q * q / (2 * GRAVITY * h * h) + bb - head, 1.0, 3.0) for bb in bm])
    return (hm + bm).reshape(n, sub).mean(axis=1)


@functools.lru_cache(maxsize=None)
def steady_orders(bed: str):
    """Observed L2(zeta) order of the Test 1 run against the exact steady state, N = 100, 200, 400."""
    spec = STEADY_BEDS[bed]
    base = load_scenario("test-1").with_overrides(bed=spec)
    errs = []
    for n in (100, 200, 400):
        z = run_forward(base.with_overrides(n_cells=n), record="ends").final().zeta
        errs.append(math.sqrt(np.sum((z - bernoulli_cell_averages(spec, n)) ** 2) * 25.0 / n))
    return math.log(errs[0] / errs[-1]) / math.log(4.0), errs


@pytest.fixture(scope="session")
def record():
    return scenario_record


@pytest.fixture(scope="session")
def forward():
    return forward_case


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
