"""Shared fixtures and the acceptance-criterion summary.

Tests named test_criterion_* (the acceptance gate) get one PASS/FAIL line
each in the terminal summary so the gate is readable at a glance.
"""

import numpy as np
import pytest

import pointvoxel.autodiff as ad

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call" and item.name.startswith("test_criterion_"):
        _CRITERIA[item.name] = report.passed


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=_criterion_order):
        status = "PASS" if _CRITERIA[name] else "FAIL"
        terminalreporter.write_line(f"[{status}] {name}")


def _criterion_order(name):
    digits = "".join(ch for ch in name.split("_")[2] if ch.isdigit())
    return (int(digits) if digits else 99, name)


def finite_difference_check(params, forward, h=1e-5, tol=1e-4):
    """Central-difference gradient check at f64; returns the worst rel. error.

    `forward` must rebuild the scalar loss from the current parameter data;
    `params` are the f64 tensors to check. Errors are measured against the
    largest gradient magnitude across all checked parameters, so directions
    the loss provably ignores (e.g. a bias normalized away by batchnorm)
    compare FD noise against the real gradient scale instead of zero.
    """
    with ad.Tape() as tape:
        loss = forward()
    tape.backward(loss)
    pairs = []
    for p in params:
        assert p.dtype == np.float64, "gradient checks run on the f64 build"
        analytic = p.grad.copy()
        numeric = np.zeros_like(p.data)
        flat, nflat = p.data.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(forward().data)
            flat[i] = orig - h
            down = float(forward().data)
            flat[i] = orig
            nflat[i] = (up - down) / (2 * h)
        pairs.append((p, analytic, numeric))
    scale = max(max(np.abs(a).max(), np.abs(n).max()) for _, a, n in pairs)
    scale = max(scale, 1e-8)
    worst = 0.0
    for p, analytic, numeric in pairs:
        err = float(np.abs(analytic - numeric).max() / scale)
        worst = max(worst, err)
        assert err < tol, f"{p.name or 'param'}: rel. err {err:.2e} >= {tol}"
    return worst


@pytest.fixture
def fd_check():
    return finite_difference_check
