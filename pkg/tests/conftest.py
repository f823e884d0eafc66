import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_spd(rng, n, floor=0.5):
    A = rng.standard_normal((n, n))
    return A @ A.T / n + floor * np.eye(n)


def problem_stats(name, rng, M=6, Q=2, L=2, gamma=False):
    """Random statistics suitable for problem ``name``."""
    from dasf.signals import StatisticsSet

    R = random_spd(rng, M)
    kw = {}
    if name in ("mmse", "ridge"):
        kw = {"R_yd": rng.standard_normal((M, Q)), "R_dd": np.eye(Q)}
    elif name == "lcmv":
        kw = {"B": rng.standard_normal((M, L)), "A": rng.standard_normal((Q, L))}
    elif name in ("gevd", "tro"):
        kw = {"R_vv": random_spd(rng, M)}
    elif name == "cca":
        Z = rng.standard_normal((M, M)) / M
        R_vv = random_spd(rng, M)
        kw = {"R_vv": R_vv, "R_yv": 0.5 * Z}
        # keep the joint covariance positive definite
        J = np.block([[R, kw["R_yv"]], [kw["R_yv"].T, R_vv]])
        assert np.linalg.eigvalsh(J).min() > 0
    if gamma:
        kw["Gamma"] = random_spd(rng, M)
    return StatisticsSet(R_yy=R, **kw)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict = {}


def record_criterion(n: int, passed: bool, detail: str):
    line = f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
