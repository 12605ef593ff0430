"""Collects one pass/fail line per acceptance criterion and prints them after the run."""
import pytest

CRITERIA = {
    1: "gradient suite",
    2: "causality and blind spots",
    3: "codec exactness",
    4: "rate fidelity",
    5: "entropy-model calibration",
    6: "MS-SSIM oracle",
    7: "smoke training",
    8: "RD monotonicity",
    9: "convergence (GDN-residual vs ReLU)",
    10: "range-coder fuzz",
}

_results = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records the outcome of acceptance criterion ``n``."""
    def record(n, ok, detail=""):
        _results[n] = (bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        if n in _results:
            ok, detail = _results[n]
            status = "PASS" if ok else "FAIL"
        else:
            status, detail = "NOT RUN", "test errored before reporting or was deselected"
        terminalreporter.write_line(f"[{status}] {n:2d}. {name}: {detail}")
