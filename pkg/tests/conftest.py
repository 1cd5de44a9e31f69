import pytest

ACCEPTANCE = {}
CRITERIA = {
    1: "polynomial reproduction",
    2: "oracle equivalence",
    3: "eigen recovery",
    4: "FVE exactness",
    5: "noise variance recovery",
    6: "covariate-slice covariance (Table 1 analogue)",
    7: "MISE comparison (Table 2 analogue)",
    8: "empirical convergence rates",
    9: "invariant suite",
}


@pytest.fixture
def acceptance():
    """Record one acceptance criterion outcome: ``acceptance(number, passed, detail)``."""

    def record(number, passed, detail):
        ACCEPTANCE[number] = (bool(passed), detail)
        line = f"criterion {number} ({CRITERIA[number]}): {'PASS' if passed else 'FAIL'} | {detail}"
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name in CRITERIA.items():
        if number in ACCEPTANCE:
            passed, detail = ACCEPTANCE[number]
            terminalreporter.write_line(f"criterion {number} ({name}): {'PASS' if passed else 'FAIL'} | {detail}")
        else:
            terminalreporter.write_line(f"criterion {number} ({name}): NOT RUN")
