import io

import numpy as np
import pytest

from survsurrogate.study_data import Arm, StudyData


def make_study(arm_a, arm_b, t0, t, covariate_names=()):
    """StudyData from (time, event, surrogate[, covariates]) tuples per arm."""
    return StudyData(Arm.from_arrays(*arm_a), Arm.from_arrays(*arm_b), t0, t, tuple(covariate_names))


def csv_text(rows, header="group,time,event,s"):
    return io.StringIO(header + "\n" + "\n".join(",".join(map(str, r)) for r in rows) + "\n")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = []


def record(criterion, ok, detail):
    """Register one acceptance-criterion outcome for the terminal summary."""
    ACCEPTANCE.append((criterion, bool(ok), detail))
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {criterion}: {detail}")
