import numpy as np
import pandas as pd
import pytest

from aiiw import data
from aiiw.simulate import SimConfig, simulate_trial

FIRST_SUBJECT_CSV = """id,arm,time,outcome
1,UC,0,3.3333333
1,UC,76,2.5
1,UC,162,2.5
1,UC,652,0.6666667
"""

TWO_ARM_CSV = FIRST_SUBJECT_CSV + """157,PA,0,2.1666667
157,PA,88,1.8333333
157,PA,181,1.5
"""

LINEAR_FORMULA = "outcome ~ prev_outcome + scale(time) + scale(delta_time)"


@pytest.fixture
def two_arm_frame():
    return data.ingest_long_table(TWO_ARM_CSV)


def observed_only(frame):
    """Strip terminal rows so the pipeline can add its own."""
    rec = frame.records[frame.records["outcome"].notna()].reset_index(drop=True)
    return data.TrialFrame(rec, frame.covariates, None, frame.max_visits)


@pytest.fixture(scope="session")
def small_trial():
    return simulate_trial(SimConfig(n=30), rep=0)


@pytest.fixture(scope="session")
def small_arm_cp(small_trial):
    treatment, control = data.split_by_arm(small_trial, "PA")
    return data.derive_counting_process(control)


def random_design(rng, n_subjects=8, max_rows=4, p=2):
    """Toy counting-process design with a few strata and ties."""
    from aiiw.intensity import IntensityDesign
    entry, exit_, event, stratum, z = [], [], [], [], []
    for _ in range(n_subjects):
        t = 0.0
        for k in range(1, rng.integers(1, max_rows + 1) + 1):
            dt = float(rng.integers(1, 6))
            entry.append(t)
            exit_.append(t + dt)
            event.append(bool(rng.random() < 0.8))
            stratum.append(min(k, 2))
            z.append(rng.normal(size=p))
            t += dt
    return IntensityDesign(np.array(entry), np.array(exit_), np.array(event), np.array(stratum), np.array(z))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
