import numpy as np
import pytest

from longseg import synth
from longseg.volume import log_transform


@pytest.fixture(scope="session")
def small_series():
    """A 16^3 three-scan atrophy series with a small lesion, its truth and atlas."""
    spec = synth.SubjectSpec(dims=(16, 16, 16), mode="linear_atrophy", times=[0.0, 1.0, 2.0],
                             rates={"wm": -0.03}, lesion_schedule=[20], anatomy_jitter=0.03, seed=21)
    scans, truth = synth.generate_subject(spec)
    return [log_transform(s) for s in scans], truth, synth.reference_atlas(spec.dims)


def assert_monotone(trace, rtol=1e-8):
    trace = np.asarray(trace, float)
    drops = trace[:-1] - trace[1:]
    allowed = rtol * np.abs(trace[:-1])
    assert np.all(drops <= allowed), f"objective decreased by {np.max(drops - allowed)}"


# acceptance bookkeeping: one line per criterion in the terminal summary
ACCEPTANCE = {}


def record(number, title, ok, detail):
    ACCEPTANCE[number] = (title, ok, detail)
    print(f"[{number:02d}] {title}: {'PASS' if ok else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{number:02d}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
