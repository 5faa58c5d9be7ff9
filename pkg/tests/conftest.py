import numpy as np
import pytest

from psgdetect.dsp import preprocess_record
from psgdetect.synth import SynthSpec, generate


def small_records(n, seed0=0, seconds=600.0):
    """Short preprocessed synthetic nights for fast pipeline tests."""
    out = []
    for i in range(n):
        rec = generate(SynthSpec(seed=seed0 + i, duration_s=seconds, ar_rate=60, lm_rate=90))
        out.append(preprocess_record(rec.channels, rec.events, f"s{seed0 + i:03d}"))
    return out


@pytest.fixture(scope="session")
def tiny_cohort():
    return small_records(3, 0), small_records(2, 100)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# -- acceptance reporting -----------------------------------------------------------------
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def report(capsys):
    """Record (and echo) one PASS/FAIL line for an acceptance criterion."""

    def _report(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
