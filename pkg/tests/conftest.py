import os

import pytest
from hypothesis import HealthCheck, settings

from hetkr import synth
from hetkr.pipeline import prepare

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=500)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def small_data():
    data = synth.generate(synth.SynthConfig(seed=4, n_subjects=30, n_names=4, n_train=40, n_test=20))
    return prepare(data.corpus, data.questions)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance():
    """Records one PASS/FAIL line per acceptance criterion and returns the verdict."""

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2} {title}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
