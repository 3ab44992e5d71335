"""Shared fixtures plus the acceptance-criteria terminal summary."""
import pytest

from stepselect import fit_monotone, load_education

# (index, name, passed, detail) tuples collected by tests/test_acceptance.py.
_ACCEPTANCE_LINES = []


def record_acceptance(index: int, name: str, passed: bool, detail: str) -> None:
    """Register one acceptance-criterion outcome for the end-of-run summary."""
    _ACCEPTANCE_LINES.append((index, name, bool(passed), detail))


@pytest.fixture(scope="session")
def education():
    """The bundled 10-study example dataset."""
    return load_education()


@pytest.fixture(scope="session")
def education_fit(education):
    """Default-settings monotone fit of the bundled data, computed once."""
    return fit_monotone(education)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for index, name, passed, detail in sorted(_ACCEPTANCE_LINES):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {index} [{status}] {name}: {detail}")
