import pytest

from rsdso.simulator import SimConfig, generate_twins


@pytest.fixture(scope="session")
def small_twins(tmp_path_factory):
    """A short rolling/global shutter twin pair shared by the unit tests."""
    root = tmp_path_factory.mktemp("twins")
    return generate_twins(SimConfig(frames=24), root)


ACCEPTANCE_LINES = []


def report_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
