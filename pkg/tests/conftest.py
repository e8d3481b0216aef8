import pytest

from saluda.data import make_frames, simulate_split
from saluda.lidar_sim import source_lidar, target_lidar


@pytest.fixture(scope="session")
def tiny_source():
    return make_frames(simulate_split(4, source_lidar(azimuth_steps=24, noise_sigma=0.02), 0, "source", "src"))


@pytest.fixture(scope="session")
def tiny_target():
    clouds = simulate_split(4, target_lidar(azimuth_steps=24, noise_sigma=0.02), 0, "target", "tgt")
    return make_frames(clouds)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """``acceptance(n, ok, detail)`` records one PASS/FAIL line for the summary."""

    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
