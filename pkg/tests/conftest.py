import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from uniloc.channel import SystemConfig
from uniloc.scene import Box, SceneMap, default_scene

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_scene(buildings=(), region=(0.0, 80.0, 0.0, 80.0), bs=(0.0, -9.0, 57.0),
               direction=(1.0, 0.0, 0.0), height=1.5):
    return SceneMap(tuple(Box(*b) for b in buildings), tuple(region), np.array(bs, dtype=float),
                    np.array(direction, dtype=float), height)


@pytest.fixture(scope="session")
def canyon():
    return default_scene()


@pytest.fixture(scope="session")
def small_system():
    return SystemConfig(num_antennas=16, num_subcarriers=64)


@pytest.fixture
def empty_scene():
    return make_scene()


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""
    def record(number, name, ok, detail=""):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {name}" + (f" ({detail})" if detail else "")
        print(line)
        _VERDICTS.append(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
