import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from radalign.synthetic import DriveSpec, SceneSpec, generate_fleet

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def small_scene(length=120.0, **kw) -> SceneSpec:
    return SceneSpec(corridor_length=length, **kw)


def two_drives(**kw) -> list[DriveSpec]:
    return [
        DriveSpec("a", "forward", **kw),
        DriveSpec("b", "reverse", **kw),
    ]


@pytest.fixture(scope="session")
def small_fleet():
    return generate_fleet(small_scene(), two_drives(), seed=7)


def random_transforms(rng: np.random.Generator, n: int, scale: float = 10.0) -> np.ndarray:
    out = np.empty((n, 3))
    out[:, :2] = rng.uniform(-scale, scale, (n, 2))
    out[:, 2] = rng.uniform(-math.pi, math.pi, n)
    return out


# --- acceptance report -------------------------------------------------------

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance_line():
    """Record the one-line PASS/FAIL verdict of an acceptance criterion."""

    def record(number: int, passed: bool, detail: str) -> None:
        _ACCEPTANCE[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(_ACCEPTANCE[number])

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
