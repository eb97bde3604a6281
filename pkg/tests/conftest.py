import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    max_examples=60,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
    derandomize=True,
)
settings.register_profile("thorough", max_examples=500, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    from panofactor.synth import SynthScene

    return SynthScene.generate(5)


@pytest.fixture(scope="session")
def exact_stack(small_scene):
    """Six frames of one scene under random illuminations, no warp."""
    from panofactor.synth import make_stack, random_illuminations

    illums = random_illuminations(np.random.default_rng(3), 6)
    stack, _, _ = make_stack(small_scene, illums)
    return stack, illums


@pytest.fixture(scope="session")
def exact_fit(exact_stack):
    from panofactor.intrinsics import fit_stack

    return fit_stack(exact_stack[0], "bicolor")


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one acceptance line; all lines are repeated in the terminal summary."""

    def report(number: int, ok: bool, detail: str) -> None:
        line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} {detail}"
        _VERDICTS.append(line)
        print(line)

    return report


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
