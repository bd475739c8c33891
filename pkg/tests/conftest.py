import numpy as np
import pytest

from seqprnu import synthcam


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def small_camera():
    return synthcam.make_camera(64, 64, sigma_k=0.05, sigma_n=1.0, seed=5)


@pytest.fixture(scope="session")
def small_shots(small_camera):
    return synthcam.ShotSequence(small_camera, synthcam.SceneConfig("flatfield"), range(12))


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record a one-line pass/fail verdict for an acceptance criterion."""

    def record(number, ok, detail):
        _CRITERIA[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
