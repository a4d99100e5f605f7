import numpy as np
import pytest

from invcodec import config as configs
from invcodec.model import CodecModel


@pytest.fixture(scope="session")
def tiny_model():
    """Untrained tiny model; tests must not mutate it."""
    return CodecModel(configs.tiny(), seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, h, w):
    return rng.integers(0, 256, (h, w, 3)).astype(np.uint8)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
