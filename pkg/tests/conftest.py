import numpy as np
import pytest
from hypothesis import settings
from hypothesis import strategies as st

from monosinai.dist import Dist

settings.register_profile("repo", deadline=None, max_examples=150, derandomize=True)
settings.load_profile("repo")


@st.composite
def dists(draw, n=None, max_n=8, allow_zero=True):
    """Random probability vectors, optionally with zero entries."""
    size = n if n is not None else draw(st.integers(1, max_n))
    lo = 0 if allow_zero else 1
    w = draw(st.lists(st.integers(lo, 20), min_size=size, max_size=size))
    if sum(w) == 0:
        w[0] = 1
    return Dist.from_weights(w)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
