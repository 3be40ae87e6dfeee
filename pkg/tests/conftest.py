import numpy as np
import pytest
from hypothesis import settings

from lrstat.autodiff import make_rng
from lrstat.backbone import init_model
from lrstat.degrade import VideoClip

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model(seed=0, classes=3, k=2, channels=3, widths=(2, 3)):
    return init_model(make_rng([seed, 0]), classes, k, channels, widths, hidden=4)


def random_clip(rng, frames=4, h=8, w=8, c=3, label=0, cid="c"):
    return VideoClip(rng.uniform(0, 1, size=(frames, h, w, c)), label, cid)


@pytest.fixture
def tiny():
    return tiny_model


# -- acceptance summary -------------------------------------------------------

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def record():
    """``record(criterion, ok, detail)`` stores one summary line; the test still asserts."""

    def _record(criterion: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE[criterion] = (bool(ok), detail)
        return bool(ok)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
