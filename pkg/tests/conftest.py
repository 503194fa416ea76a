import numpy as np
import pytest

from cdssl.benchmark import default_source_spec, default_target_spec, generate_images
from cdssl.domain import AnnotatedImage, BoundingBox


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def box():
    return BoundingBox


@pytest.fixture(scope="session")
def small_source():
    return generate_images(default_source_spec(), 12, 7, 1, "src", "source")


@pytest.fixture(scope="session")
def small_target():
    return generate_images(default_target_spec(), 12, 7, 2, "tgt", "target")


def blank(image_id="img", h=32, w=32, boxes=(), domain="source", kind=None):
    from cdssl.domain import GROUND_TRUTH

    return AnnotatedImage(image_id, np.full((h, w, 3), 0.5), domain, list(boxes), kind or GROUND_TRUTH)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str = "") -> bool:
    line = f"{'PASS' if ok else 'FAIL'} [{number:2d}] {title}" + (f" | {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
