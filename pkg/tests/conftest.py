import zlib

import numpy as np
import pytest

from twoview.patches import Patch
from twoview.synth import generate_synthetic

_CRITERIA: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    """Record one acceptance criterion outcome for the terminal summary."""

    def record(name: str, ok: bool, detail: str = "") -> None:
        _CRITERIA.append((name, bool(ok), detail))

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _CRITERIA:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


def make_patch(pid, label="WW", view="surface", specimen="s0", size=16, rng=None, value=None):
    rng = rng or np.random.default_rng(zlib.crc32(pid.encode()))
    if value is None:
        pixels = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
    else:
        pixels = np.full((size, size, 3), value, dtype=np.uint8)
    return Patch(pid, pixels, label, view, f"{specimen}-{view}", specimen)


@pytest.fixture(scope="session")
def texture_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("texture")
    manifest = generate_synthetic(root, classes=6, specimens=3, image_size=96, seed=11, mode="texture")
    return root, manifest
