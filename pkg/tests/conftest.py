import contextlib
import io
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from o2m.core.rng import make_rng
from o2m.data import ImageBuffer


@pytest.fixture
def rng():
    return make_rng(1234, "tests")


@pytest.fixture
def natural_image():
    """A bundled ground-truth tile (grayscale, 256x256)."""
    from o2m.data import bundled_root, list_images, load_image

    return load_image(list_images(bundled_root("toy") / "gt")[0])


@pytest.fixture
def gradient_image():
    y, x = np.mgrid[0:48, 0:64]
    return ImageBuffer((40 + 2 * x + y).astype(np.uint8))



REPO = Path(__file__).resolve().parents[1]
SMOKE_CONFIG = REPO / "configs" / "toy_smoke.conf"


@dataclass
class SmokeRun:
    exit_code: int
    seconds: float
    out_dir: Path
    stdout: str


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    """The bundled smoke configuration, trained once through ``o2m train``."""
    from o2m.cli import main

    root = tmp_path_factory.mktemp("smoke")
    conf = root / "smoke.conf"
    # later keys win, so this redirects the output without touching the rest
    conf.write_text(SMOKE_CONFIG.read_text() + "\nout_dir = run\n")
    buf = io.StringIO()
    start = time.perf_counter()
    with contextlib.redirect_stdout(buf):
        code = main(["train", "--config", str(conf)])
    return SmokeRun(code, time.perf_counter() - start, root / "run", buf.getvalue())


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
