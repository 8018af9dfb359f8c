import numpy as np
import pytest

from orbit_restore.imaging import save_image


def synthetic_scene(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Dark background with a bright textured body and a solar-panel bar."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    img = np.zeros((size, size, 3))
    cx, cy = rng.uniform(0.3, 0.7, 2)
    w, h = rng.uniform(0.15, 0.3, 2)
    body = (abs(xx - cx) < w) & (abs(yy - cy) < h)
    colour = rng.uniform(0.4, 1.0, 3)
    img[body] = colour * (0.6 + 0.4 * np.sin(xx[body] * rng.uniform(10, 30)))[:, None]
    panel = (abs(yy - cy) < 0.05) & (abs(xx - cx) < 0.45)
    img[panel] = [0.2, 0.3, 0.7]
    return img


def write_clean_dir(path, n: int, size: int = 64, seed: int = 0):
    path.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(n):
        save_image(synthetic_scene(rng, size), path / f"img{i}.png")
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def clean_dir(tmp_path):
    return write_clean_dir(tmp_path / "clean", 5)


ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
