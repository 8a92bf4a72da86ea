import numpy as np
import pytest

from streamfilter.rng import Rng


def random_streamline(rng: Rng, n: int = 16, step: float = 3.0) -> np.ndarray:
    """Smooth-ish random polyline: a random walk with momentum."""
    d = rng.unit_vectors(1)[0]
    pts = [rng.uniform(-30.0, 30.0, size=3)]
    for _ in range(n - 1):
        d = d + 0.4 * rng.normal(size=3)
        d /= np.linalg.norm(d)
        pts.append(pts[-1] + step * d)
    return np.array(pts)


def random_rotation(rng: Rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture
def rng():
    return Rng(1234)


# one PASS/FAIL line per acceptance criterion, shown at the end of the run
ACCEPTANCE = {}


def record(number: int, title: str, passed: bool, detail: str = ""):
    line = f"{'PASS' if passed else 'FAIL'} [{number:2d}] {title}" + (f": {detail}" if detail else "")
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
