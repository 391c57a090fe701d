import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def textured_image(seed=0, shape=(96, 96), blobs=40):
    """Smooth random texture with corners: overlapping rectangles, lightly blurred."""
    from scipy import ndimage

    g = np.random.default_rng(seed)
    img = np.full(shape, 0.2)
    for _ in range(blobs):
        r0, c0 = g.integers(0, shape[0] - 8), g.integers(0, shape[1] - 8)
        h, w = g.integers(4, 16, size=2)
        img[r0:r0 + h, c0:c0 + w] = g.uniform(0.1, 0.9)
    return np.clip(ndimage.gaussian_filter(img, 1.0), 0.0, 1.0)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def report(request):
    """Record one acceptance line: ``report("AC-1", ok, detail)``."""
    lines = request.config.stash[_ACCEPTANCE]

    def emit(name, ok, detail):
        line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
        lines.append(line)
        print(line)
        return ok
    return emit


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[0][3:])):
            terminalreporter.write_line(line)
