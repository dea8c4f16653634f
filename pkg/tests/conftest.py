import numpy as np
import pytest

from gsfocus.core import Camera, GaussianCloud, logit


def random_cloud(rng, n=5, sh=False, spread=0.4, depth=0.0):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianCloud(
        rng.uniform(-spread, spread, (n, 3)) + [0, 0, depth],
        np.log(rng.uniform(0.08, 0.25, (n, 3))),
        q,
        logit(rng.uniform(0.3, 0.8, n)),
        rng.uniform(0.1, 0.9, (n, 3)),
        sh1=rng.normal(0, 0.2, (n, 3, 3)) if sh else None,
    )


def front_camera(size=16, distance=3.0, image_id=1, fov=40.0, offset=(0.0, 0.0)):
    eye = (offset[0], offset[1] - distance, 0.3)
    return Camera.look_at(image_id, eye, (0, 0, 0), size, size, fov, name=f"v{image_id}.png")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = {}


def record_acceptance(number, ok, detail):
    _ACCEPTANCE[number] = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
