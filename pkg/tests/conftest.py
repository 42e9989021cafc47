import sys
import numpy as np
import pytest

from mvboot.geometry import CameraView, look_at_camera
from mvboot.scene import dome_cameras


def camera(cid=0, focal=1000.0, cx=500.0, cy=500.0, R=None, t=(0.0, 0.0, 0.0), size=(1000, 1000)):
    K = np.array([[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]])
    return CameraView(cid, K, np.eye(3) if R is None else R, np.asarray(t, dtype=float), *size)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_rig(rng, views, radius=200.0, focal=1200.0, size=368):
    """Cameras scattered on a sphere, all looking at a jittered target near the origin."""
    cams = []
    for v in range(views):
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        cams.append(look_at_camera(v, radius * d, rng.normal(0, 2, 3), focal, size, size))
    return cams


@pytest.fixture
def dome31():
    return dome_cameras(31)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
