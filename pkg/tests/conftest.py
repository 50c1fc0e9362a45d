import numpy as np
import pytest

from posegraph.geometry import CameraModel, Rig, look_at


@pytest.fixture
def identity_camera():
    K = np.array([[1000.0, 0.0, 960.0], [0.0, 1000.0, 540.0], [0.0, 0.0, 1.0]])
    return CameraModel("id", 1920, 1080, K, np.eye(3), np.zeros(3))


def random_camera(rng, camera_id="c"):
    """Camera on a ring looking roughly at the origin."""
    a = rng.uniform(0, 2 * np.pi)
    r = rng.uniform(2500, 5000)
    center = [r * np.cos(a), r * np.sin(a), rng.uniform(500, 3000)]
    target = rng.uniform(-500, 500, size=3) + [0, 0, 900]
    return look_at(camera_id, center, target, rng.uniform(600, 1200))


def ring_rig(n=4, radius=3000.0, height=2000.0, focal=800.0):
    cams = []
    for i in range(n):
        a = 2 * np.pi * i / n + 0.3
        cams.append(look_at(f"cam{i}", [radius * np.cos(a), radius * np.sin(a), height], [0, 0, 900], focal))
    return Rig(cams)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = (bool(passed), detail)
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
