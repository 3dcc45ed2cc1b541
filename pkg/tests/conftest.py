from __future__ import annotations

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from mgrecon.camera import Intrinsics, Pose


def random_pose(rng, spread=1.0) -> Pose:
    R = Rotation.random(random_state=rng).as_matrix()
    return Pose(R, rng.uniform(-spread, spread, size=3))


def looking_pair(rng, K, depth=2.0):
    """Two cameras a short baseline apart, both seeing a point cloud near ``depth``."""
    target = rng.uniform(-0.2, 0.2, size=3)
    out = []
    for _ in range(2):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        eye = target + depth * direction
        up = np.cross(direction, rng.normal(size=3))
        out.append(Pose.look_at(eye, target, up))
    return target, out


@pytest.fixture
def K128():
    return Intrinsics(100.0, 100.0, 64.0, 64.0, 128, 128)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criterion -> (passed, detail), filled in by test_acceptance.py
CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> str:
    CRITERIA[number] = (passed, detail)
    return f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        passed, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
