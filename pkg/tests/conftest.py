import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from corrprune.geometry import CameraPose
from corrprune.synthdata import project, sample_pose, shared_frustum_points

torch.set_num_threads(1)

settings.register_profile(
    "default", deadline=None, max_examples=30, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_scene(seed, n=100, max_angle=30.0):
    """(pose, exact correspondences) from the generator's camera model."""
    rng = np.random.default_rng(seed)
    pose = sample_pose(rng, max_angle)
    return pose, project(shared_frustum_points(rng, pose, n), pose)


@pytest.fixture
def scene():
    return random_scene(0)


def rot_z(deg):
    a = np.radians(deg)
    return np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1.0]])


IDENTITY_X = CameraPose(np.eye(3), [1.0, 0.0, 0.0])


ACCEPTANCE_LINES: list[tuple] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion; ``number`` may be
    an int or a label such as "P1" for a supporting property."""

    def record(number, ok, detail):
        line = f"{'criterion' if isinstance(number, int) else 'property '} {number!s:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append((isinstance(number, str), str(number).zfill(3), line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for *_, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
