import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pillarcoral.core import Box3D, ClassId, Dataset, Domain, Frame, PointCloud

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_cloud(rng: np.random.Generator, n: int, extent: float = 2.0, z=(-3.0, 1.0)) -> PointCloud:
    pts = np.column_stack([
        rng.uniform(-extent, extent, n),
        rng.uniform(-extent, extent, n),
        rng.uniform(z[0], z[1], n),
        rng.uniform(0.0, 1.0, n),
    ])
    return PointCloud(pts)


def car(x=0.0, y=0.0, yaw=0.0, score=None, size=(4.0, 1.8, 1.5), z=0.0) -> Box3D:
    return Box3D((x, y, z), size, yaw, ClassId.Car, score)


def ped(x=0.0, y=0.0, yaw=0.0, score=None) -> Box3D:
    return Box3D((x, y, 0.0), (0.6, 0.6, 1.7), yaw, ClassId.Pedestrian, score)


def frame(fid: str, boxes=(), cloud=None, domain=Domain.Simulated) -> Frame:
    return Frame(cloud if cloud is not None else PointCloud(), tuple(boxes), fid, domain)


def dataset(frames, name="ds") -> Dataset:
    return Dataset(tuple(frames), name, 0, {})


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


HALF_PI = math.pi / 2


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
