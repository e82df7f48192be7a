import numpy as np
import pytest

from bnnas.data import SyntheticSpec, gen_synthetic
from bnnas.space import SpaceConfig


def toy_space(**kw) -> SpaceConfig:
    """Three searchable layers, 6**3 = 216 architectures, 8x8 inputs."""
    base = dict(image_size=8, num_classes=4, stem_channels=4, stem_stride=1,
                layers=((4, 1), (8, 2), (8, 1)), head_channels=16)
    base.update(kw)
    return SpaceConfig(**base)


def central_diff(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Numerical gradient of scalar f at x (x is perturbed in place and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


@pytest.fixture
def space():
    return toy_space()


@pytest.fixture
def tiny_data(space):
    return gen_synthetic(SyntheticSpec(num_samples=64, num_classes=space.num_classes,
                                       image_size=space.image_size), seed=0)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
