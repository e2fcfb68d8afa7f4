import numpy as np
import pytest

from apn.data import generate_synthetic
from apn.model import init_params
from apn.training import TrainConfig


@pytest.fixture(scope="session")
def tiny_bundle():
    """Six classes of 16x16 images, one unseen; fast to train."""
    return generate_synthetic(n_classes=6, n_unseen=1, k_attrs=6, l_groups=2, image_size=16,
                              imgs_per_class=6, seed=3)


@pytest.fixture
def micro():
    """Micro-model: C=4, H=W=3, K=4, L=2, two seen classes, float64."""
    rng = np.random.default_rng(11)
    params = init_params(4, channels=(3, 4), seed=5, dtype=np.float64)
    images = rng.uniform(0, 1, size=(2, 3, 12, 12))
    phi = np.array([[1.0, 0.0, 0.0, 1.0], [0.0, 1.0, 1.0, 0.0]])
    return {
        "params": params,
        "images": images,
        "labels": np.array([0, 1]),
        "phi": phi,
        "seen": [0, 1],
        "groups": [[0, 1], [2, 3]],
    }


def full_config(**kw):
    return TrainConfig(**{"f64": True, **kw})


# ---------------------------------------------------------------------------
# acceptance reporting
# ---------------------------------------------------------------------------

ACCEPTANCE: list[str] = []


def record(number: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE.append(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
