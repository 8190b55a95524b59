import numpy as np
import pytest

from mnlab import arch

R_GRID = (1, 2, 4, 8, 16, 32)


@pytest.fixture(autouse=True)
def _deterministic(monkeypatch):
    monkeypatch.setenv("MNLAB_DETERMINISTIC", "1")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def resnet():
    return arch.build_resnet18()


def tiny_resnet(num_classes=5):
    return arch.build_resnet18(num_classes=num_classes, base_width=4, blocks=(1, 1))


def micro(widths=(16, 32), num_classes=4):
    return arch.build_micro_cnn(list(widths), num_classes)
