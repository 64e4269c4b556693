import sys

import numpy as np
import pytest

from m2ost import diffcore as dc
from m2ost.config import ModelConfig


@pytest.fixture
def f64():
    with dc.precision("float64"):
        yield


# C=8, N=1, heads=1, p=16, H=W=32, k=4
TINY = ModelConfig(image_size=32, patch_size=16, channels=8, depth=1, heads=1, num_genes=4)


@pytest.fixture
def tiny_cfg():
    return TINY


def random_images(cfg, batch=1, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1, 1, (batch, cfg.num_levels, 3, cfg.image_size, cfg.image_size))


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = [module.RESULTS[k] for k in sorted(module.RESULTS)] if module else []
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
