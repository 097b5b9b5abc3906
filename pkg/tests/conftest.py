import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from psetlab.models import SeedBundle, TrainConfig, default_arch, train  # noqa: E402
from psetlab.pointcloud import make_dataset, split_dataset  # noqa: E402


@pytest.fixture(scope="session")
def small_ds():
    """4 classes, 12 train + 4 test clouds each, 64 points."""
    ds = make_dataset(("sphere", "cube", "cone", "torus"), 12, 4, 64, seed=5)
    tr, te = split_dataset(ds, 4)
    return ds, tr, te


@pytest.fixture(scope="session")
def small_models(small_ds):
    ds, tr, _ = small_ds
    cfg = TrainConfig(epochs=2)
    return {f: train(default_arch(f, ds.n_classes), ds, tr, SeedBundle(1, 2, 3), cfg)
            for f in ("deepsets_lite", "pointnet_lite", "hier_lite")}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
