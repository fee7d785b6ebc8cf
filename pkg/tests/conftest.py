import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

DATA = Path(__file__).resolve().parents[1] / "data"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist_paths():
    paths = {
        "train": (DATA / "mnist5k-train-images-idx3-ubyte.gz", DATA / "mnist5k-train-labels-idx1-ubyte.gz"),
        "test": (DATA / "mnist5k-t10k-images-idx3-ubyte.gz", DATA / "mnist5k-t10k-labels-idx1-ubyte.gz"),
    }
    for pair in paths.values():
        for p in pair:
            if not p.exists():
                pytest.fail(f"missing {p}; run scripts/make_mnist_subset.py")
    return paths


def pytest_terminal_summary(terminalreporter):
    for name, mod in list(sys.modules.items()):
        if name.endswith("test_acceptance") and getattr(mod, "LINES", None):
            terminalreporter.section("acceptance criteria")
            for line in mod.LINES:
                terminalreporter.write_line(line)
