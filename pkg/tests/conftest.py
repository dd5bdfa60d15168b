import os
from pathlib import Path

import numpy as np
import pytest
import torch

from glann.datasets import find_idx_file, write_idx

# criterion number -> (passed, detail); filled in by test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


def _mnist_from_mlxtend(root: Path) -> Path | None:
    """Write mlxtend's bundled 5000-digit MNIST sample as IDX files."""
    try:
        from mlxtend.data import mnist_data
    except ImportError:
        return None
    x, y = mnist_data()
    root.mkdir(parents=True, exist_ok=True)
    write_idx(root / "train-images-idx3-ubyte", x.reshape(-1, 28, 28).astype(np.uint8))
    write_idx(root / "train-labels-idx1-ubyte", y.astype(np.uint8))
    return root


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory) -> Path:
    """Directory with MNIST train IDX files.

    ``GLANN_MNIST_DIR`` takes precedence; otherwise the small MNIST sample
    shipped with mlxtend is converted. Tests needing it skip if neither exists.
    """
    env = os.environ.get("GLANN_MNIST_DIR")
    if env and find_idx_file(env):
        return Path(env)
    root = _mnist_from_mlxtend(tmp_path_factory.mktemp("mnist"))
    if root is None:
        pytest.skip("no MNIST data: set GLANN_MNIST_DIR or install mlxtend")
    return root


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
