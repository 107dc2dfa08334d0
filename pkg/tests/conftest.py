import functools
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from carprune.datasets import SplitSpec, export_mlxtend_mnist, load_idx, split_dataset  # noqa: E402
from carprune.network import SgdConfig, build_network, train_sgd  # noqa: E402

MNIST_SPLIT = SplitSpec(0.7, 0.1, 0.2, seed=0)
TRAIN_SGD = dict(learning_rate=0.01, momentum=0.9, batch_size=32, epochs=10)


@pytest.fixture(scope="session")
def mnist_files(tmp_path_factory):
    return export_mlxtend_mnist(tmp_path_factory.mktemp("mnist"))


@pytest.fixture(scope="session")
def mnist(mnist_files):
    return split_dataset(load_idx(*mnist_files), MNIST_SPLIT)


@pytest.fixture(scope="session")
def trained(mnist):
    """``trained(arch, seed)`` -> network trained on the MNIST train split (cached)."""

    @functools.lru_cache(maxsize=None)
    def get(arch: str, seed: int):
        start = time.process_time()
        net, _ = train_sgd(build_network(arch, seed), mnist["train"], SgdConfig(**TRAIN_SGD, seed=seed))
        get.cpu_seconds[(arch, seed)] = time.process_time() - start
        return net

    get.cpu_seconds = {}
    return get


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}  [{detail}]")
