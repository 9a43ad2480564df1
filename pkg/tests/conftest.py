"""Shared fixtures: an MNIST subset written as IDX files, and cached desk models."""

import numpy as np
import pytest

from squeezetrain.data_io import load_idx, synth_blobs, write_idx
from squeezetrain.models import ModelSpec
from squeezetrain.training import TrainConfig, train

MNIST_TRAIN = 4000


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    """4000 train / 1000 test MNIST digits as IDX files (from mlxtend's bundled 5k subset)."""
    mlx = pytest.importorskip("mlxtend.data")
    pixels, labels = mlx.mnist_data()
    perm = np.random.default_rng(2023).permutation(len(labels))
    images = pixels[perm].reshape(-1, 28, 28).astype(np.uint8)
    labels = labels[perm]
    d = tmp_path_factory.mktemp("mnist")
    write_idx(d / "train-images-idx3-ubyte", d / "train-labels-idx1-ubyte",
              images[:MNIST_TRAIN], labels[:MNIST_TRAIN])
    write_idx(d / "t10k-images-idx3-ubyte", d / "t10k-labels-idx1-ubyte",
              images[MNIST_TRAIN:], labels[MNIST_TRAIN:])
    return d


@pytest.fixture(scope="session")
def mnist(mnist_dir):
    tr = load_idx(mnist_dir / "train-images-idx3-ubyte", mnist_dir / "train-labels-idx1-ubyte",
                  split="train")
    te = load_idx(mnist_dir / "t10k-images-idx3-ubyte", mnist_dir / "t10k-labels-idx1-ubyte",
                  split="test")
    return tr, te


MLP = ModelSpec("mlp")


@pytest.fixture(scope="session")
def standard_mlp(mnist):
    """A few epochs of plain training; enough for the crafting and probe tests."""
    tr, _ = mnist
    cfg = TrainConfig(method="standard", epochs=6, lr=0.05, selection_size=100, eval_steps=1)
    return MLP, train(MLP, tr, cfg).final_params


BLOBS = ModelSpec("mlp", (8,), 3, (16,))


@pytest.fixture(scope="session")
def blobs():
    return synth_blobs(0, 240, 3, 8, 0.6, sigma=0.08)


@pytest.fixture(scope="session")
def blobs_model(blobs):
    cfg = TrainConfig(method="standard", epochs=15, batch_size=32, lr=0.1, selection_size=60,
                      eval_steps=2, epsilon=0.05, alpha=0.02)
    return BLOBS, train(BLOBS, blobs, cfg).final_params


# One PASS/FAIL line per acceptance criterion in the terminal summary.
_CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        _CRITERIA[number] = (status, title)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {title}")
