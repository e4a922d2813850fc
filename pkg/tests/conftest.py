"""Shared fixtures: a small synthetic dataset and a desk model trained on it once per session."""

from types import SimpleNamespace

import numpy as np
import pytest

from tftdiag.model import TFT, ModelConfig
from tftdiag.signals import DatasetSpec, build_dataset, load_samples, split_dataset
from tftdiag.tensor import Rng
from tftdiag.training import TrainConfig, train


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    ds = DatasetSpec(n_classes=4, per_class=32, seed=0)
    rows = build_dataset(ds, root)
    tr, va, te = split_dataset(rows, (0.6, 0.2, 0.2), Rng(0).child(3))
    return SimpleNamespace(spec=ds, root=root, rows=rows, train=tr, val=va, test=te,
                           xy=lambda part: load_samples(part, root))


@pytest.fixture(scope="session")
def trained_desk(desk_dataset):
    d = desk_dataset
    model = TFT(ModelConfig(), seed=0)
    result = train(model, d.xy(d.train), d.xy(d.val), TrainConfig(max_epochs=30, seed=0))
    model.load_state(result.best_state)
    return SimpleNamespace(model=model, result=result)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
