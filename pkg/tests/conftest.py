import numpy as np
import pytest
import torch

from singhead import cvae, synthetic, training
from singhead.losses import LossWeights

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_data():
    return synthetic.make_dataset(4, T=45, d_a=16, seed=3)


@pytest.fixture(scope="session")
def trained_toy(toy_data):
    """Small CVAE fitted for a few hundred steps; shared by generation tests."""
    cfg = cvae.ModelConfig(d=32, n_layers_enc=1, n_layers_dec=1, n_heads=4, d_a=16, ppe_period=30)
    model = training.build_model(cfg, seed=0)
    tcfg = training.TrainConfig(epochs=300, batch_size=4, lr=1e-3, seed=0,
                                weights=LossWeights(1.0, 1.0, 1e-3))
    return training.train(model, toy_data, tcfg).model


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def _report(number, title, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
