"""Shared fixtures for the tf4ctr tests."""

import numpy as np
import pytest
from click.testing import CliRunner

from tf4ctr.data import synth_generate, write_csv
from tf4ctr.diffcore import set_precision
from tf4ctr.models import ModelConfig


@pytest.fixture(autouse=True)
def float64_precision():
    """Every test starts from double precision."""
    set_precision("float64")
    yield
    set_precision("float64")


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture
def tiny_config():
    """Small widths so a full run takes well under a second per epoch."""
    return ModelConfig(
        d=4,
        simple_hidden=[8],
        complex_hidden=[8, 8],
        expert_hidden=[8, 4],
        gate_hidden=[8, 4],
        batch_size=64,
        eval_batch_size=256,
        max_epochs=2,
        min_frequency=1,
        seed=11,
    )


@pytest.fixture
def synthetic_csv(tmp_path):
    """A 600-row synthetic CSV with user ids."""
    dataset, _ = synth_generate(600, 3, 6, 0.0, seed=5, n_users=20)
    return write_csv(dataset, tmp_path / "synth.csv")


@pytest.fixture
def cli_runner():
    """Runner that keeps stdout separate from stderr across click versions."""
    try:
        return CliRunner(mix_stderr=False)
    except TypeError:
        return CliRunner()
