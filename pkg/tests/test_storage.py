"""Tests for the run directory store."""

from datetime import datetime

import numpy as np
import pandas as pd
import pytest

from tf4ctr.errors import CheckpointError
from tf4ctr.models import EpochRecord, RunManifest
from tf4ctr.network import TwinFocusNetwork
from tf4ctr.storage import HISTORY_COLUMNS, RunStore


@pytest.fixture
def store(tmp_path):
    return RunStore(tmp_path / "run").create()


@pytest.fixture
def network(tiny_config):
    return TwinFocusNetwork(tiny_config, [4, 5, 3], seed=1)


def test_checkpoint_roundtrip(store, network, tiny_config):
    path = store.save_checkpoint(network, epoch=3)
    assert path == store.checkpoint_path
    other = TwinFocusNetwork(tiny_config, [4, 5, 3], seed=2)
    assert store.load_checkpoint(other) == 3
    for name, value in network.state_dict().items():
        assert np.array_equal(other.state_dict()[name], value)


def test_epoch_checkpoints_are_listed_in_order(store, network):
    for epoch in (2, 1, 10):
        store.save_checkpoint(network, store.epoch_checkpoint(epoch), epoch)
    names = [p.name for p in store.epoch_checkpoints()]
    assert names == ["epoch_001.npz", "epoch_002.npz", "epoch_010.npz"]


def test_missing_checkpoint(store, network):
    with pytest.raises(CheckpointError, match="not found"):
        store.load_checkpoint(network)


def test_unreadable_checkpoint(store, network):
    store.checkpoint_path.write_text("not a checkpoint", encoding="utf-8")
    with pytest.raises(CheckpointError):
        store.load_checkpoint(network)


def test_checkpoint_format_version_is_checked(store, network):
    arrays = dict(network.state_dict())
    arrays["__format_version__"] = np.array(99)
    with store.checkpoint_path.open("wb") as handle:
        np.savez(handle, **arrays)
    with pytest.raises(CheckpointError, match="format 99"):
        store.load_checkpoint(network)


def test_manifest_only_gains_a_finish_stamp(store):
    manifest = RunManifest(run_id="r", config={"seed": "4"}, seed=4, code_version="0.1.0")
    store.write_manifest(manifest)
    stamp = datetime(2025, 1, 2, 3, 4, 5)
    finished = store.mark_finished(stamp)
    assert finished.finished_at == stamp
    assert finished.model_dump(exclude={"finished_at"}) == manifest.model_dump(
        exclude={"finished_at"}
    )
    assert store.read_manifest() == finished


def test_tables_keep_their_column_order(store):
    record = EpochRecord(
        epoch=1, train_loss=0.7, train_loss_ctr=0.5, train_loss_tf=0.2,
        valid_auc=0.6, valid_logloss=0.69, lr=0.001,
    )
    store.write_table(store.history_path, [record], HISTORY_COLUMNS)
    frame = pd.read_csv(store.history_path)
    assert list(frame.columns) == HISTORY_COLUMNS
    assert frame.loc[0, "train_loss_tf"] == 0.2
    assert pd.isna(frame.loc[0, "valid_gauc"])


def test_metrics_log_appends(store):
    assert store.read_metrics() == []
    manifest = RunManifest(run_id="r", config={}, seed=0, code_version="0.1.0")
    store.append_metrics(manifest)
    store.append_metrics(manifest)
    assert [m["run_id"] for m in store.read_metrics()] == ["r", "r"]
    store.clear_metrics()
    assert store.read_metrics() == []
