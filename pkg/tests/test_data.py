"""Tests for vocabularies, CSV ingestion, splits, batching and the synthetic generator."""

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tf4ctr.data import (
    OOV_INDEX,
    RawTable,
    batches,
    build_vocabs,
    discretize_numeric,
    encode,
    load_vocab_sidecar,
    prepare_datasets,
    raw_from_frame,
    read_csv,
    save_vocab_sidecar,
    split,
    synth_generate,
    write_csv,
)
from tf4ctr.errors import ArgumentError, ConfigError, DataError
from tf4ctr.metrics import ScoredSet, auc
from tf4ctr.models import HardSelection, ModelConfig, SplitStrategy


def _table(tokens: list[str], labels=None) -> RawTable:
    labels = np.array(labels if labels is not None else [i % 2 for i in range(len(tokens))])
    return RawTable(
        field_names=["f"],
        columns={"f": np.array(tokens, dtype=object)},
        labels=labels,
    )


def test_min_frequency_folds_rare_tokens():
    """a:5, b:1 at threshold 2 keeps a and folds b."""
    (vocab,) = build_vocabs(_table(["a"] * 5 + ["b"]), min_frequency=2)
    assert vocab.value_to_index == {"a": 1}
    assert vocab.encode(["a", "b"]).tolist() == [1, OOV_INDEX]


def test_min_frequency_one_keeps_everything():
    (vocab,) = build_vocabs(_table(["x", "y", "x", "z"]), min_frequency=1)
    assert vocab.size == 4
    assert vocab.value_to_index == {"x": 1, "y": 2, "z": 3}


def test_min_frequency_threshold_is_inclusive():
    """a:9, b:10 at threshold 10 keeps only b."""
    (vocab,) = build_vocabs(_table(["a"] * 9 + ["b"] * 10), min_frequency=10)
    assert vocab.value_to_index == {"b": 1}


def test_build_vocabs_rejects_bad_input():
    with pytest.raises(DataError):
        build_vocabs(_table([]), min_frequency=1)
    with pytest.raises(ArgumentError):
        build_vocabs(_table(["a"]), min_frequency=0)


def test_unseen_tokens_map_to_oov():
    train = _table(["a", "b", "a"])
    vocabs = build_vocabs(train, 1)
    data = encode(_table(["c", "a", "zzz"]), vocabs)
    assert data.ids[:, 0].tolist() == [OOV_INDEX, 1, OOV_INDEX]
    assert (data.ids < np.array(data.vocab_sizes)).all()


def test_encoding_is_idempotent():
    """Re-encoding decoded tokens reproduces the same ids."""
    table = _table(["a", "b", "rare", "a", "b"])
    vocabs = build_vocabs(table, 2)
    first = encode(table, vocabs)
    decoded = _table(vocabs[0].decode(first.ids[:, 0]), table.labels)
    assert np.array_equal(encode(decoded, vocabs).ids, first.ids)


def test_encode_rejects_field_mismatch():
    vocabs = build_vocabs(_table(["a"]), 1)
    other = RawTable(field_names=["g"], columns={"g": np.array(["a"], dtype=object)},
                     labels=np.array([1]))
    with pytest.raises(DataError):
        encode(other, vocabs)


@pytest.mark.parametrize(
    "x, token",
    [(1.5, 1), (2.0, 1), (8.0, 9), (16.0, 16), (0.0, 1), (-4.0, 1), (3.0, 2)],
)
def test_discretize_numeric(x, token):
    """floor((log2 x)^2) above 2, else 1."""
    assert discretize_numeric(x) == token


def test_discretize_numeric_rejects_nan():
    with pytest.raises(DataError):
        discretize_numeric(float("nan"))
    with pytest.raises(DataError):
        discretize_numeric(float("inf"))


def test_numeric_fields_are_bucketed():
    frame = pd.DataFrame({"n": ["8", "1.5", ""], "c": ["x", "y", "x"], "label": ["1", "0", "1"]})
    table = raw_from_frame(frame, numeric_fields=["n"])
    assert table.columns["n"].tolist() == ["9", "1", ""]
    assert table.columns["c"].tolist() == ["x", "y", "x"]

    with pytest.raises(DataError):
        raw_from_frame(frame, numeric_fields=["missing"])
    with pytest.raises(DataError):
        raw_from_frame(frame.assign(n=["abc", "1", "2"]), numeric_fields=["n"])


def test_read_csv_requires_binary_labels(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("f,label\na,1\nb,2\n")
    with pytest.raises(DataError):
        read_csv(path)

    path.write_text("f,g\na,1\n")
    with pytest.raises(DataError):
        read_csv(path)

    with pytest.raises(DataError):
        read_csv(tmp_path / "missing.csv")


def test_read_csv_keeps_user_ids_out_of_the_features(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text("user_id,f,g,label\nu1,a,x,1\nu2,b,y,0\n")
    table = read_csv(path)
    assert table.field_names == ["f", "g"]
    assert table.user_ids.tolist() == ["u1", "u2"]
    assert table.labels.tolist() == [1, 0]


def test_random_split_sizes():
    """10 rows at 7:2:1 split into 7, 2 and 1 disjoint rows."""
    table = _table([f"t{i}" for i in range(10)])
    train, valid, test = split(table, [0.7, 0.2, 0.1], SplitStrategy.RANDOM, seed=3)
    assert (len(train), len(valid), len(test)) == (7, 2, 1)
    tokens = [*train.columns["f"], *valid.columns["f"], *test.columns["f"]]
    assert sorted(tokens) == sorted(table.columns["f"])


def test_split_everything_into_train():
    table = _table(["a", "b", "c"])
    train, valid, test = split(table, [1.0, 0.0, 0.0], SplitStrategy.RANDOM, seed=1)
    assert (len(train), len(valid), len(test)) == (3, 0, 0)


@pytest.mark.parametrize(
    "tokens, ratios, expected",
    [
        (list("abc"), [0.7, 0.2, 0.1], [1, 1, 1]),
        (list("abcd"), [0.85, 0.1, 0.05], [2, 1, 1]),
        (list("abcd"), [0.8, 0.2, 0.0], [3, 1, 0]),
    ],
)
def test_small_splits_fill_every_positive_ratio(tokens, ratios, expected):
    parts = split(_table(tokens), ratios, SplitStrategy.RANDOM, seed=0)
    assert [len(p) for p in parts] == expected


def test_split_is_reproducible_and_time_ordered_keeps_order():
    table = _table([f"t{i}" for i in range(20)])
    a = split(table, [0.8, 0.1, 0.1], "random", seed=9)
    b = split(table, [0.8, 0.1, 0.1], "random", seed=9)
    for left, right in zip(a, b):
        assert left.columns["f"].tolist() == right.columns["f"].tolist()

    train, valid, test = split(table, [0.8, 0.1, 0.1], SplitStrategy.TIME_ORDERED, seed=9)
    assert train.columns["f"].tolist() == [f"t{i}" for i in range(16)]
    assert test.columns["f"].tolist() == ["t18", "t19"]


def test_split_errors():
    with pytest.raises(DataError):
        split(_table(["a", "b"]), [0.7, 0.2, 0.1], SplitStrategy.RANDOM, seed=0)
    with pytest.raises(ArgumentError):
        split(_table(["a", "b", "c"]), [0.5, 0.2, 0.1], SplitStrategy.RANDOM, seed=0)


def test_batches_cover_rows_in_order():
    dataset, _ = synth_generate(25, 2, 3, 0.0, seed=1)
    sizes = [len(b) for b in batches(dataset, 10)]
    assert sizes == [10, 10, 5]
    stacked = np.concatenate([b.ids for b in batches(dataset, 10)])
    assert np.array_equal(stacked, dataset.ids)
    with pytest.raises(ArgumentError):
        next(batches(dataset, 0))


def test_shuffled_epochs_differ_but_cover_the_same_rows():
    dataset, _ = synth_generate(50, 1, 50, 0.0, seed=2)
    first = np.concatenate([b.ids[:, 0] for b in batches(dataset, 8, True, seed=4, epoch=1)])
    second = np.concatenate([b.ids[:, 0] for b in batches(dataset, 8, True, seed=4, epoch=2)])
    again = np.concatenate([b.ids[:, 0] for b in batches(dataset, 8, True, seed=4, epoch=1)])
    assert not np.array_equal(first, second)
    assert np.array_equal(first, again)
    assert sorted(first) == sorted(second) == sorted(dataset.ids[:, 0])


def test_synth_generate_shapes_and_mask():
    dataset, truth = synth_generate(1000, 5, 7, 0.2, seed=11, n_users=10)
    assert dataset.ids.shape == (1000, 5)
    assert dataset.vocab_sizes == [8] * 5
    assert dataset.ids.min() >= 1
    assert len(truth.hard_rows) == 200
    assert len(set(dataset.user_ids)) <= 10


def test_token_selection_flips_whole_first_field_tokens():
    dataset, truth = synth_generate(2000, 4, 10, 0.2, seed=5, hard_selection="token")
    assert truth.hard_selection == HardSelection.TOKEN
    assert len(truth.hard_rows) == 400
    hard = np.zeros(len(dataset), dtype=bool)
    hard[truth.hard_rows] = True
    first = dataset.ids[:, 0]
    shares = [hard[first == token].mean() for token in np.unique(first)]
    assert sum(0.0 < share < 1.0 for share in shares) <= 1

    random_rows = synth_generate(2000, 4, 10, 0.2, seed=5)[1].hard_rows
    assert len(random_rows) == 400 and random_rows != truth.hard_rows


def test_synth_generate_empty():
    dataset, truth = synth_generate(0, 3, 4, 0.5, seed=1)
    assert len(dataset) == 0
    assert truth.hard_rows == []


def test_synth_generate_rejects_bad_fraction():
    with pytest.raises(ArgumentError):
        synth_generate(10, 2, 2, 1.5, seed=1)


@pytest.mark.parametrize("hard_fraction, low, high", [(0.0, 0.9, 1.0), (1.0, 0.0, 0.15)])
def test_planted_model_separates_labels(hard_fraction, low, high):
    """The planted logit predicts clean labels and anti-predicts fully flipped ones."""
    dataset, truth = synth_generate(5000, 5, 20, hard_fraction, seed=21)
    scores = 1.0 / (1.0 + np.exp(-truth.planted_logits(dataset)))
    value = auc(ScoredSet(scores=scores, labels=dataset.labels))
    assert low <= value <= high


def test_synth_is_deterministic(tmp_path):
    """Same seed, same file bytes."""
    a = write_csv(synth_generate(200, 3, 5, 0.1, seed=8)[0], tmp_path / "a.csv")
    b = write_csv(synth_generate(200, 3, 5, 0.1, seed=8)[0], tmp_path / "b.csv")
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text().splitlines()[0] == "f0,f1,f2,label"


def test_csv_roundtrip_preserves_ids(tmp_path):
    dataset, _ = synth_generate(300, 3, 6, 0.0, seed=4, n_users=5)
    path = write_csv(dataset, tmp_path / "synth.csv")
    table = read_csv(path)
    reencoded = encode(table, dataset.fields)
    assert np.array_equal(reencoded.ids, dataset.ids)
    assert np.array_equal(reencoded.labels, dataset.labels)


def test_vocab_sidecar_roundtrip(tmp_path):
    vocabs = build_vocabs(_table(["a", "b", "a", "c"]), 1)
    path = save_vocab_sidecar(vocabs, tmp_path / "vocab.csv")
    assert path.read_text().splitlines()[1] == "f,<OOV>,0"
    assert load_vocab_sidecar(path) == vocabs
    with pytest.raises(DataError):
        load_vocab_sidecar(tmp_path / "nope.csv")


def test_prepare_datasets_builds_vocab_on_train_only(synthetic_csv):
    config = ModelConfig(data_path=synthetic_csv, d=4, min_frequency=1, seed=3)
    prepared = prepare_datasets(config)
    assert len(prepared.train) + len(prepared.valid) + len(prepared.test) == 600
    assert prepared.train.vocab_sizes == prepared.test.vocab_sizes
    assert prepared.by_name("valid") is prepared.valid
    with pytest.raises(ArgumentError):
        prepared.by_name("holdout")


def test_prepare_datasets_needs_data():
    with pytest.raises(ConfigError):
        prepare_datasets(ModelConfig())
    with pytest.raises(ConfigError):
        prepare_datasets(ModelConfig(train_path="train.csv"))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.sampled_from(["a", "b", "c", "d", "e"]), min_size=1, max_size=40),
       st.integers(1, 5))
def test_encoded_ids_stay_in_range(tokens, min_frequency):
    """Every id is below its field's vocabulary size, for any threshold."""
    vocabs = build_vocabs(_table(tokens), min_frequency)
    data = encode(_table(["a", "z", *tokens]), vocabs)
    assert data.ids.min() >= 0
    assert data.ids.max() < vocabs[0].size
