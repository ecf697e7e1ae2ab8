"""Dataset schema, vocabulary building, CSV ingestion, splits and batching."""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Protocol, Sequence, TypeVar

import numpy as np
import pandas as pd
import structlog
from pydantic import BaseModel, Field

from .diffcore import Rng
from .errors import ArgumentError, ConfigError, DataError
from .models import HardSelection, ModelConfig, SplitStrategy

logger = structlog.get_logger(__name__)

OOV_INDEX = 0
OOV_TOKEN = "<OOV>"
LABEL_COLUMN = "label"
USER_COLUMN = "user_id"


class FieldVocab(BaseModel):
    """Token-to-id mapping of one categorical field; id 0 is the shared OOV id."""
    field_name: str = Field(..., description="Column name")
    value_to_index: dict[str, int] = Field(default_factory=dict)
    oov_index: int = OOV_INDEX

    @property
    def size(self) -> int:
        return len(self.value_to_index) + 1

    def encode(self, tokens) -> np.ndarray:
        """Map raw tokens to ids; unseen and folded tokens map to OOV."""
        series = pd.Series(np.asarray(tokens, dtype=object), dtype=object)
        ids = series.map(self.value_to_index).fillna(self.oov_index)
        return ids.to_numpy(dtype=np.int64)

    def decode(self, ids: np.ndarray) -> list[str]:
        index_to_token = [OOV_TOKEN] * self.size
        for token, index in self.value_to_index.items():
            index_to_token[index] = token
        return [index_to_token[int(i)] for i in ids]


@dataclass(frozen=True)
class RawTable:
    """String tokens per field, before vocabulary encoding."""

    field_names: list[str]
    columns: dict[str, np.ndarray]
    labels: np.ndarray
    user_ids: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def take(self, indices: np.ndarray) -> "RawTable":
        return RawTable(
            field_names=list(self.field_names),
            columns={name: col[indices] for name, col in self.columns.items()},
            labels=self.labels[indices],
            user_ids=None if self.user_ids is None else self.user_ids[indices],
        )


@dataclass(frozen=True)
class Dataset:
    """Encoded samples: one integer id per field, a binary label, optional user key."""

    fields: list[FieldVocab]
    ids: np.ndarray
    labels: np.ndarray
    user_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        n = self.labels.shape[0]
        if self.ids.shape != (n, len(self.fields)):
            raise DataError(
                f"ids shape {self.ids.shape} does not match {n} rows x {len(self.fields)} fields"
            )
        if self.user_ids is not None and self.user_ids.shape[0] != n:
            raise DataError("user_ids length does not match the number of rows")
        if n and not np.isin(self.labels, (0, 1)).all():
            raise DataError("labels must be 0 or 1")
        for j, vocab in enumerate(self.fields):
            column = self.ids[:, j]
            if n and (column.min() < 0 or column.max() >= vocab.size):
                raise DataError(f"id out of range in field {vocab.field_name}")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def field_names(self) -> list[str]:
        return [v.field_name for v in self.fields]

    @property
    def vocab_sizes(self) -> list[int]:
        return [v.size for v in self.fields]

    def take(self, indices: np.ndarray) -> "Dataset":
        return Dataset(
            fields=self.fields,
            ids=self.ids[indices],
            labels=self.labels[indices],
            user_ids=None if self.user_ids is None else self.user_ids[indices],
        )


@dataclass(frozen=True)
class Batch:
    """One mini-batch."""

    ids: np.ndarray
    labels: np.ndarray
    user_ids: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.labels.shape[0])


def discretize_numeric(x: float) -> int:
    """Bucket a numeric value as floor((log2 x)^2) for x > 2, else 1."""
    if x is None or math.isnan(x) or math.isinf(x):
        raise DataError(f"Cannot discretize non-finite value {x!r}")
    if x > 2:
        return int(math.floor(math.log2(x) ** 2))
    return 1


def _discretize_column(name: str, values: np.ndarray) -> np.ndarray:
    out = np.empty(values.shape[0], dtype=object)
    for i, raw in enumerate(values):
        if raw == "":
            out[i] = ""  # missing values keep their own token
            continue
        try:
            number = float(raw)
        except ValueError:
            raise DataError(f"Non-numeric value {raw!r} in numeric field {name}") from None
        out[i] = str(discretize_numeric(number))
    return out


def raw_from_frame(frame: pd.DataFrame, numeric_fields: Sequence[str] = ()) -> RawTable:
    """Turn a string DataFrame with a ``label`` column into a RawTable."""
    if LABEL_COLUMN not in frame.columns:
        raise DataError(f"Missing required column '{LABEL_COLUMN}'")
    labels = pd.to_numeric(frame[LABEL_COLUMN], errors="coerce")
    if labels.isna().any() or not labels.isin([0, 1]).all():
        raise DataError("Column 'label' must contain only 0 and 1")

    field_names = [c for c in frame.columns if c not in (LABEL_COLUMN, USER_COLUMN)]
    if not field_names:
        raise DataError("No feature columns found")
    unknown = set(numeric_fields) - set(field_names)
    if unknown:
        raise DataError(f"Numeric fields not present in data: {sorted(unknown)}")

    columns = {}
    for name in field_names:
        values = frame[name].astype(str).to_numpy(dtype=object)
        columns[name] = _discretize_column(name, values) if name in numeric_fields else values

    user_ids = None
    if USER_COLUMN in frame.columns:
        user_ids = frame[USER_COLUMN].astype(str).to_numpy(dtype=object)

    return RawTable(
        field_names=field_names,
        columns=columns,
        labels=labels.to_numpy(dtype=np.int64),
        user_ids=user_ids,
    )


def read_csv(path: Path, numeric_fields: Sequence[str] = ()) -> RawTable:
    """Read a UTF-8 CSV with a header row, a ``label`` column and optional ``user_id``."""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"Data file not found: {path}") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataError(f"Cannot parse {path}: {e}") from e
    table = raw_from_frame(frame, numeric_fields)
    logger.info("CSV loaded", path=str(path), rows=len(table), fields=len(table.field_names))
    return table


def build_vocabs(train: RawTable, min_frequency: int) -> list[FieldVocab]:
    """Build per-field vocabularies from the training split.

    Tokens seen fewer than ``min_frequency`` times fold into OOV; retained
    tokens get ids 1, 2, ... in order of first appearance.
    """
    if min_frequency < 1:
        raise ArgumentError("min_frequency must be at least 1")
    if len(train) == 0:
        raise DataError("Cannot build vocabularies from an empty training split")

    vocabs = []
    for name in train.field_names:
        series = pd.Series(train.columns[name], dtype=object)
        counts = series.value_counts(sort=False)
        retained = [t for t in pd.unique(series) if counts[t] >= min_frequency]
        vocab = FieldVocab(
            field_name=name,
            value_to_index={str(t): i + 1 for i, t in enumerate(retained)},
        )
        vocabs.append(vocab)
        logger.debug(
            "Vocabulary built",
            field=name,
            size=vocab.size,
            folded=int(len(counts) - len(retained)),
        )
    return vocabs


def encode(table: RawTable, vocabs: Sequence[FieldVocab]) -> Dataset:
    """Encode a RawTable with vocabularies built on the training split."""
    names = [v.field_name for v in vocabs]
    if names != table.field_names:
        raise DataError(f"Field mismatch: data has {table.field_names}, vocab has {names}")
    n = len(table)
    ids = np.zeros((n, len(vocabs)), dtype=np.int64)
    for j, vocab in enumerate(vocabs):
        ids[:, j] = vocab.encode(table.columns[vocab.field_name])
    return Dataset(fields=list(vocabs), ids=ids, labels=table.labels, user_ids=table.user_ids)


class _Splittable(Protocol):
    def __len__(self) -> int: ...

    def take(self, indices: np.ndarray): ...


T = TypeVar("T", bound=_Splittable)


def split(
    data: T, ratios: Sequence[float], strategy: SplitStrategy, seed: int
) -> tuple[T, T, T]:
    """Split into disjoint, exhaustive train/valid/test parts.

    Every part with a positive ratio gets at least one row; rounding
    shortfalls are taken from the largest part.
    """
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ArgumentError(f"ratios must be three non-negative values summing to 1: {ratios}")
    n = len(data)
    if n < sum(1 for r in ratios if r > 0):
        raise DataError(f"{n} rows cannot fill {sum(1 for r in ratios if r > 0)} splits")

    if SplitStrategy(strategy) == SplitStrategy.TIME_ORDERED:
        order = np.arange(n)
    else:
        order = Rng(seed).child("split").generator.permutation(n)
    bounds = np.round(np.cumsum(ratios) * n).astype(int)
    bounds[-1] = n
    sizes = np.diff(bounds, prepend=0)
    for i, ratio in enumerate(ratios):
        if ratio > 0 and sizes[i] == 0:
            sizes[int(np.argmax(sizes))] -= 1
            sizes[i] = 1
    parts = np.split(order, np.cumsum(sizes)[:-1])
    if SplitStrategy(strategy) == SplitStrategy.RANDOM:
        parts = [np.sort(p) for p in parts]
    train, valid, test = (data.take(p) for p in parts)
    logger.info("Data split", strategy=str(strategy), sizes=[len(p) for p in parts])
    return train, valid, test


def batches(
    dataset: Dataset, batch_size: int, shuffle: bool = False, seed: int = 0, epoch: int = 0
) -> Iterator[Batch]:
    """Yield mini-batches covering every row once; shuffling is seeded per epoch."""
    if batch_size < 1:
        raise ArgumentError("batch_size must be at least 1")
    n = len(dataset)
    if shuffle:
        order = Rng(seed).child(f"shuffle/{epoch}").generator.permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield Batch(
            ids=dataset.ids[idx],
            labels=dataset.labels[idx],
            user_ids=None if dataset.user_ids is None else dataset.user_ids[idx],
        )


class SynthTruth(BaseModel):
    """Ground truth of a synthetic dataset."""
    seed: int
    hard_fraction: float
    hard_selection: HardSelection = HardSelection.RANDOM
    signal_scale: float
    bias: float = 0.0
    weights: list[list[float]] = Field(..., description="Planted weight per field and token")
    hard_rows: list[int] = Field(..., description="Rows whose planted logit was sign-flipped")

    def planted_logits(self, dataset: Dataset, flip_hard: bool = False) -> np.ndarray:
        """Planted logit per row (ids are token index + 1)."""
        weights = np.asarray(self.weights)
        f = weights.shape[0]
        logits = weights[np.arange(f), dataset.ids - 1].sum(axis=1) + self.bias
        if flip_hard and self.hard_rows:
            logits[np.asarray(self.hard_rows)] *= -1.0
        return logits


def synth_generate(
    n: int,
    f: int,
    s_per_field: int,
    hard_fraction: float,
    seed: int,
    n_users: int = 0,
    signal_scale: float = 6.0,
    hard_selection: HardSelection = HardSelection.RANDOM,
) -> tuple[Dataset, SynthTruth]:
    """Sample from a planted logistic model with a fraction of label-inconsistent rows.

    Each field's tokens carry a Gaussian weight (std ``signal_scale / sqrt(f)``,
    so the planted logit has std ``signal_scale``). Exactly
    ``round(n * hard_fraction)`` rows get their logit sign-flipped before the
    label is drawn. ``random`` picks those rows uniformly, so they cannot be
    told apart from the features; ``token`` picks the rows holding a seeded
    subset of the first field's tokens, so the flip is a feature interaction
    a model can learn.
    """
    if not 0.0 <= hard_fraction <= 1.0:
        raise ArgumentError("hard_fraction must lie in [0, 1]")
    if n < 0 or f < 1 or s_per_field < 1:
        raise ArgumentError("n must be >= 0, f and s_per_field >= 1")
    hard_selection = HardSelection(hard_selection)

    rng = Rng(seed).child("synth")
    weights = rng.child("weights").generator.normal(
        0.0, signal_scale / math.sqrt(f), size=(f, s_per_field)
    )
    tokens = rng.child("features").generator.integers(0, s_per_field, size=(n, f))
    logits = weights[np.arange(f), tokens].sum(axis=1) if n else np.zeros(0)

    n_hard = int(round(n * hard_fraction))
    hard_rng = rng.child("hard").generator
    if hard_selection == HardSelection.TOKEN:
        token_rank = np.argsort(hard_rng.permutation(s_per_field))
        jitter = hard_rng.random(n)
        # rows of the lowest-ranked tokens first; only the boundary token is split
        order = np.lexsort((jitter, token_rank[tokens[:, 0]])) if n else np.zeros(0, int)
        hard_rows = np.sort(order[:n_hard])
    else:
        hard_rows = np.sort(hard_rng.choice(n, size=n_hard, replace=False))
    logits[hard_rows] *= -1.0

    probs = np.exp(-np.logaddexp(0.0, -logits))
    labels = (rng.child("labels").generator.random(n) < probs).astype(np.int64)

    user_ids = None
    if n_users > 0:
        users = rng.child("users").generator.integers(0, n_users, size=n)
        user_ids = np.array([f"u{u}" for u in users], dtype=object)

    vocabs = [
        FieldVocab(field_name=f"f{i}", value_to_index={f"v{j}": j + 1 for j in range(s_per_field)})
        for i in range(f)
    ]
    dataset = Dataset(
        fields=vocabs, ids=(tokens + 1).astype(np.int64), labels=labels, user_ids=user_ids
    )
    truth = SynthTruth(
        seed=seed,
        hard_fraction=hard_fraction,
        hard_selection=hard_selection,
        signal_scale=signal_scale,
        weights=weights.tolist(),
        hard_rows=hard_rows.tolist(),
    )
    logger.info("Synthetic data generated", rows=n, fields=f, hard_rows=n_hard)
    return dataset, truth


def dataset_to_frame(dataset: Dataset) -> pd.DataFrame:
    """Decode a Dataset back to raw tokens in the CSV ingestion layout."""
    frame = pd.DataFrame(
        {v.field_name: v.decode(dataset.ids[:, j]) for j, v in enumerate(dataset.fields)}
    )
    frame[LABEL_COLUMN] = dataset.labels
    if dataset.user_ids is not None:
        frame[USER_COLUMN] = dataset.user_ids
    return frame


def write_csv(dataset: Dataset, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dataset_to_frame(dataset).to_csv(path, index=False, lineterminator="\n")
    return path


def save_vocab_sidecar(vocabs: Sequence[FieldVocab], path: Path) -> Path:
    """Write one (field, token, id) line per vocabulary entry, OOV included."""
    rows = []
    for vocab in vocabs:
        rows.append({"field": vocab.field_name, "token": OOV_TOKEN, "id": vocab.oov_index})
        rows.extend(
            {"field": vocab.field_name, "token": token, "id": index}
            for token, index in vocab.value_to_index.items()
        )
    pd.DataFrame(rows, columns=["field", "token", "id"]).to_csv(
        path, index=False, lineterminator="\n"
    )
    return Path(path)


def load_vocab_sidecar(path: Path) -> list[FieldVocab]:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError:
        raise DataError(f"Vocabulary sidecar not found: {path}") from None
    vocabs: dict[str, dict[str, int]] = {}
    for field_name, token, index in frame.itertuples(index=False):
        mapping = vocabs.setdefault(field_name, {})
        if int(index) != OOV_INDEX:
            mapping[token] = int(index)
    return [FieldVocab(field_name=name, value_to_index=mapping) for name, mapping in vocabs.items()]


@dataclass(frozen=True)
class PreparedData:
    """Encoded splits and the vocabularies built on the training split."""

    train: Dataset
    valid: Dataset
    test: Dataset
    vocabs: list[FieldVocab]

    def by_name(self, split_name: str) -> Dataset:
        if split_name not in ("train", "valid", "test"):
            raise ArgumentError(f"Unknown split: {split_name}")
        return getattr(self, split_name)


def load_raw_splits(config: ModelConfig) -> tuple[RawTable, RawTable, RawTable]:
    """Read pre-split files, or one file split by ``split_ratios``."""
    numeric = config.numeric_fields
    if config.train_path is not None:
        if config.valid_path is None:
            raise ConfigError("train_path needs a valid_path as well")
        train = read_csv(config.train_path, numeric)
        valid = read_csv(config.valid_path, numeric)
        if config.test_path is not None:
            test = read_csv(config.test_path, numeric)
        else:
            test = train.take(np.arange(0))
        return train, valid, test
    if config.data_path is not None:
        table = read_csv(config.data_path, numeric)
        return split(table, config.split_ratios, config.split_strategy, config.seed)
    raise ConfigError("No data configured: set data_path, or train_path and valid_path")


def prepare_datasets(
    config: ModelConfig, vocabs: Optional[Sequence[FieldVocab]] = None
) -> PreparedData:
    """Load, split and encode; vocabularies come from the training split unless given."""
    train_raw, valid_raw, test_raw = load_raw_splits(config)
    if vocabs is None:
        vocabs = build_vocabs(train_raw, config.min_frequency)
    vocabs = list(vocabs)
    return PreparedData(
        train=encode(train_raw, vocabs),
        valid=encode(valid_raw, vocabs),
        test=encode(test_raw, vocabs),
        vocabs=vocabs,
    )
