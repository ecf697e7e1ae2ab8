"""Data models for the tf4ctr training stack."""

from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class _LenientEnum(str, Enum):
    """String enum that also accepts its values case-insensitively."""

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str):
            for member in cls:
                if member.value.lower() == value.strip().lower():
                    return member
        return None


class SsemVariant(_LenientEnum):
    """Sample Selection Embedding Module variants."""
    SER = "SER"
    GM = "GM"
    MMOE = "MMoE"
    SHARE = "Share"


class DfmVariant(_LenientEnum):
    """Dynamic Fusion Module variants."""
    WSF = "WSF"
    VF = "VF"
    CF = "CF"
    MOEF = "MoEF"
    SUM = "Sum"


class LossKind(_LenientEnum):
    """Training objectives."""
    LOGLOSS = "logloss"
    TF = "tf"
    FOCAL = "focal"


class SplitStrategy(_LenientEnum):
    """How a single CSV is divided into train/valid/test."""
    RANDOM = "random"
    TIME_ORDERED = "time_ordered"


class HardSelection(_LenientEnum):
    """Which synthetic rows get their planted logit flipped."""
    RANDOM = "random"
    TOKEN = "token"


class SampleClass(str, Enum):
    """Label class of a sample."""
    POSITIVE = "positive"
    NEGATIVE = "negative"


class SampleCategory(str, Enum):
    """Difficulty category of a prediction."""
    MISCLASSIFIED = "misclassified"
    POORLY = "poorly"
    WELL = "well"


def _split_list(value):
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class TfHyper(BaseModel):
    """Twin Focus Loss hyperparameters."""
    alpha: float = Field(0.25, ge=0.0, le=1.0, description="Weight of the simple-head loss")
    c: float = Field(0.5, ge=0.0, le=1.0, description="Simple-head offset; m = 2 - c")
    gamma: float = Field(2.0, ge=0.0, description="Modulating exponent")
    focal_gamma: float = Field(2.0, ge=0.0, description="Focal Loss exponent (comparator)")

    @property
    def m(self) -> float:
        return 2.0 - self.c


class EncoderConfig(BaseModel):
    """Widths and head options of one MLP feature-interaction encoder."""
    hidden_units: list[int] = Field(..., description="Hidden layer widths")
    head_bias: bool = Field(False, description="Add a bias to the logit head")
    activation: Literal["relu", "sigmoid"] = Field("relu", description="Hidden activation")

    @field_validator("hidden_units", mode="before")
    @classmethod
    def parse_units(cls, v):
        return _split_list(v)

    @property
    def depth(self) -> int:
        return len(self.hidden_units)


class ModelConfig(BaseModel):
    """Every knob of a training run."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    # data
    data_path: Optional[Path] = Field(None, description="Single CSV split by split_ratios")
    train_path: Optional[Path] = Field(None, description="Pre-split training CSV")
    valid_path: Optional[Path] = Field(None, description="Pre-split validation CSV")
    test_path: Optional[Path] = Field(None, description="Pre-split test CSV")
    split_ratios: list[float] = Field(default_factory=lambda: [0.7, 0.2, 0.1])
    split_strategy: SplitStrategy = SplitStrategy.RANDOM
    min_frequency: int = Field(2, ge=1, description="Tokens rarer than this fold to OOV")
    numeric_fields: list[str] = Field(default_factory=list)

    # architecture
    embedding_dim: int = Field(16, ge=1, alias="d")
    ssem_variant: SsemVariant = Field(SsemVariant.SER, alias="ssem")
    dfm_variant: DfmVariant = Field(DfmVariant.WSF, alias="dfm")
    simple_hidden: list[int] = Field(default_factory=lambda: [400])
    complex_hidden: list[int] = Field(default_factory=lambda: [400, 400, 400])
    expert_hidden: list[int] = Field(default_factory=lambda: [400, 200])
    gate_hidden: list[int] = Field(default_factory=lambda: [400, 100])
    head_bias: bool = False
    hidden_activation: Literal["relu", "sigmoid"] = "relu"
    vf_temperature: float = Field(1.0, gt=0.0, alias="tau")

    # objective
    loss: LossKind = LossKind.TF
    tf_alpha: float = Field(0.25, ge=0.0, le=1.0, alias="alpha")
    tf_c: float = Field(0.5, ge=0.0, le=1.0, alias="c")
    tf_gamma: float = Field(2.0, ge=0.0, alias="gamma")
    focal_gamma: float = Field(2.0, ge=0.0)

    # optimisation
    batch_size: int = Field(10000, ge=1)
    eval_batch_size: int = Field(10000, ge=1)
    learning_rate: float = Field(0.001, gt=0.0, alias="lr")
    lr_decay: float = Field(1.0, gt=0.0, le=1.0, description="Per-epoch multiplicative decay")
    clip_norm: float = Field(10.0, gt=0.0)
    patience: int = Field(2, ge=1)
    max_epochs: int = Field(100, ge=1)
    seed: int = 2024
    precision: Literal["float64", "float32"] = "float64"

    # analysis
    eval_thresholds: list[float] = Field(default_factory=lambda: [0.3, 0.6])
    keep_epoch_checkpoints: bool = False
    measure_timing: bool = False

    @field_validator(
        "split_ratios",
        "numeric_fields",
        "simple_hidden",
        "complex_hidden",
        "expert_hidden",
        "gate_hidden",
        "eval_thresholds",
        mode="before",
    )
    @classmethod
    def parse_lists(cls, v):
        return _split_list(v)

    @field_validator("data_path", "train_path", "valid_path", "test_path", mode="before")
    @classmethod
    def empty_path_is_none(cls, v):
        if isinstance(v, str) and not v.strip():
            return None
        return v

    @model_validator(mode="after")
    def check_consistency(self) -> "ModelConfig":
        if self.ssem_variant == SsemVariant.SER and self.embedding_dim % 2:
            raise ValueError("SER needs an even embedding_dim (the simple branch uses d/2)")
        if len(self.simple_hidden) >= len(self.complex_hidden):
            raise ValueError(
                "simple encoder must be shallower than the complex encoder "
                f"({len(self.simple_hidden)} >= {len(self.complex_hidden)} layers)"
            )
        if len(self.eval_thresholds) != 2:
            raise ValueError("eval_thresholds needs exactly two values (t_low, t_high)")
        t_low, t_high = self.eval_thresholds
        if not 0.0 <= t_low < t_high <= 1.0:
            raise ValueError("eval_thresholds must satisfy 0 <= t_low < t_high <= 1")
        if len(self.split_ratios) != 3 or abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ValueError("split_ratios needs three values summing to 1")
        if any(r < 0 for r in self.split_ratios):
            raise ValueError("split_ratios must be non-negative")
        return self

    @property
    def tf_hyper(self) -> TfHyper:
        return TfHyper(
            alpha=self.tf_alpha, c=self.tf_c, gamma=self.tf_gamma, focal_gamma=self.focal_gamma
        )

    @property
    def thresholds(self) -> tuple[float, float]:
        return self.eval_thresholds[0], self.eval_thresholds[1]

    def encoder_configs(self) -> tuple[EncoderConfig, EncoderConfig]:
        simple = EncoderConfig(
            hidden_units=self.simple_hidden,
            head_bias=self.head_bias,
            activation=self.hidden_activation,
        )
        complex_ = EncoderConfig(
            hidden_units=self.complex_hidden,
            head_bias=self.head_bias,
            activation=self.hidden_activation,
        )
        return simple, complex_

    @property
    def is_baseline(self) -> bool:
        """Share + Sum + logloss: the plain dual-MLP topology."""
        return (
            self.ssem_variant == SsemVariant.SHARE
            and self.dfm_variant == DfmVariant.SUM
            and self.loss == LossKind.LOGLOSS
        )


class LossReport(BaseModel):
    """Loss terms of one batch and the logit-gradient magnitudes."""
    loss_ctr: float
    loss_simple: float = 0.0
    loss_complex: float = 0.0
    loss_tf: float = 0.0
    loss_total: float
    grad_norm_zs: float = 0.0
    grad_norm_zc: float = 0.0


class CategoryHistogram(BaseModel):
    """Counts of well / poorly / misclassified samples per label class."""
    t_low: float
    t_high: float
    counts: dict[SampleClass, dict[SampleCategory, int]]

    @property
    def total(self) -> int:
        return sum(sum(by_cat.values()) for by_cat in self.counts.values())

    def count(self, sample_class: SampleClass, category: SampleCategory) -> int:
        return self.counts[sample_class][category]

    def to_rows(self, epoch, split: str) -> list[dict]:
        """Long-format rows: epoch, split, class, category, count."""
        return [
            {
                "epoch": epoch,
                "split": split,
                "class": sample_class.value,
                "category": category.value,
                "count": self.counts[sample_class][category],
            }
            for sample_class in SampleClass
            for category in SampleCategory
        ]


class MetricsReport(BaseModel):
    """Evaluation of one split."""
    split: str
    epoch: Optional[int] = None
    auc: Optional[float] = Field(None, description="None when only one class is present")
    gauc: Optional[float] = Field(None, description="None when no user qualifies")
    logloss: float
    n_rows: int
    category_counts: CategoryHistogram
    seconds: float = 0.0
    per_sample_ms: float = 0.0


class EpochRecord(BaseModel):
    """One row of history.csv."""
    epoch: int
    train_loss: float
    train_loss_ctr: float
    train_loss_tf: float
    valid_auc: float
    valid_gauc: Optional[float] = None
    valid_logloss: float
    lr: float


class GradNormRecord(BaseModel):
    """One row of gradnorm.csv."""
    epoch: int
    batch_index: int
    grad_norm_zs: float
    grad_norm_zc: float
    loss_ctr: float
    loss_tf: float


class TimingRecord(BaseModel):
    """One row of timing.csv."""
    epoch: Optional[int] = None
    phase: Literal["train", "inference"]
    seconds: float
    per_sample_ms: float


class RunManifest(BaseModel):
    """Identity and provenance of one run directory."""
    run_id: str
    config: dict = Field(..., description="Resolved configuration")
    seed: int
    code_version: str
    started_at: datetime = Field(default_factory=datetime.now)
    finished_at: Optional[datetime] = None
    outputs: dict[str, str] = Field(default_factory=dict)


class GridCellResult(BaseModel):
    """Outcome of one grid cell."""
    cell: int
    overrides: dict[str, str]
    status: Literal["ok", "failed"]
    run_dir: Optional[str] = None
    test_auc: Optional[float] = None
    test_gauc: Optional[float] = None
    test_logloss: Optional[float] = None
    per_sample_ms: Optional[float] = None
    error: Optional[str] = None
